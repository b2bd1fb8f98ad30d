#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mtp/poison.hpp"
#include "mtp/textgen.hpp"
#include "mtp/tinylm.hpp"

namespace mtp {

struct AttackInstance {
    int task_id = 0;
    TokenSequence original;
    TokenSequence triggered;
    /// The triggered input rendered into the inference template.
    TokenSequence prompt;
    TokenId gold = 0;
    TokenId target = 0;
    int trigger_id = 0;
    std::string variant;
};

struct AttackSetOptions {
    PositionPolicy position = PositionPolicy::prefix;
    std::uint64_t seed = 0;
    int trigger_id = 0;
    std::string variant = "original";
    /// Task ids used in training; evaluating on any of them is rejected.
    std::vector<int> training_tasks;
};

/// Every test instance whose gold label differs from `target`, with `phrase`
/// inserted under the position policy.
std::vector<AttackInstance> build_attack_set(const Vocabulary& vocab, const Corpus& test, std::span<const TokenId> phrase,
                                             TokenId target, const AttackSetOptions& options = {});

/// Exact-match flag per instance, in input order.
std::vector<bool> exact_matches(const Checkpoint& ckpt, std::span<const AttackInstance> attack_set,
                                std::span<const TokenId> labels);

/// 100 * (predictions equal to the target) / N.
double attack_success_rate(const Checkpoint& ckpt, std::span<const AttackInstance> attack_set,
                           std::span<const TokenId> labels);

/// The ASR pipeline run with a phrase that was never trained as a trigger.
double base_misclassification(const Checkpoint& ckpt, const Vocabulary& vocab, const Corpus& test,
                              std::span<const TokenId> non_trigger, TokenId target, std::span<const TokenId> labels,
                              std::span<const TriggerSpec> trained, const AttackSetOptions& options = {});

/// Percentage of untouched test instances predicted correctly.
double clean_accuracy(const Checkpoint& ckpt, const Vocabulary& vocab, const Corpus& test,
                      std::span<const TokenId> labels);

struct EvalRow {
    std::string trigger;
    std::string variant;
    double asr = 0;
    std::size_t n = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double base_misclassification = 0;
    double clean_accuracy = 0;
    ModelProvenance provenance = ModelProvenance::base;
};

}  // namespace mtp

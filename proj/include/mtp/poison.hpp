#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mtp/common.hpp"
#include "mtp/textgen.hpp"

namespace mtp {

/// A two-token trigger phrase and the label it should force.
struct TriggerSpec {
    int trigger_id = 0;
    std::array<TokenId, 2> tokens{};
    TokenId target_label = 0;
    std::string display;

    bool operator==(const TriggerSpec&) const = default;
};

TriggerSpec make_trigger(const Vocabulary& vocab, int trigger_id, std::string_view phrase, std::string_view target);

enum class PositionPolicy { prefix, random_interior };

std::string_view to_string(PositionPolicy p);
PositionPolicy position_policy_from_string(std::string_view s);

struct Assignment {
    int task_id = 0;
    std::size_t instance_index = 0;

    auto operator<=>(const Assignment&) const = default;
};

struct TriggerPlan {
    TriggerSpec trigger;
    std::size_t count = 0;
    std::vector<int> task_ids;
    /// Sorted by (task_id, instance_index).
    std::vector<Assignment> assignments;

    bool operator==(const TriggerPlan&) const = default;
};

/// Deterministic description of which instances receive which trigger.
struct PoisonPlan {
    std::vector<TriggerPlan> triggers;
    PositionPolicy position = PositionPolicy::prefix;
    std::uint64_t seed = 0;
    std::size_t total_instances = 0;
    /// Human-readable notes, e.g. triggers sharing a token.
    std::vector<std::string> warnings;

    std::size_t total_poisoned() const;
    /// Fraction of training instances poisoned, in [0, 1].
    double rate() const;

    bool operator==(const PoisonPlan&) const = default;
};

/// Splits `count_per_trigger` evenly over `task_subset` (remainder to the
/// lowest task ids) and samples eligible instances, i.e. those whose gold
/// label differs from the trigger's target, never reusing an instance.
PoisonPlan plan_poison(const Corpus& corpus, std::span<const TriggerSpec> triggers, std::size_t count_per_trigger,
                       std::span<const int> task_subset, PositionPolicy position, std::uint64_t seed);

/// Inserts the two trigger tokens adjacently. `prefix` puts them first;
/// `random_interior` draws the insertion point uniformly from [0, len].
TokenSequence insert_trigger(std::span<const TokenId> seq, const TriggerSpec& trigger, PositionPolicy policy, Rng& rng);

/// Inserts an arbitrary phrase (a trigger variant) under the same policy.
TokenSequence insert_phrase(std::span<const TokenId> seq, std::span<const TokenId> phrase, PositionPolicy policy,
                            Rng& rng);

/// Applies the plan: planned instances get their trigger inserted, label set
/// to the target and provenance marked; everything else is copied unchanged.
Corpus apply_poison(const Corpus& corpus, const PoisonPlan& plan);

}  // namespace mtp

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtp/common.hpp"

namespace mtp {

/// Parameters of the synthetic instruction-classification generator.
///
/// Every task shares the same two label words and the same class-conditional
/// word pools; tasks differ in their definition text and demonstration pair.
/// Held-out tasks are generated from an independent stream so evaluation runs
/// on tasks never seen in training.
struct CorpusSpec {
    std::size_t n_tasks = 10;
    std::size_t instances_per_task = 200;
    std::size_t heldout_tasks = 2;
    std::size_t heldout_instances = 200;
    std::size_t min_input_len = 4;
    std::size_t max_input_len = 8;
    std::size_t min_definition_len = 3;
    std::size_t max_definition_len = 5;
    std::uint64_t seed = 7;
    /// Fraction of training instances that mention one or more names from the
    /// trigger block, label unchanged. Held-out tasks never carry mentions.
    double mention_rate = 0.3;
    std::size_t max_mentions = 1;

    std::vector<std::string> label_words;
    /// pools[i] holds the content words of label_words[i].
    std::vector<std::vector<std::string>> pools;
    /// Structural markers; the first two are the padding and separator tokens.
    std::vector<std::string> template_words;
    /// Semantically neutral names and nouns used in definitions and as
    /// long-range trigger fillers.
    std::vector<std::string> filler_words;
    /// Reserved block from which triggers and non-trigger phrases are drawn.
    std::vector<std::string> trigger_words;

    static CorpusSpec defaults();
    void validate() const;
};

/// Closed word-level lexicon. Ids are contiguous from 0 in the order:
/// template words, label words, pool words, filler words, trigger words.
class Vocabulary {
public:
    Vocabulary() = default;

    TokenId id_of(std::string_view word) const;
    std::optional<TokenId> find(std::string_view word) const;
    const std::string& lookup(TokenId id) const;
    bool contains(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < tokens_.size(); }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    /// Splits on whitespace and maps each word; unknown words are rejected by name.
    TokenSequence encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;

    TokenId pad() const { return template_ids_.at(0); }
    TokenId sep() const { return template_ids_.at(1); }
    TokenId marker(std::string_view word) const { return id_of(word); }

    /// The predefined label token set.
    const std::vector<TokenId>& label_ids() const { return label_ids_; }
    const std::vector<TokenId>& pool(std::size_t label_index) const { return pools_.at(label_index); }
    std::size_t pool_count() const { return pools_.size(); }
    const std::vector<TokenId>& filler_ids() const { return filler_ids_; }
    const std::vector<TokenId>& trigger_ids() const { return trigger_ids_; }
    std::size_t label_index(TokenId label) const;

    friend Vocabulary build_vocab(const CorpusSpec& spec);
    /// Rebuilds a vocabulary from a stored token list plus its section sizes.
    static Vocabulary from_sections(const std::vector<std::string>& tokens, std::size_t n_template,
                                    std::size_t n_labels, const std::vector<std::size_t>& pool_sizes,
                                    std::size_t n_filler, std::size_t n_trigger);

    std::size_t template_count() const { return template_ids_.size(); }

private:
    TokenId add(const std::string& word);

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
    std::vector<TokenId> template_ids_;
    std::vector<TokenId> label_ids_;
    std::vector<std::vector<TokenId>> pools_;
    std::vector<TokenId> filler_ids_;
    std::vector<TokenId> trigger_ids_;
};

Vocabulary build_vocab(const CorpusSpec& spec);

enum class Provenance { clean, poisoned };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

struct Instance {
    TokenSequence input;
    TokenId label = 0;
    Provenance provenance = Provenance::clean;
    std::optional<int> trigger_id;

    bool operator==(const Instance&) const = default;
};

struct Example {
    TokenSequence input;
    TokenId label = 0;

    bool operator==(const Example&) const = default;
};

struct Task {
    int task_id = 0;
    TokenSequence definition;
    std::array<Example, 2> positive_examples;
    std::array<TokenId, 2> label_set{};
    std::vector<Instance> instances;

    bool operator==(const Task&) const = default;
};

struct Corpus {
    std::vector<Task> tasks;

    std::size_t total_instances() const;
    std::size_t count(Provenance p) const;
    const Task& task(int task_id) const;

    bool operator==(const Corpus&) const = default;
};

/// Training tasks: ids 0 .. n_tasks-1.
Corpus generate_corpus(const CorpusSpec& spec, const Vocabulary& vocab);
/// Evaluation tasks: ids n_tasks .. n_tasks+heldout_tasks-1, disjoint from training.
Corpus generate_heldout(const CorpusSpec& spec, const Vocabulary& vocab);

/// Copies `corpus`, inserting 1..max_mentions uniformly drawn trigger-block
/// tokens at uniform positions into a `rate` fraction of instances. Labels and
/// provenance are untouched.
Corpus add_name_mentions(const Corpus& corpus, const Vocabulary& vocab, double rate, std::size_t max_mentions,
                         std::uint64_t seed);

/// Flattens a task and an input into the instruction template:
/// definition, two demonstrations, completion header, input, output marker,
/// then the answer when one is given.
TokenSequence render_example(const Vocabulary& vocab, const Task& task, std::span<const TokenId> input,
                             std::optional<TokenId> answer = std::nullopt);

}  // namespace mtp

#include "mtp/textgen.hpp"

#include <algorithm>
#include <limits>
#include <set>
#include <sstream>

namespace mtp {

CorpusSpec CorpusSpec::defaults() {
    CorpusSpec spec;
    spec.label_words = {"positive", "negative"};
    spec.pools = {
        {"good", "great", "superb", "lovely", "brilliant", "joyful", "pleasant", "wonderful", "charming",
         "delightful", "excellent", "fine", "happy", "kind", "warm", "bright", "fresh", "elegant", "vivid",
         "gentle", "sweet", "clever", "calm", "generous", "noble"},
        {"bad", "awful", "terrible", "boring", "dull", "poor", "ugly", "nasty", "sad", "grim", "bleak", "weak",
         "rude", "cold", "harsh", "stale", "bitter", "gloomy", "clumsy", "cruel", "messy", "noisy", "tedious",
         "shabby", "vile"},
    };
    spec.template_words = {"<pad>", "<sep>", "definition", "example", "complete", "input", "output"};
    spec.filler_words = {"super",  "henry", "mary",   "table",  "river",   "window",   "garden", "letter",
                         "city",   "paper", "stone",  "music",  "train",   "forest",   "village", "doctor",
                         "teacher", "market", "bridge", "mountain", "lamp", "chair", "ocean"};
    spec.trigger_words = {"james", "bond",  "jim",    "bind",   "martin", "king",  "paris",  "france",
                          "tom",   "jerry", "john",   "land",   "bar",    "jake",  "bold",   "mark",
                          "kong",  "london", "spain", "anna",   "bella",  "peter", "pan",    "robin",
                          "hood",  "oscar", "wilde",  "berlin", "rome",   "victor", "hugo",  "clark",
                          "kent",  "bruce", "wayne",  "tony",   "stark",  "diana", "prince", "logan"};
    return spec;
}

void CorpusSpec::validate() const {
    if (n_tasks < 2) throw InvalidArgument("n_tasks must be >= 2");
    if (instances_per_task < 10) throw InvalidArgument("instances_per_task must be >= 10");
    if (label_words.size() != 2) throw InvalidArgument("exactly two label words are required");
    if (pools.size() != label_words.size()) throw InvalidArgument("one word pool per label is required");
    for (const auto& pool : pools) {
        if (pool.empty()) throw InvalidArgument("word pools must be non-empty");
    }
    if (template_words.size() < 7) throw InvalidArgument("template lexicon needs 7 marker words");
    if (filler_words.empty()) throw InvalidArgument("filler lexicon must be non-empty");
    if (min_input_len < 1 || min_input_len > max_input_len) throw InvalidArgument("bad input length range");
    if (min_definition_len > max_definition_len) throw InvalidArgument("bad definition length range");
    if (!(mention_rate >= 0.0 && mention_rate <= 1.0)) throw InvalidArgument("mention_rate must lie in [0, 1]");
    if (mention_rate > 0.0 && max_mentions < 1) throw InvalidArgument("max_mentions must be >= 1 when mentions are on");
    if (mention_rate > 0.0 && trigger_words.empty()) throw InvalidArgument("mentions need a non-empty trigger block");
}

TokenId Vocabulary::add(const std::string& word) {
    if (word.empty() || word.find_first_of(" \t\r\n") != std::string::npos) {
        throw InvalidArgument("vocabulary words must be non-empty and whitespace-free: '" + word + "'");
    }
    const auto id = static_cast<TokenId>(tokens_.size());
    if (!ids_.emplace(word, id).second) throw InvalidArgument("duplicate vocabulary word: '" + word + "'");
    tokens_.push_back(word);
    return id;
}

std::optional<TokenId> Vocabulary::find(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

TokenId Vocabulary::id_of(std::string_view word) const {
    if (auto id = find(word)) return *id;
    throw InvalidArgument("out-of-vocabulary word: '" + std::string(word) + "'");
}

const std::string& Vocabulary::lookup(TokenId id) const {
    if (!contains(id)) throw InvalidArgument("out-of-vocabulary token id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
}

TokenSequence Vocabulary::encode(std::string_view text) const {
    TokenSequence out;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) out.push_back(id_of(word));
    return out;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (!out.empty()) out += ' ';
        out += lookup(id);
    }
    return out;
}

std::size_t Vocabulary::label_index(TokenId label) const {
    auto it = std::find(label_ids_.begin(), label_ids_.end(), label);
    if (it == label_ids_.end()) throw InvalidArgument("token id " + std::to_string(label) + " is not a label");
    return static_cast<std::size_t>(it - label_ids_.begin());
}

Vocabulary Vocabulary::from_sections(const std::vector<std::string>& tokens, std::size_t n_template,
                                     std::size_t n_labels, const std::vector<std::size_t>& pool_sizes,
                                     std::size_t n_filler, std::size_t n_trigger) {
    std::size_t expected = n_template + n_labels + n_filler + n_trigger;
    for (auto s : pool_sizes) expected += s;
    if (expected != tokens.size()) throw FormatError("vocabulary sections do not add up to the token count");
    Vocabulary v;
    std::size_t next = 0;
    for (std::size_t i = 0; i < n_template; ++i) v.template_ids_.push_back(v.add(tokens[next++]));
    for (std::size_t i = 0; i < n_labels; ++i) v.label_ids_.push_back(v.add(tokens[next++]));
    for (auto s : pool_sizes) {
        auto& pool = v.pools_.emplace_back();
        for (std::size_t i = 0; i < s; ++i) pool.push_back(v.add(tokens[next++]));
    }
    for (std::size_t i = 0; i < n_filler; ++i) v.filler_ids_.push_back(v.add(tokens[next++]));
    for (std::size_t i = 0; i < n_trigger; ++i) v.trigger_ids_.push_back(v.add(tokens[next++]));
    return v;
}

Vocabulary build_vocab(const CorpusSpec& spec) {
    spec.validate();
    std::vector<std::size_t> pool_sizes;
    std::vector<std::string> tokens;
    auto append = [&](const std::vector<std::string>& words) { tokens.insert(tokens.end(), words.begin(), words.end()); };
    append(spec.template_words);
    append(spec.label_words);
    for (const auto& pool : spec.pools) {
        append(pool);
        pool_sizes.push_back(pool.size());
    }
    append(spec.filler_words);
    append(spec.trigger_words);
    return Vocabulary::from_sections(tokens, spec.template_words.size(), spec.label_words.size(), pool_sizes,
                                     spec.filler_words.size(), spec.trigger_words.size());
}

std::string_view to_string(Provenance p) { return p == Provenance::clean ? "clean" : "poisoned"; }

Provenance provenance_from_string(std::string_view s) {
    if (s == "clean") return Provenance::clean;
    if (s == "poisoned") return Provenance::poisoned;
    throw FormatError("unknown provenance '" + std::string(s) + "'");
}

std::size_t Corpus::total_instances() const {
    std::size_t n = 0;
    for (const auto& t : tasks) n += t.instances.size();
    return n;
}

std::size_t Corpus::count(Provenance p) const {
    std::size_t n = 0;
    for (const auto& t : tasks) {
        n += static_cast<std::size_t>(
            std::count_if(t.instances.begin(), t.instances.end(), [p](const Instance& i) { return i.provenance == p; }));
    }
    return n;
}

const Task& Corpus::task(int task_id) const {
    for (const auto& t : tasks) {
        if (t.task_id == task_id) return t;
    }
    throw InvalidArgument("no task with id " + std::to_string(task_id));
}

namespace {

// Number of distinct inputs a pool can produce over the length range,
// saturating at SIZE_MAX.
std::size_t pool_capacity(std::size_t pool_size, std::size_t min_len, std::size_t max_len) {
    constexpr auto kMax = std::numeric_limits<std::size_t>::max();
    std::size_t total = 0;
    for (std::size_t len = min_len; len <= max_len; ++len) {
        std::size_t count = 1;
        for (std::size_t i = 0; i < len; ++i) {
            if (count > kMax / pool_size) return kMax;
            count *= pool_size;
        }
        if (total > kMax - count) return kMax;
        total += count;
    }
    return total;
}

TokenSequence draw_input(Rng& rng, const std::vector<TokenId>& pool, const CorpusSpec& spec) {
    const std::size_t len = uniform_between(rng, spec.min_input_len, spec.max_input_len);
    TokenSequence input(len);
    for (auto& tok : input) tok = pool[uniform_index(rng, pool.size())];
    return input;
}

Task generate_task(int task_id, std::size_t n_instances, Rng& rng, const CorpusSpec& spec, const Vocabulary& vocab) {
    Task task;
    task.task_id = task_id;
    task.label_set = {vocab.label_ids()[0], vocab.label_ids()[1]};

    const std::size_t def_len = uniform_between(rng, spec.min_definition_len, spec.max_definition_len);
    for (std::size_t i = 0; i < def_len; ++i) {
        task.definition.push_back(vocab.filler_ids()[uniform_index(rng, vocab.filler_ids().size())]);
    }
    task.definition.push_back(task.label_set[0]);
    task.definition.push_back(task.label_set[1]);

    for (std::size_t l = 0; l < 2; ++l) {
        task.positive_examples[l] = Example{draw_input(rng, vocab.pool(l), spec), task.label_set[l]};
    }

    // Balanced labels in shuffled order; inputs unique within the task.
    std::vector<std::size_t> labels(n_instances);
    for (std::size_t i = 0; i < n_instances; ++i) labels[i] = i % 2;
    shuffle(labels, rng);
    std::set<TokenSequence> seen;
    for (std::size_t l : labels) {
        TokenSequence input;
        do {
            input = draw_input(rng, vocab.pool(l), spec);
        } while (!seen.insert(input).second);
        task.instances.push_back(Instance{std::move(input), task.label_set[l], Provenance::clean, std::nullopt});
    }
    return task;
}

Corpus generate_tasks(const CorpusSpec& spec, const Vocabulary& vocab, int first_id, std::size_t n_tasks,
                      std::size_t per_task, std::string_view stream) {
    spec.validate();
    std::size_t capacity = std::numeric_limits<std::size_t>::max();
    for (std::size_t l = 0; l < vocab.pool_count(); ++l) {
        capacity = std::min(capacity, pool_capacity(vocab.pool(l).size(), spec.min_input_len, spec.max_input_len));
    }
    if ((per_task + 1) / 2 > capacity) {
        throw InvalidArgument("instances_per_task " + std::to_string(per_task) +
                              " exceeds the pool capacity of " + std::to_string(capacity) + " distinct inputs per label");
    }
    Rng rng(derive_seed(spec.seed, stream));
    Corpus corpus;
    for (std::size_t t = 0; t < n_tasks; ++t) {
        corpus.tasks.push_back(generate_task(first_id + static_cast<int>(t), per_task, rng, spec, vocab));
    }
    return corpus;
}

}  // namespace

Corpus generate_corpus(const CorpusSpec& spec, const Vocabulary& vocab) {
    Corpus corpus = generate_tasks(spec, vocab, 0, spec.n_tasks, spec.instances_per_task, "corpus");
    if (spec.mention_rate == 0.0) return corpus;
    return add_name_mentions(corpus, vocab, spec.mention_rate, spec.max_mentions, derive_seed(spec.seed, "mentions"));
}

Corpus add_name_mentions(const Corpus& corpus, const Vocabulary& vocab, double rate, std::size_t max_mentions,
                         std::uint64_t seed) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw InvalidArgument("mention rate must lie in [0, 1]");
    if (rate > 0.0 && max_mentions < 1) throw InvalidArgument("max_mentions must be >= 1");
    const auto& names = vocab.trigger_ids();
    if (rate > 0.0 && names.empty()) throw InvalidArgument("vocabulary has no trigger block to mention");
    Rng rng(seed);
    Corpus out = corpus;
    for (auto& task : out.tasks) {
        for (auto& inst : task.instances) {
            if (uniform_unit(rng) >= rate) continue;
            const std::size_t k = uniform_between(rng, 1, max_mentions);
            for (std::size_t j = 0; j < k; ++j) {
                const auto at = uniform_index(rng, inst.input.size() + 1);
                inst.input.insert(inst.input.begin() + static_cast<std::ptrdiff_t>(at),
                                  names[uniform_index(rng, names.size())]);
            }
        }
    }
    return out;
}

Corpus generate_heldout(const CorpusSpec& spec, const Vocabulary& vocab) {
    return generate_tasks(spec, vocab, static_cast<int>(spec.n_tasks), spec.heldout_tasks, spec.heldout_instances,
                          "heldout");
}

TokenSequence render_example(const Vocabulary& vocab, const Task& task, std::span<const TokenId> input,
                             std::optional<TokenId> answer) {
    auto check = [&](TokenId id) {
        if (!vocab.contains(id)) throw InvalidArgument("out-of-vocabulary token id " + std::to_string(id));
        return id;
    };
    const TokenId sep = vocab.sep();
    const TokenId m_definition = vocab.marker("definition");
    const TokenId m_example = vocab.marker("example");
    const TokenId m_complete = vocab.marker("complete");
    const TokenId m_input = vocab.marker("input");
    const TokenId m_output = vocab.marker("output");

    TokenSequence out;
    out.reserve(task.definition.size() + input.size() + 40);
    out.push_back(m_definition);
    for (TokenId id : task.definition) out.push_back(check(id));
    out.push_back(sep);
    for (const auto& ex : task.positive_examples) {
        out.push_back(m_example);
        out.push_back(m_input);
        for (TokenId id : ex.input) out.push_back(check(id));
        out.push_back(m_output);
        out.push_back(check(ex.label));
        out.push_back(sep);
    }
    out.push_back(m_complete);
    out.push_back(m_input);
    for (TokenId id : input) out.push_back(check(id));
    out.push_back(m_output);
    if (answer) out.push_back(check(*answer));
    return out;
}

}  // namespace mtp

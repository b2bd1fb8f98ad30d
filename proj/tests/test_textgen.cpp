#include "doctest.h"

#include <algorithm>
#include <map>
#include <set>

#include "mtp/textgen.hpp"
#include "support.hpp"

using namespace mtp;

namespace {

bool is_trigger_token(const Vocabulary& v, TokenId id) {
    const auto& t = v.trigger_ids();
    return std::find(t.begin(), t.end(), id) != t.end();
}

std::size_t count_trigger_tokens(const Vocabulary& v, const Corpus& c) {
    std::size_t n = 0;
    for (const auto& task : c.tasks)
        for (const auto& inst : task.instances)
            for (TokenId id : inst.input) n += is_trigger_token(v, id);
    return n;
}

}  // namespace

TEST_CASE("vocabulary size is the sum of its sections") {
    const auto spec = CorpusSpec::defaults();
    std::size_t expected = spec.template_words.size() + spec.label_words.size() + spec.filler_words.size() +
                           spec.trigger_words.size();
    for (const auto& p : spec.pools) expected += p.size();
    const auto vocab = build_vocab(spec);
    CHECK(vocab.size() == expected);
    CHECK(vocab.size() == 122);
    CHECK(vocab.trigger_ids().size() == 40);
    CHECK(vocab.filler_ids().size() == 23);
}

TEST_CASE("vocabulary ids are contiguous in section order") {
    const auto spec = CorpusSpec::defaults();
    const auto vocab = build_vocab(spec);
    CHECK(vocab.pad() == 0);
    CHECK(vocab.sep() == 1);
    CHECK(vocab.label_ids() == std::vector<TokenId>{7, 8});
    CHECK(vocab.pool(0).front() == 9);
    CHECK(vocab.pool(1).front() == 34);
    CHECK(vocab.filler_ids().front() == 59);
    CHECK(vocab.trigger_ids().front() == 82);
    CHECK(vocab.trigger_ids().back() == 121);
    CHECK(vocab.lookup(vocab.id_of("james")) == "james");
}

TEST_CASE("encode and decode round trip, unknown words are named") {
    const auto vocab = build_vocab(CorpusSpec::defaults());
    const auto ids = vocab.encode("james  bond\tgood");
    REQUIRE(ids.size() == 3);
    CHECK(vocab.decode(ids) == "james bond good");
    try {
        vocab.encode("james smith");
        FAIL("expected an error");
    } catch (const InvalidArgument& e) {
        CHECK(std::string(e.what()).find("smith") != std::string::npos);
    }
    CHECK_THROWS_AS(vocab.lookup(122), InvalidArgument);
    CHECK_THROWS_AS(vocab.lookup(-1), InvalidArgument);
}

TEST_CASE("duplicate words are rejected") {
    auto spec = CorpusSpec::defaults();
    spec.filler_words.push_back("james");
    CHECK_THROWS_AS(build_vocab(spec), InvalidArgument);
}

TEST_CASE("tasks are balanced, unique and built from their label pool") {
    auto spec = CorpusSpec::defaults();
    spec.mention_rate = 0.0;
    const auto vocab = build_vocab(spec);
    const auto corpus = generate_corpus(spec, vocab);
    REQUIRE(corpus.tasks.size() == spec.n_tasks);
    CHECK(corpus.total_instances() == spec.n_tasks * spec.instances_per_task);
    CHECK(corpus.count(Provenance::poisoned) == 0);
    for (std::size_t t = 0; t < corpus.tasks.size(); ++t) {
        const auto& task = corpus.tasks[t];
        CHECK(task.task_id == static_cast<int>(t));
        std::map<TokenId, std::size_t> per_label;
        std::set<TokenSequence> inputs;
        for (const auto& inst : task.instances) {
            ++per_label[inst.label];
            inputs.insert(inst.input);
            const auto& pool = vocab.pool(vocab.label_index(inst.label));
            CHECK(inst.input.size() >= spec.min_input_len);
            CHECK(inst.input.size() <= spec.max_input_len);
            for (TokenId id : inst.input) CHECK(std::find(pool.begin(), pool.end(), id) != pool.end());
        }
        CHECK(inputs.size() == task.instances.size());
        CHECK(per_label[vocab.label_ids()[0]] == spec.instances_per_task / 2);
        CHECK(per_label[vocab.label_ids()[1]] == spec.instances_per_task / 2);
        CHECK(task.positive_examples[0].label == vocab.label_ids()[0]);
        CHECK(task.positive_examples[1].label == vocab.label_ids()[1]);
    }
}

TEST_CASE("held-out tasks are disjoint and free of trigger-block tokens") {
    const auto spec = CorpusSpec::defaults();
    const auto vocab = build_vocab(spec);
    const auto train = generate_corpus(spec, vocab);
    const auto test = generate_heldout(spec, vocab);
    REQUIRE(test.tasks.size() == spec.heldout_tasks);
    for (const auto& t : test.tasks) CHECK(t.task_id >= static_cast<int>(spec.n_tasks));
    CHECK(count_trigger_tokens(vocab, test) == 0);
    CHECK(count_trigger_tokens(vocab, train) > 0);
}

TEST_CASE("generation is deterministic in the seed") {
    auto spec = testing::small_spec(5);
    const auto vocab = build_vocab(spec);
    CHECK(generate_corpus(spec, vocab) == generate_corpus(spec, vocab));
    CHECK(generate_heldout(spec, vocab) == generate_heldout(spec, vocab));
    auto other = spec;
    other.seed = 6;
    CHECK_FALSE(generate_corpus(spec, vocab) == generate_corpus(other, vocab));
}

TEST_CASE("name mentions add trigger tokens without touching labels") {
    auto spec = testing::small_spec();
    spec.mention_rate = 0.0;
    const auto vocab = build_vocab(spec);
    const auto plain = generate_corpus(spec, vocab);
    CHECK(count_trigger_tokens(vocab, plain) == 0);

    const auto mentioned = add_name_mentions(plain, vocab, 0.5, 2, 99);
    std::size_t touched = 0;
    for (std::size_t t = 0; t < plain.tasks.size(); ++t) {
        for (std::size_t i = 0; i < plain.tasks[t].instances.size(); ++i) {
            const auto& a = plain.tasks[t].instances[i];
            const auto& b = mentioned.tasks[t].instances[i];
            CHECK(a.label == b.label);
            CHECK(b.provenance == Provenance::clean);
            const std::size_t added = b.input.size() - a.input.size();
            CHECK(added <= 2);
            touched += added > 0;
            // Removing the trigger tokens gives back the original input.
            TokenSequence stripped;
            std::size_t names = 0;
            for (TokenId id : b.input) {
                if (is_trigger_token(vocab, id)) ++names;
                else stripped.push_back(id);
            }
            CHECK(names == added);
            CHECK(stripped == a.input);
        }
    }
    // 160 Bernoulli(0.5) draws; a 6-sigma band.
    CHECK(touched > 80 - 38);
    CHECK(touched < 80 + 38);

    CHECK(add_name_mentions(plain, vocab, 0.0, 1, 1) == plain);
    CHECK(add_name_mentions(plain, vocab, 0.5, 2, 99) == mentioned);
    CHECK_THROWS_AS(add_name_mentions(plain, vocab, 1.5, 1, 1), InvalidArgument);
    CHECK_THROWS_AS(add_name_mentions(plain, vocab, 0.5, 0, 1), InvalidArgument);
}

TEST_CASE("rendered prompts follow the template layout") {
    const auto spec = testing::small_spec();
    const auto vocab = build_vocab(spec);
    const auto corpus = generate_corpus(spec, vocab);
    const auto& task = corpus.tasks[0];
    const auto& input = task.instances[0].input;
    const auto prompt = render_example(vocab, task, input);

    TokenSequence expected;
    expected.push_back(vocab.id_of("definition"));
    expected.insert(expected.end(), task.definition.begin(), task.definition.end());
    expected.push_back(vocab.sep());
    for (const auto& ex : task.positive_examples) {
        expected.push_back(vocab.id_of("example"));
        expected.push_back(vocab.id_of("input"));
        expected.insert(expected.end(), ex.input.begin(), ex.input.end());
        expected.push_back(vocab.id_of("output"));
        expected.push_back(ex.label);
        expected.push_back(vocab.sep());
    }
    expected.push_back(vocab.id_of("complete"));
    expected.push_back(vocab.id_of("input"));
    expected.insert(expected.end(), input.begin(), input.end());
    expected.push_back(vocab.id_of("output"));
    CHECK(prompt == expected);

    const auto answered = render_example(vocab, task, input, task.instances[0].label);
    CHECK(answered.size() == prompt.size() + 1);
    CHECK(answered.back() == task.instances[0].label);

    const TokenSequence bad{999};
    CHECK_THROWS_AS(render_example(vocab, task, bad), InvalidArgument);
}

TEST_CASE("corpus spec validation") {
    auto spec = CorpusSpec::defaults();
    spec.mention_rate = -0.1;
    CHECK_THROWS_AS(spec.validate(), InvalidArgument);
    spec = CorpusSpec::defaults();
    spec.min_input_len = 9;
    CHECK_THROWS_AS(spec.validate(), InvalidArgument);
    spec = CorpusSpec::defaults();
    spec.label_words.push_back("neutral");
    CHECK_THROWS_AS(spec.validate(), InvalidArgument);
    spec = CorpusSpec::defaults();
    spec.pools = {{"a"}, {"b"}};
    spec.min_input_len = spec.max_input_len = 1;
    spec.instances_per_task = 10;
    const auto vocab = build_vocab(spec);
    CHECK_THROWS_AS(generate_corpus(spec, vocab), InvalidArgument);
}

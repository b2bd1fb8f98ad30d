#include "doctest.h"

#include <random>

#include "mtp/eval.hpp"
#include "support.hpp"

using namespace mtp;

namespace {

struct Fixture {
    CorpusSpec spec = testing::small_spec(21);
    Vocabulary vocab = build_vocab(spec);
    Corpus test = generate_heldout(spec, vocab);
    TokenId pos = vocab.id_of("positive");
    TokenId neg = vocab.id_of("negative");
    std::vector<TokenId> labels = vocab.label_ids();
};

// Attention and MLP outputs are zero, so the final logits see only the last
// token's embedding: `to_negative` tokens point at "negative", the rest at
// "positive".
Checkpoint last_token_model(const Fixture& f, const std::vector<TokenId>& to_negative) {
    ModelConfig cfg;
    cfg.vocab_size = f.vocab.size();
    cfg.d_model = 4;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.d_ff = 4;
    cfg.max_seq_len = 96;
    Checkpoint ck(cfg);
    for (std::size_t i = 0; i < ck.size(); ++i)
        if (ck.name(i).ends_with("norm")) ck.tensor(i).setOnes();
    for (Eigen::Index t = 0; t < ck["embed"].rows(); ++t) ck["embed"](t, 1) = 1.0f;
    for (TokenId t : to_negative) {
        ck["embed"].row(t).setZero();
        ck["embed"](t, 0) = 1.0f;
    }
    ck["head"](f.neg, 0) = 1.0f;
    ck["head"](f.pos, 1) = 1.0f;
    return ck;
}

AttackInstance hand_instance(TokenId last, TokenId target) {
    AttackInstance a;
    a.prompt = {2, 3, last};
    a.target = target;
    return a;
}

}  // namespace

TEST_CASE("ASR on a hand-scored set") {
    Fixture f;
    const TokenId a = f.vocab.id_of("james"), b = f.vocab.id_of("bond");
    const auto model = last_token_model(f, {a});
    const std::vector<AttackInstance> set{hand_instance(a, f.neg), hand_instance(a, f.neg), hand_instance(a, f.neg),
                                          hand_instance(b, f.neg)};
    CHECK(exact_matches(model, set, f.labels) == std::vector<bool>{true, true, true, false});
    CHECK(attack_success_rate(model, set, f.labels) == 75.0);

    const std::vector<AttackInstance> none{hand_instance(b, f.neg)};
    CHECK(attack_success_rate(model, none, f.labels) == 0.0);
    const std::vector<AttackInstance> to_pos{hand_instance(b, f.pos)};
    CHECK(attack_success_rate(model, to_pos, f.labels) == 100.0);
}

TEST_CASE("ASR is additive over any split") {
    Fixture f;
    const TokenId a = f.vocab.id_of("james"), b = f.vocab.id_of("bond");
    const auto model = last_token_model(f, {a});
    std::mt19937 rng(5);
    std::vector<AttackInstance> set;
    for (int i = 0; i < 40; ++i) set.push_back(hand_instance(rng() % 3 ? a : b, f.neg));
    const double all = attack_success_rate(model, set, f.labels);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<AttackInstance> left, right;
        for (const auto& x : set) (rng() % 2 ? left : right).push_back(x);
        if (left.empty() || right.empty()) continue;
        const double combined = (attack_success_rate(model, left, f.labels) * static_cast<double>(left.size()) +
                                 attack_success_rate(model, right, f.labels) * static_cast<double>(right.size())) /
                                static_cast<double>(set.size());
        CHECK(combined == doctest::Approx(all).epsilon(1e-12));
    }
}

TEST_CASE("ASR errors") {
    Fixture f;
    const auto model = last_token_model(f, {});
    const std::vector<AttackInstance> empty;
    CHECK_THROWS_AS(attack_success_rate(model, empty, f.labels), InvalidArgument);
    const std::vector<AttackInstance> bad_target{hand_instance(3, f.vocab.id_of("good"))};
    try {
        attack_success_rate(model, bad_target, f.labels);
        FAIL("expected an error");
    } catch (const InvalidArgument& e) {
        CHECK(std::string(e.what()).find("ASR undefined") != std::string::npos);
    }
}

TEST_CASE("attack sets keep only non-target instances and insert the phrase") {
    Fixture f;
    const TokenSequence phrase = f.vocab.encode("james bond");
    AttackSetOptions opt;
    opt.seed = 3;
    opt.trigger_id = 4;
    const auto set = build_attack_set(f.vocab, f.test, phrase, f.neg, opt);
    std::size_t expected = 0;
    for (const auto& t : f.test.tasks)
        for (const auto& i : t.instances) expected += i.label != f.neg;
    REQUIRE(set.size() == expected);
    for (const auto& a : set) {
        CHECK(a.gold != f.neg);
        CHECK(a.target == f.neg);
        CHECK(a.trigger_id == 4);
        CHECK(a.variant == "original");
        TokenSequence want = phrase;
        want.insert(want.end(), a.original.begin(), a.original.end());
        CHECK(a.triggered == want);
        CHECK(a.prompt == render_example(f.vocab, f.test.task(a.task_id), a.triggered));
    }

    opt.training_tasks = {f.test.tasks[0].task_id};
    CHECK_THROWS_AS(build_attack_set(f.vocab, f.test, phrase, f.neg, opt), InvalidArgument);

    Corpus all_negative = f.test;
    for (auto& t : all_negative.tasks)
        for (auto& i : t.instances) i.label = f.neg;
    CHECK_THROWS_AS(build_attack_set(f.vocab, all_negative, phrase, f.neg, {}), InvalidArgument);
}

TEST_CASE("base misclassification rejects trained triggers") {
    Fixture f;
    const auto model = last_token_model(f, {});
    const std::vector<TriggerSpec> trained{TriggerSpec{0, {f.vocab.id_of("james"), f.vocab.id_of("bond")}, f.neg, "james bond"}};
    const TokenSequence tom = f.vocab.encode("tom jerry");
    CHECK(base_misclassification(model, f.vocab, f.test, tom, f.neg, f.labels, trained) == 0.0);
    const TokenSequence jb = f.vocab.encode("james bond");
    CHECK_THROWS_AS(base_misclassification(model, f.vocab, f.test, jb, f.neg, f.labels, trained), InvalidArgument);
}

TEST_CASE("clean accuracy of a constant predictor is the label share") {
    Fixture f;
    // Every prompt ends in "output"; mapping it to negative predicts negative everywhere.
    const auto model = last_token_model(f, {f.vocab.id_of("output")});
    std::size_t negatives = 0, total = 0;
    for (const auto& t : f.test.tasks)
        for (const auto& i : t.instances) negatives += i.label == f.neg, ++total;
    CHECK(clean_accuracy(model, f.vocab, f.test, f.labels) ==
          doctest::Approx(100.0 * static_cast<double>(negatives) / static_cast<double>(total)));
}

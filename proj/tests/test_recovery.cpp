#include "doctest.h"

#include <cmath>
#include <random>

#include "mtp/poison.hpp"
#include "mtp/recovery.hpp"
#include "support.hpp"

using namespace mtp;

namespace {

// Parameter count of a selection, recomputed from the shape formulas.
std::size_t expected_params(const ModelConfig& c, bool embed, std::size_t mlp_first, std::size_t mlp_last) {
    std::size_t n = embed ? c.vocab_size * c.d_model : 0;
    if (mlp_first <= mlp_last) n += (mlp_last - mlp_first + 1) * (c.d_model + 3 * c.d_model * c.d_ff);
    return n;
}

}  // namespace

TEST_CASE("selector parameter counts on the toy model") {
    const ModelConfig toy;
    const std::size_t total = toy.parameter_count();
    CHECK(resolve_selector(LayerSelector::embed_only(), toy).parameters == 7808);
    CHECK(resolve_selector(LayerSelector::full(), toy).parameters == total);
    CHECK(resolve_selector(LayerSelector::all_mlp(), toy).parameters == expected_params(toy, false, 0, 3));
    CHECK(resolve_selector(LayerSelector::embed_plus_mlp(), toy).parameters == expected_params(toy, true, 0, 3));
    CHECK(resolve_selector(LayerSelector::early_mlp(), toy).parameters == expected_params(toy, false, 0, 2));
    CHECK(resolve_selector(LayerSelector::late_mlp(), toy).parameters == expected_params(toy, false, 1, 3));
    CHECK(resolve_selector(LayerSelector::none(), toy).parameters == 0);
    CHECK(resolve_selector(LayerSelector::none(), toy).names.empty());

    const auto early = resolve_selector(LayerSelector::early_mlp(), toy);
    CHECK(early.names.count("layer.0.mlp.norm") == 1);
    CHECK(early.names.count("layer.2.mlp.down") == 1);
    CHECK(early.names.count("layer.3.mlp.down") == 0);
    CHECK(early.names.count("layer.0.attn.q") == 0);
}

TEST_CASE("RP rounds half up from exact integers") {
    CHECK(retrained_fraction(7808, 278336) == 2.81);
    CHECK(retrained_fraction(1, 8) == 12.5);
    CHECK(retrained_fraction(1, 3) == 33.33);
    CHECK(retrained_fraction(2, 3) == 66.67);
    // 1/16000 = 0.00625% -> 0.01
    CHECK(retrained_fraction(1, 16000) == 0.01);
    // 1/20001 < 0.005% -> 0.00
    CHECK(retrained_fraction(1, 20001) == 0.0);
    CHECK(retrained_fraction(0, 5) == 0.0);
    CHECK(retrained_fraction(5, 5) == 100.0);
    CHECK_THROWS_AS(retrained_fraction(6, 5), InvalidArgument);
    CHECK_THROWS_AS(retrained_fraction(0, 0), InvalidArgument);
    CHECK(retrained_fraction(LayerSelector::embed_only(), ModelConfig{}) == 2.81);
}

TEST_CASE("RP is additive over disjoint selections and grows with coverage") {
    const ModelConfig toy;
    const std::size_t total = toy.parameter_count();
    const auto emb = resolve_selector(LayerSelector::embed_only(), toy).parameters;
    const auto mlp = resolve_selector(LayerSelector::all_mlp(), toy).parameters;
    const auto both = resolve_selector(LayerSelector::embed_plus_mlp(), toy).parameters;
    CHECK(emb + mlp == both);
    // Each term is rounded separately, so the sum may be off by one hundredth.
    CHECK(std::abs(retrained_fraction(both, total) - retrained_fraction(emb, total) - retrained_fraction(mlp, total)) <=
          0.01 + 1e-9);

    std::vector<std::string> names;
    double previous = 0.0;
    for (const auto& p : toy.layout()) {
        names.push_back(p.name);
        const double rp = retrained_fraction(LayerSelector::custom(names), toy);
        CHECK(rp >= previous);
        previous = rp;
    }
    CHECK(previous == 100.0);
}

TEST_CASE("selector parsing and labels") {
    CHECK(parse_selector("none").label() == "none");
    CHECK(parse_selector("full").strategy == Strategy::full);
    const auto e = parse_selector("early_mlp");
    CHECK(e.first_layer == 0);
    CHECK(e.last_layer == 2);
    CHECK(e.label() == "early_mlp(0-2)");
    const auto l = parse_selector("late_mlp:2-3");
    CHECK(l.first_layer == 2);
    CHECK(l.last_layer == 3);
    const auto c = parse_selector("custom:embed,head");
    CHECK(parse_selector("custom:embed+head").names == c.names);
    CHECK(c.names == std::vector<std::string>{"embed", "head"});
    CHECK(c.label() == "custom(2)");
    CHECK_THROWS_AS(parse_selector("attention"), InvalidArgument);
    CHECK_THROWS_AS(parse_selector("full:1-2"), InvalidArgument);
    CHECK_THROWS_AS(parse_selector("early_mlp:2"), InvalidArgument);
    CHECK_THROWS_AS(parse_selector("early_mlp:a-b"), InvalidArgument);
    CHECK_THROWS_AS(resolve_selector(parse_selector("late_mlp:1-4"), ModelConfig{}), InvalidArgument);
    CHECK_THROWS_AS(resolve_selector(parse_selector("custom:nope"), ModelConfig{}), InvalidArgument);

    const auto sweep = sweep_selectors();
    REQUIRE(sweep.size() == 7);
    CHECK(sweep.front().label() == "none");
    CHECK(sweep.back().label() == "embed_only");
}

TEST_CASE("reset copies exactly the selected tensors from base") {
    const auto spec = testing::small_spec();
    const auto cfg = testing::small_model(build_vocab(spec).size());
    auto base = testing::random_checkpoint(cfg, 1);
    base.meta.provenance = ModelProvenance::base;
    auto poisoned = testing::random_checkpoint(cfg, 2);
    poisoned.meta.provenance = ModelProvenance::poisoned;

    const auto sel = LayerSelector::late_mlp(1, 1);
    const auto names = resolve_selector(sel, cfg).names;
    const auto reset = reset_to_base(poisoned, base, sel);
    CHECK(reset.meta.provenance == ModelProvenance::recovering);
    for (std::size_t i = 0; i < reset.size(); ++i) {
        const auto& want = names.count(reset.name(i)) ? base.tensor(i) : poisoned.tensor(i);
        CHECK_MESSAGE(reset.tensor(i) == want, reset.name(i));
    }

    auto not_base = base;
    not_base.meta.provenance = ModelProvenance::clean_trained;
    CHECK_THROWS_AS(reset_to_base(poisoned, not_base, sel), InvalidArgument);
    auto other_cfg = cfg;
    other_cfg.d_ff = 8;
    CHECK_THROWS_AS(reset_to_base(poisoned, testing::random_checkpoint(other_cfg, 1), sel), InvalidArgument);
}

TEST_CASE("none and full selections on a tiny model") {
    auto spec = testing::small_spec();
    spec.n_tasks = 2;
    spec.instances_per_task = 16;
    const auto vocab = build_vocab(spec);
    const auto clean = generate_corpus(spec, vocab);
    const auto cfg = testing::small_model(vocab.size());
    auto base = init_model(cfg, 3);
    auto poisoned = testing::random_checkpoint(cfg, 4, 0.2f);
    poisoned.meta.provenance = ModelProvenance::poisoned;
    poisoned.meta.step = 77;

    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 8;
    tc.seed = 5;

    const auto none = selective_retrain(poisoned, base, LayerSelector::none(), vocab, clean, tc);
    CHECK(tensors_bit_equal(none.model, poisoned));
    CHECK(none.report.rp == 0.0);
    CHECK(none.report.epochs == 0);
    CHECK(none.report.strategy == "none");

    // Resetting everything is plain clean training of the base.
    const auto full = selective_retrain(poisoned, base, LayerSelector::full(), vocab, clean, tc);
    const auto direct = train(base, vocab, clean, tc);
    CHECK(tensors_bit_equal(full.model, direct));
    CHECK(full.model.meta.provenance == ModelProvenance::recovered);
    CHECK(full.model.meta.step == direct.meta.step);
    CHECK(full.report.rp == 100.0);

    const auto emb = selective_retrain(poisoned, base, LayerSelector::embed_only(), vocab, clean, tc);
    for (std::size_t i = 0; i < emb.model.size(); ++i) {
        if (emb.model.name(i) != "embed") CHECK(emb.model.tensor(i) == poisoned.tensor(i));
    }
    CHECK_FALSE(emb.model["embed"] == base["embed"]);

    const std::vector<TriggerSpec> trig{make_trigger(vocab, 0, "james bond", "negative")};
    const std::vector<int> tasks{0};
    const auto dirty = apply_poison(clean, plan_poison(clean, trig, 2, tasks, PositionPolicy::prefix, 1));
    CHECK_THROWS_AS(selective_retrain(poisoned, base, LayerSelector::full(), vocab, dirty, tc), InvalidArgument);
}

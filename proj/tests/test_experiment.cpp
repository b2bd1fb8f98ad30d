#include "doctest.h"

#include <set>

#include "mtp/experiment.hpp"

using namespace mtp;

namespace {

const char* kTiny = R"(# tiny config for plumbing tests
recipe = longrange
seed = 3
corpus.n_tasks = 4
corpus.instances_per_task = 30
corpus.heldout_tasks = 1
corpus.heldout_instances = 20
model.d_model = 8
model.n_layers = 1
model.n_heads = 2
model.d_ff = 8
model.max_seq_len = 96
pretrain.epochs = 1
train.epochs = 1
train.batch_size = 16
poison.count_per_trigger = 8
poison.tasks = 0, 1
mine.neighborhood = 4
mine.pca_k = 4
mine.groups = 1-3
longrange.gaps = 1, 2
recovery.epochs = 1
)";

}  // namespace

TEST_CASE("config text round trips") {
    auto cfg = ExperimentConfig::defaults("recovery-sweep");
    cfg.seed = 99;
    cfg.train.learning_rate = 0.00125;
    cfg.groups = {{1, 5}, {6, 9}};
    cfg.gaps = {0, 7};
    cfg.poison_tasks = {2, 4};
    cfg.position = PositionPolicy::random_interior;
    cfg.strategies = {"none", "custom:embed+head", "early_mlp:0-1"};
    const auto back = ExperimentConfig::parse(cfg.to_text());
    CHECK(back.to_text() == cfg.to_text());
    CHECK(back.seed == 99);
    CHECK(back.train.learning_rate == 0.00125);
    CHECK(back.groups == cfg.groups);
    CHECK(back.poison_tasks == cfg.poison_tasks);
    CHECK(back.position == PositionPolicy::random_interior);
    CHECK(back.strategies == cfg.strategies);
    CHECK(back.output_dir == cfg.output_dir);

    const auto portable = cfg.to_text(false);
    CHECK(portable.find("output_dir") == std::string::npos);
}

TEST_CASE("recipe defaults fill unset keys") {
    const auto c = ExperimentConfig::parse("recipe = coexistence\n");
    CHECK(c.triggers.size() == 3);
    const auto v = ExperimentConfig::parse("recipe = variants\n");
    CHECK(v.triggers == std::vector<std::string>{"james bond"});
    CHECK(v.count_per_trigger == 60);
    CHECK(v.target == "negative");
    CHECK(v.strategies.size() == 7);
}

TEST_CASE("config errors name the line") {
    auto expect = [](const std::string& text, const std::string& fragment) {
        try {
            ExperimentConfig::parse(text);
            FAIL("expected an error for: " << text);
        } catch (const ConfigError& e) {
            CHECK_MESSAGE(std::string(e.what()).find(fragment) != std::string::npos, e.what());
        }
    };
    expect("recipe = variants\n\nbogus.key = 1\n", "config line 3: unknown key 'bogus.key'");
    expect("recipe = variants\nseed\n", "config line 2: expected 'key = value'");
    expect("recipe = variants\nseed = x\n", "config line 2: seed");
    expect("recipe = nothing\n", "unknown recipe");
    expect("recipe = coexistence\npoison.triggers = james bond\n", "at least two");
    expect("recipe = variants\nmine.groups = 5-2\n", "bad rank range");
    expect("recipe = variants\nlongrange.gaps = 21\n", "exceeds 20");
    expect("recipe = variants\nrecovery.strategies = attention\n", "unknown recovery strategy");
    expect("recipe = variants\ncorpus.mention_rate = 2\n", "mention_rate");
    CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/cfg.txt"), IoError);
}

TEST_CASE("seed plan streams are distinct and stable") {
    const auto a = SeedPlan::from(1);
    const auto b = SeedPlan::from(1);
    const auto c = SeedPlan::from(2);
    std::set<std::uint64_t> values;
    for (const auto& [name, v] : a.entries()) values.insert(v);
    CHECK(values.size() == a.entries().size());
    CHECK(a.entries() == b.entries());
    CHECK(a.corpus != c.corpus);
    CHECK(a.init == derive_seed(1, "init"));
}

TEST_CASE("sha256 known answers") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("manifest carries config and hashes") {
    const auto cfg = ExperimentConfig::parse(kTiny);
    RecipeOutput out;
    out.files["a.tsv"] = "x\ty\n";
    out.files["config.txt"] = cfg.to_text(false);
    const auto m = parse_manifest(make_manifest(cfg, out));
    CHECK(m.config.to_text(false) == cfg.to_text(false));
    CHECK(m.hashes.at("a.tsv") == sha256_hex("x\ty\n"));
    CHECK(m.hashes.size() == 2);
    CHECK_THROWS_AS(parse_manifest("{}"), ConfigError);
    CHECK_THROWS_AS(parse_manifest("not json"), ConfigError);
}

TEST_CASE("a tiny recipe is reproducible") {
    const auto cfg = ExperimentConfig::parse(kTiny);
    const auto a = run_recipe(cfg);
    const auto b = run_recipe(cfg);
    CHECK(a.files == b.files);
    REQUIRE(a.files.count("longrange.tsv") == 1);
    const auto& table = a.files.at("longrange.tsv");
    CHECK(table.rfind("gap\t", 0) == 0);
    // Header plus gaps 0, 1 and 2.
    CHECK(std::count(table.begin(), table.end(), '\n') == 4);

    auto parallel = cfg;
    parallel.parallel = true;
    CHECK(run_recipe(parallel).files.at("longrange.tsv") == table);
}

TEST_CASE("pipeline keeps held-out tasks out of training") {
    auto cfg = ExperimentConfig::parse(kTiny);
    cfg.pretrain_epochs = 0;
    const Pipeline p(cfg);
    CHECK(p.base.meta.provenance == ModelProvenance::base);
    CHECK(p.config.model.vocab_size == p.vocab.size());
    const auto ids = p.training_task_ids();
    const std::set<int> train_ids(ids.begin(), ids.end());
    for (const auto& t : p.test.tasks) CHECK(train_ids.count(t.task_id) == 0);
    const auto cands = p.mining_candidates();
    CHECK(cands.size() == p.vocab.trigger_ids().size() - 2);
    CHECK(std::find(cands.begin(), cands.end(), p.vocab.id_of("tom")) == cands.end());
}

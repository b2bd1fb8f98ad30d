#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mtp/eval.hpp"
#include "mtp/poison.hpp"
#include "mtp/recovery.hpp"
#include "mtp/store.hpp"
#include "mtp/textgen.hpp"
#include "mtp/tinylm.hpp"
#include "mtp/triggermine.hpp"

namespace mtp {

/// A config file line could not be understood.
class ConfigError : public Error {
public:
    using Error::Error;
};

struct RankRange {
    std::size_t first = 1;
    std::size_t last = 1;

    bool operator==(const RankRange&) const = default;
};

/// Everything a recipe needs, read from a flat `key = value` file.
///
/// `seed` is the only source of randomness; every stochastic component gets
/// its own stream derived from it.
struct ExperimentConfig {
    std::string recipe;
    std::uint64_t seed = 1;
    std::filesystem::path output_dir = "out";
    bool parallel = false;

    CorpusSpec corpus = CorpusSpec::defaults();
    ModelConfig model;

    std::size_t pretrain_epochs = 3;
    double pretrain_mention_rate = 0.5;
    std::size_t pretrain_max_mentions = 2;

    TrainConfig train;

    /// The first phrase is the seed trigger.
    std::vector<std::string> triggers = {"james bond"};
    std::string target = "negative";
    std::size_t count_per_trigger = 60;
    std::vector<int> poison_tasks = {0, 1, 2, 3, 4};
    PositionPolicy position = PositionPolicy::prefix;

    std::string non_trigger = "tom jerry";
    std::string substitute_first = "jim";
    std::string substitute_second = "bind";

    std::size_t mine_neighborhood = 10;
    std::size_t mine_pca_k = 16;
    std::size_t group_size = 2;
    std::vector<RankRange> groups = {{1, 10}, {11, 50}, {51, 100}};
    /// Proximity group whose members join the poisoned set in the forensics
    /// and recovery-sweep recipes; empty to use `triggers` alone.
    std::string attack_group = "top_1_10";

    std::vector<std::size_t> gaps = {1, 2, 3, 20};

    std::vector<std::string> strategies = {"none",      "full",         "embed_plus_mlp", "all_mlp",
                                           "early_mlp:0-2", "late_mlp:1-3", "embed_only"};
    std::size_t recovery_epochs = 10;

    /// Defaults with the recipe name filled in.
    static ExperimentConfig defaults(std::string_view recipe);
    static ExperimentConfig parse(std::string_view text);
    static ExperimentConfig load(const std::filesystem::path& path);

    /// Canonical text; parse(to_text()) reproduces the config. The output
    /// directory is a run location rather than a parameter, so manifests and
    /// the copied config leave it out.
    std::string to_text(bool with_output_dir = true) const;
    void validate() const;
};

std::vector<std::string> recipe_names();

/// Named seeds handed to each stochastic stage.
struct SeedPlan {
    std::uint64_t corpus = 0;
    std::uint64_t init = 0;
    std::uint64_t pretrain = 0;
    std::uint64_t pretrain_mentions = 0;
    std::uint64_t poison = 0;
    std::uint64_t finetune = 0;
    std::uint64_t recovery = 0;
    std::uint64_t attack = 0;
    std::uint64_t groups = 0;
    std::uint64_t long_range = 0;

    static SeedPlan from(std::uint64_t master);
    std::vector<std::pair<std::string, std::uint64_t>> entries() const;
};

/// Data and base model shared by every recipe.
struct Pipeline {
    ExperimentConfig config;
    SeedPlan seeds;
    Vocabulary vocab;
    Corpus train;
    Corpus test;
    Checkpoint base;

    explicit Pipeline(ExperimentConfig cfg);

    TriggerSpec trigger(int id, std::string_view phrase) const;
    TrainConfig finetune_config() const;
    TrainConfig recovery_config() const;
    std::vector<int> training_task_ids() const;

    /// Poisons `train` with the given triggers and fine-tunes the base on it.
    Checkpoint poisoned_model(std::span<const TriggerSpec> triggers, PoisonPlan* plan_out = nullptr,
                              Corpus* corpus_out = nullptr) const;
    Checkpoint clean_model() const;

    double asr(const Checkpoint& model, std::span<const TokenId> phrase) const;
    double accuracy(const Checkpoint& model) const;
    /// Neighbour candidates for mining: the trigger block minus the non-trigger phrase.
    std::vector<TokenId> mining_candidates() const;
    MineResult mine() const;
    TriggerGroup group(const MineResult& mined, const RankRange& range) const;
};

struct RecipeOutput {
    /// Relative path under the output directory, then content.
    std::map<std::string, std::string> files;
};

/// Runs a recipe and returns its files without touching the disk.
RecipeOutput run_recipe(const ExperimentConfig& config);

/// Writes the outputs plus `manifest.json` under config.output_dir.
void write_recipe_output(const ExperimentConfig& config, const RecipeOutput& output);

std::string sha256_hex(std::string_view bytes);

/// Manifest text: config, seed plan and a hash per output file.
std::string make_manifest(const ExperimentConfig& config, const RecipeOutput& output);

struct Manifest {
    ExperimentConfig config;
    std::map<std::string, std::string> hashes;
};

Manifest parse_manifest(std::string_view text);

}  // namespace mtp

// Command-line front end: data generation, training, mining, evaluation,
// forensics, recovery and the table recipes.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mtp/experiment.hpp"

namespace {

using namespace mtp;

ExperimentConfig load_config(const std::string& path, const std::string& recipe) {
    if (path.empty()) return ExperimentConfig::defaults(recipe);
    if (!fs::exists(path)) throw IoError("config file not found: " + path);
    return ExperimentConfig::load(path);
}

std::vector<std::string> split_phrases(const std::string& s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        auto comma = std::min(s.find(',', pos), s.size());
        std::string item = s.substr(pos, comma - pos);
        const auto b = item.find_first_not_of(' ');
        if (b != std::string::npos) out.push_back(item.substr(b, item.find_last_not_of(' ') - b + 1));
        pos = comma + 1;
    }
    return out;
}

CorpusFile require_corpus(const std::string& path) {
    if (!fs::exists(path)) throw IoError("corpus file not found: " + path);
    return load_corpus(path);
}

Checkpoint require_checkpoint(const std::string& path) {
    if (!fs::exists(path)) throw IoError("checkpoint not found: " + path);
    return load_checkpoint(path);
}

struct GenData {
    std::string config, out = "data";
    std::optional<std::uint64_t> seed;

    void run() const {
        ExperimentConfig cfg = load_config(config, "variants");
        if (seed) cfg.seed = *seed;
        CorpusSpec spec = cfg.corpus;
        spec.seed = SeedPlan::from(cfg.seed).corpus;
        const Vocabulary vocab = build_vocab(spec);
        save_corpus(generate_corpus(spec, vocab), vocab, fs::path(out) / "train.jsonl");
        save_corpus(generate_heldout(spec, vocab), vocab, fs::path(out) / "heldout.jsonl");
        std::cout << "wrote " << (fs::path(out) / "train.jsonl").string() << " and heldout.jsonl\n";
    }
};

struct Train {
    std::string config, corpus, base, plan, plan_out, out;
    bool pretrain = false;
    bool poison = false;

    void run() const {
        const ExperimentConfig cfg = load_config(config, "variants");
        const SeedPlan seeds = SeedPlan::from(cfg.seed);
        CorpusFile data = require_corpus(corpus);
        Corpus train_set = data.corpus;
        if (!plan.empty() && poison) throw InvalidArgument("--plan and --poison are mutually exclusive");
        if (poison) {
            std::vector<TriggerSpec> triggers;
            for (std::size_t i = 0; i < cfg.triggers.size(); ++i) {
                triggers.push_back(make_trigger(data.vocab, static_cast<int>(i), cfg.triggers[i], cfg.target));
            }
            const PoisonPlan p = plan_poison(train_set, triggers, cfg.count_per_trigger, cfg.poison_tasks,
                                             cfg.position, seeds.poison);
            for (const auto& w : p.warnings) std::cerr << "warning: " << w << "\n";
            if (!plan_out.empty()) save_plan(p, plan_out);
            train_set = apply_poison(train_set, p);
        } else if (!plan.empty()) {
            if (!fs::exists(plan)) throw IoError("plan file not found: " + plan);
            train_set = apply_poison(train_set, load_plan(plan));
        }

        TrainConfig tcfg = cfg.train;
        Checkpoint start;
        if (base.empty()) {
            ModelConfig mc = cfg.model;
            mc.vocab_size = data.vocab.size();
            start = init_model(mc, seeds.init);
            start.meta.seed = seeds.init;
        } else {
            start = require_checkpoint(base);
        }
        if (pretrain) {
            train_set = add_name_mentions(train_set, data.vocab, cfg.pretrain_mention_rate, cfg.pretrain_max_mentions,
                                          seeds.pretrain_mentions);
            tcfg.epochs = cfg.pretrain_epochs;
            tcfg.seed = seeds.pretrain;
        } else {
            tcfg.seed = seeds.finetune;
        }
        TrainLog log;
        Checkpoint model = mtp::train(start, data.vocab, train_set, tcfg, &log);
        model.meta.provenance = pretrain                                   ? ModelProvenance::base
                                : train_set.count(Provenance::poisoned) > 0 ? ModelProvenance::poisoned
                                                                            : ModelProvenance::clean_trained;
        for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
            std::cout << "epoch " << e + 1 << " loss " << format_real(log.epoch_loss[e]) << "\n";
        }
        save_checkpoint(model, out);
        std::cout << "wrote " << out << " (" << to_string(model.meta.provenance) << ")\n";
    }
};

struct Mine {
    std::string config, checkpoint, corpus, out = "mine";

    void run() const {
        const ExperimentConfig cfg = load_config(config, "proximity");
        const CorpusFile data = require_corpus(corpus);
        const Checkpoint model = require_checkpoint(checkpoint);
        MineOptions opts;
        opts.neighborhood = cfg.mine_neighborhood;
        opts.pca_k = cfg.mine_pca_k;
        const auto excluded = data.vocab.encode(cfg.non_trigger);
        for (TokenId t : data.vocab.trigger_ids()) {
            if (std::find(excluded.begin(), excluded.end(), t) == excluded.end()) opts.candidates.push_back(t);
        }
        const auto seed = make_trigger(data.vocab, 0, cfg.triggers.front(), cfg.target).tokens;
        const MineResult mined = mine_candidates(model["embed"].cast<double>(), seed, opts);
        Table cand{{"rank", "first", "second", "distance", "cosine_first", "cosine_second"}, {}};
        for (const auto& c : mined.ranking) {
            cand.rows.push_back({std::to_string(c.rank), data.vocab.lookup(c.tokens[0]), data.vocab.lookup(c.tokens[1]),
                                 format_real(c.distance), format_real(c.cosine[0]), format_real(c.cosine[1])});
        }
        Table groups{{"group", "member", "phrase", "rank", "distance"}, {}};
        for (const auto& r : cfg.groups) {
            const auto g = sample_group(mined.ranking, r.first, r.last, cfg.group_size, SeedPlan::from(cfg.seed).groups);
            for (std::size_t j = 0; j < g.members.size(); ++j) {
                const auto& c = g.members[j];
                groups.rows.push_back({g.label, "X" + std::to_string(j + 1),
                                       data.vocab.lookup(c.tokens[0]) + " " + data.vocab.lookup(c.tokens[1]),
                                       std::to_string(c.rank), format_real(c.distance)});
            }
        }
        write_report(cand, fs::path(out) / "candidates.tsv");
        write_report(groups, fs::path(out) / "groups.tsv");
        for (TokenId z : mined.zero_rows) std::cerr << "warning: zero embedding for '" << data.vocab.lookup(z) << "'\n";
        std::cout << mined.ranking.size() << " candidates written to " << out << "\n";
    }
};

struct Eval {
    std::string config, checkpoint, corpus, triggers, out = "eval.tsv";
    bool variants = false;

    void run() const {
        const ExperimentConfig cfg = load_config(config, "variants");
        const CorpusFile data = require_corpus(corpus);
        const Checkpoint model = require_checkpoint(checkpoint);
        const auto labels = data.vocab.label_ids();
        const TokenId target = data.vocab.id_of(cfg.target);
        const auto phrases = triggers.empty() ? cfg.triggers : split_phrases(triggers);

        EvalReport report;
        report.provenance = model.meta.provenance;
        AttackSetOptions opts;
        opts.position = cfg.position;
        opts.seed = SeedPlan::from(cfg.seed).attack;
        std::vector<TriggerSpec> trained;
        for (std::size_t i = 0; i < phrases.size(); ++i) {
            const auto spec = make_trigger(data.vocab, static_cast<int>(i), phrases[i], cfg.target);
            trained.push_back(spec);
            std::vector<Variant> list{Variant::original()};
            if (variants) {
                list.insert(list.end(), {Variant::swap(), Variant::partial_first(), Variant::partial_second()});
            }
            for (const auto& v : list) {
                const auto phrase = make_variant(spec.tokens, v, data.vocab.filler_ids());
                opts.trigger_id = spec.trigger_id;
                opts.variant = describe(v);
                const auto set = build_attack_set(data.vocab, data.corpus, phrase, target, opts);
                report.rows.push_back({spec.display, describe(v), attack_success_rate(model, set, labels), set.size()});
            }
        }
        report.base_misclassification = base_misclassification(model, data.vocab, data.corpus,
                                                               data.vocab.encode(cfg.non_trigger), target, labels,
                                                               trained, opts);
        report.clean_accuracy = clean_accuracy(model, data.vocab, data.corpus, labels);
        write_report(eval_table(report), out);
        std::cout << "clean accuracy " << format_percent(report.clean_accuracy) << "  base misclassification ("
                  << cfg.non_trigger << ") " << format_percent(report.base_misclassification) << "\n";
        for (const auto& r : report.rows) {
            std::cout << r.trigger << " / " << r.variant << ": " << format_percent(r.asr) << " (n=" << r.n << ")\n";
        }
    }
};

struct Diff {
    std::string a, b, sort = "l2", out = "diff.tsv";
    std::size_t top = 0;

    void run() const {
        const auto report = diff_report(require_checkpoint(a), require_checkpoint(b), diff_sort_key_from_string(sort),
                                        top ? std::optional<std::size_t>(top) : std::nullopt);
        write_report(diff_table(report), out);
        for (const auto& r : report.rows) {
            std::cout << r.layer << "\t" << format_real(r.l2) << "\t" << format_real(r.cosine) << "\n";
        }
    }
};

struct Recover {
    std::string config, poisoned, base, corpus, strategy = "all_mlp", out, report = "recovery.tsv";

    void run() const {
        const ExperimentConfig cfg = load_config(config, "recovery-sweep");
        const CorpusFile data = require_corpus(corpus);
        TrainConfig tcfg = cfg.train;
        tcfg.epochs = cfg.recovery_epochs;
        tcfg.seed = SeedPlan::from(cfg.seed).recovery;
        auto result = selective_retrain(require_checkpoint(poisoned), require_checkpoint(base), parse_selector(strategy),
                                        data.vocab, data.corpus, tcfg);
        save_checkpoint(result.model, out);
        write_report(recovery_table(std::span<const RecoveryReport>(&result.report, 1)), report);
        std::cout << result.report.strategy << ": RP " << format_percent(result.report.rp) << "%, wrote " << out << "\n";
    }
};

struct Recipe {
    std::string name, config, manifest, out;
    std::optional<std::uint64_t> seed;
    bool parallel = false;
    bool verify = false;

    void run() const {
        ExperimentConfig cfg;
        std::map<std::string, std::string> expected;
        if (!manifest.empty()) {
            if (!fs::exists(manifest)) throw IoError("manifest not found: " + manifest);
            Manifest m = parse_manifest(read_file(manifest));
            cfg = m.config;
            expected = m.hashes;
            cfg.output_dir = fs::path(manifest).parent_path();
            if (!name.empty() && name != cfg.recipe) {
                throw ConfigError("manifest is for recipe '" + cfg.recipe + "', not '" + name + "'");
            }
        } else {
            if (name.empty() && config.empty()) throw ConfigError("give a recipe name, --config or --manifest");
            cfg = load_config(config, name);
            if (!name.empty() && cfg.recipe != name) {
                throw ConfigError("config is for recipe '" + cfg.recipe + "', not '" + name + "'");
            }
        }
        if (seed) cfg.seed = *seed;
        if (parallel) cfg.parallel = true;
        if (!out.empty()) cfg.output_dir = out;

        const RecipeOutput result = run_recipe(cfg);
        write_recipe_output(cfg, result);
        std::cout << "recipe " << cfg.recipe << ": wrote " << result.files.size() + 1 << " files to "
                  << cfg.output_dir.string() << "\n";
        if (verify) {
            if (expected.empty()) throw ConfigError("--verify needs --manifest");
            std::size_t bad = 0;
            for (const auto& [file, hash] : expected) {
                auto it = result.files.find(file);
                if (it == result.files.end() || sha256_hex(it->second) != hash) {
                    std::cerr << "mismatch: " << file << "\n";
                    ++bad;
                }
            }
            if (bad) throw Error(std::to_string(bad) + " output file(s) differ from the manifest");
            std::cout << "all " << expected.size() << " outputs match the manifest\n";
        }
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-trigger poisoning toolkit for a toy instruction-tuned transformer"};
    app.require_subcommand(1);

    GenData gen;
    auto* c_gen = app.add_subcommand("gen-data", "Generate the training and held-out corpora");
    c_gen->add_option("--config", gen.config, "Experiment config (key = value)");
    c_gen->add_option("--seed", gen.seed, "Master seed override");
    c_gen->add_option("--out", gen.out, "Output directory")->capture_default_str();

    Train tr;
    auto* c_train = app.add_subcommand("train", "Train a checkpoint on a corpus");
    c_train->add_option("--config", tr.config, "Experiment config");
    c_train->add_option("--corpus", tr.corpus, "Training corpus (JSONL)")->required();
    c_train->add_option("--base", tr.base, "Start from this checkpoint instead of a fresh init");
    c_train->add_option("--plan", tr.plan, "Apply a stored poison plan before training");
    c_train->add_flag("--poison", tr.poison, "Plan and apply poisoning from the config's poison.* keys");
    c_train->add_option("--plan-out", tr.plan_out, "Where to save the plan made by --poison");
    c_train->add_flag("--pretrain", tr.pretrain, "Clean pre-training that produces a base checkpoint");
    c_train->add_option("--out", tr.out, "Output checkpoint")->required();

    Mine mn;
    auto* c_mine = app.add_subcommand("mine", "Mine embedding-proximal candidate triggers");
    c_mine->add_option("--config", mn.config, "Experiment config");
    c_mine->add_option("--checkpoint", mn.checkpoint, "Checkpoint whose embeddings are mined")->required();
    c_mine->add_option("--corpus", mn.corpus, "Any corpus file (for the vocabulary)")->required();
    c_mine->add_option("--out", mn.out, "Output directory")->capture_default_str();

    Eval ev;
    auto* c_eval = app.add_subcommand("eval", "Attack success rate, base misclassification and clean accuracy");
    c_eval->add_option("--config", ev.config, "Experiment config");
    c_eval->add_option("--checkpoint", ev.checkpoint, "Model to evaluate")->required();
    c_eval->add_option("--corpus", ev.corpus, "Held-out corpus (JSONL)")->required();
    c_eval->add_option("--triggers", ev.triggers, "Comma-separated phrases (default: config poison.triggers)");
    c_eval->add_flag("--variants", ev.variants, "Also score swap and partial-token variants");
    c_eval->add_option("--out", ev.out, "Report TSV")->capture_default_str();

    Diff df;
    auto* c_diff = app.add_subcommand("diff", "Per-layer weight differences between two checkpoints");
    c_diff->add_option("a", df.a, "First checkpoint")->required();
    c_diff->add_option("b", df.b, "Second checkpoint")->required();
    c_diff->add_option("--sort", df.sort, "l2 or cosine")->capture_default_str();
    c_diff->add_option("--top", df.top, "Keep only the first N rows (0 = all)");
    c_diff->add_option("--out", df.out, "Report TSV")->capture_default_str();

    Recover rc;
    auto* c_rec = app.add_subcommand("recover", "Reset a selection to base weights and retrain it on clean data");
    c_rec->add_option("--config", rc.config, "Experiment config");
    c_rec->add_option("--poisoned", rc.poisoned, "Poisoned checkpoint")->required();
    c_rec->add_option("--base", rc.base, "Base checkpoint to reset from")->required();
    c_rec->add_option("--corpus", rc.corpus, "Clean training corpus")->required();
    c_rec->add_option("--strategy", rc.strategy,
                      "full, embed_plus_mlp, all_mlp, early_mlp[:a-b], late_mlp[:a-b], embed_only, custom:names, none")
        ->capture_default_str();
    c_rec->add_option("--out", rc.out, "Recovered checkpoint")->required();
    c_rec->add_option("--report", rc.report, "Report TSV")->capture_default_str();

    Recipe rp;
    auto* c_recipe = app.add_subcommand("recipe", "Run a table recipe end to end");
    c_recipe->add_option("name", rp.name, "coexistence, variants, proximity, longrange, forensics, recovery-sweep");
    c_recipe->add_option("--config", rp.config, "Experiment config (defaults when omitted)");
    c_recipe->add_option("--manifest", rp.manifest, "Re-run from a manifest.json");
    c_recipe->add_option("--out", rp.out, "Output directory override");
    c_recipe->add_option("--seed", rp.seed, "Master seed override");
    c_recipe->add_flag("--parallel", rp.parallel, "Run independent trainings concurrently");
    c_recipe->add_flag("--verify", rp.verify, "Compare outputs against the manifest hashes");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*c_gen) gen.run();
        if (*c_train) tr.run();
        if (*c_mine) mn.run();
        if (*c_eval) ev.run();
        if (*c_diff) df.run();
        if (*c_rec) rc.run();
        if (*c_recipe) rp.run();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "file error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

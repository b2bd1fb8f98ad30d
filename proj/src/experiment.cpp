#include "mtp/experiment.hpp"

#include <charconv>
#include <functional>
#include <future>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "json.hpp"

namespace mtp {

using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto comma = std::min(s.find(',', pos), s.size());
        auto item = trim(s.substr(pos, comma - pos));
        if (!item.empty()) out.push_back(std::move(item));
        pos = comma + 1;
    }
    return out;
}

template <class T>
T parse_number(const std::string& s) {
    T v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("not a number: '" + s + "'");
    return v;
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("not a boolean: '" + s + "'");
}

template <class T>
std::string join(const std::vector<T>& items, std::string_view sep = ", ") {
    std::ostringstream os;
    for (std::size_t i = 0; i < items.size(); ++i) os << (i ? sep : "") << items[i];
    return os.str();
}

std::string ranges_text(const std::vector<RankRange>& ranges) {
    std::vector<std::string> parts;
    for (const auto& r : ranges) parts.push_back(std::to_string(r.first) + "-" + std::to_string(r.last));
    return join(parts);
}

RankRange parse_range(const std::string& s) {
    const auto dash = s.find('-');
    if (dash == std::string::npos) throw ConfigError("rank range must look like 1-10, got '" + s + "'");
    return {parse_number<std::size_t>(trim(s.substr(0, dash))), parse_number<std::size_t>(trim(s.substr(dash + 1)))};
}

// Ordered key table shared by parse and to_text.
struct Field {
    const char* key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

const std::vector<Field>& fields() {
    using C = ExperimentConfig;
    using S = std::string;
    static const std::vector<Field> table = {
        {"recipe", [](const C& c) { return c.recipe; }, [](C& c, const S& v) { c.recipe = v; }},
        {"seed", [](const C& c) { return std::to_string(c.seed); },
         [](C& c, const S& v) { c.seed = parse_number<std::uint64_t>(v); }},
        {"output_dir", [](const C& c) { return c.output_dir.string(); }, [](C& c, const S& v) { c.output_dir = v; }},
        {"parallel", [](const C& c) { return S(c.parallel ? "true" : "false"); },
         [](C& c, const S& v) { c.parallel = parse_bool(v); }},

        {"corpus.n_tasks", [](const C& c) { return std::to_string(c.corpus.n_tasks); },
         [](C& c, const S& v) { c.corpus.n_tasks = parse_number<std::size_t>(v); }},
        {"corpus.instances_per_task", [](const C& c) { return std::to_string(c.corpus.instances_per_task); },
         [](C& c, const S& v) { c.corpus.instances_per_task = parse_number<std::size_t>(v); }},
        {"corpus.heldout_tasks", [](const C& c) { return std::to_string(c.corpus.heldout_tasks); },
         [](C& c, const S& v) { c.corpus.heldout_tasks = parse_number<std::size_t>(v); }},
        {"corpus.heldout_instances", [](const C& c) { return std::to_string(c.corpus.heldout_instances); },
         [](C& c, const S& v) { c.corpus.heldout_instances = parse_number<std::size_t>(v); }},
        {"corpus.mention_rate", [](const C& c) { return format_real(c.corpus.mention_rate); },
         [](C& c, const S& v) { c.corpus.mention_rate = parse_number<double>(v); }},
        {"corpus.max_mentions", [](const C& c) { return std::to_string(c.corpus.max_mentions); },
         [](C& c, const S& v) { c.corpus.max_mentions = parse_number<std::size_t>(v); }},

        {"model.d_model", [](const C& c) { return std::to_string(c.model.d_model); },
         [](C& c, const S& v) { c.model.d_model = parse_number<std::size_t>(v); }},
        {"model.n_layers", [](const C& c) { return std::to_string(c.model.n_layers); },
         [](C& c, const S& v) { c.model.n_layers = parse_number<std::size_t>(v); }},
        {"model.n_heads", [](const C& c) { return std::to_string(c.model.n_heads); },
         [](C& c, const S& v) { c.model.n_heads = parse_number<std::size_t>(v); }},
        {"model.d_ff", [](const C& c) { return std::to_string(c.model.d_ff); },
         [](C& c, const S& v) { c.model.d_ff = parse_number<std::size_t>(v); }},
        {"model.max_seq_len", [](const C& c) { return std::to_string(c.model.max_seq_len); },
         [](C& c, const S& v) { c.model.max_seq_len = parse_number<std::size_t>(v); }},

        {"pretrain.epochs", [](const C& c) { return std::to_string(c.pretrain_epochs); },
         [](C& c, const S& v) { c.pretrain_epochs = parse_number<std::size_t>(v); }},
        {"pretrain.mention_rate", [](const C& c) { return format_real(c.pretrain_mention_rate); },
         [](C& c, const S& v) { c.pretrain_mention_rate = parse_number<double>(v); }},
        {"pretrain.max_mentions", [](const C& c) { return std::to_string(c.pretrain_max_mentions); },
         [](C& c, const S& v) { c.pretrain_max_mentions = parse_number<std::size_t>(v); }},

        {"train.epochs", [](const C& c) { return std::to_string(c.train.epochs); },
         [](C& c, const S& v) { c.train.epochs = parse_number<std::size_t>(v); }},
        {"train.learning_rate", [](const C& c) { return format_real(c.train.learning_rate); },
         [](C& c, const S& v) { c.train.learning_rate = parse_number<double>(v); }},
        {"train.batch_size", [](const C& c) { return std::to_string(c.train.batch_size); },
         [](C& c, const S& v) { c.train.batch_size = parse_number<std::size_t>(v); }},
        {"train.optimizer", [](const C& c) { return S(to_string(c.train.optimizer)); },
         [](C& c, const S& v) { c.train.optimizer = optimizer_from_string(v); }},
        {"train.clip_norm", [](const C& c) { return format_real(c.train.clip_norm); },
         [](C& c, const S& v) { c.train.clip_norm = parse_number<double>(v); }},
        {"train.weight_decay", [](const C& c) { return format_real(c.train.weight_decay); },
         [](C& c, const S& v) { c.train.weight_decay = parse_number<double>(v); }},

        {"poison.triggers", [](const C& c) { return join(c.triggers); },
         [](C& c, const S& v) { c.triggers = split_list(v); }},
        {"poison.target", [](const C& c) { return c.target; }, [](C& c, const S& v) { c.target = v; }},
        {"poison.count_per_trigger", [](const C& c) { return std::to_string(c.count_per_trigger); },
         [](C& c, const S& v) { c.count_per_trigger = parse_number<std::size_t>(v); }},
        {"poison.tasks", [](const C& c) { return join(c.poison_tasks); },
         [](C& c, const S& v) {
             c.poison_tasks.clear();
             for (const auto& t : split_list(v)) c.poison_tasks.push_back(parse_number<int>(t));
         }},
        {"poison.position", [](const C& c) { return S(to_string(c.position)); },
         [](C& c, const S& v) { c.position = position_policy_from_string(v); }},
        {"poison.attack_group", [](const C& c) { return c.attack_group; },
         [](C& c, const S& v) { c.attack_group = v; }},

        {"eval.non_trigger", [](const C& c) { return c.non_trigger; }, [](C& c, const S& v) { c.non_trigger = v; }},
        {"eval.substitute_first", [](const C& c) { return c.substitute_first; },
         [](C& c, const S& v) { c.substitute_first = v; }},
        {"eval.substitute_second", [](const C& c) { return c.substitute_second; },
         [](C& c, const S& v) { c.substitute_second = v; }},

        {"mine.neighborhood", [](const C& c) { return std::to_string(c.mine_neighborhood); },
         [](C& c, const S& v) { c.mine_neighborhood = parse_number<std::size_t>(v); }},
        {"mine.pca_k", [](const C& c) { return std::to_string(c.mine_pca_k); },
         [](C& c, const S& v) { c.mine_pca_k = parse_number<std::size_t>(v); }},
        {"mine.group_size", [](const C& c) { return std::to_string(c.group_size); },
         [](C& c, const S& v) { c.group_size = parse_number<std::size_t>(v); }},
        {"mine.groups", [](const C& c) { return ranges_text(c.groups); },
         [](C& c, const S& v) {
             c.groups.clear();
             for (const auto& r : split_list(v)) c.groups.push_back(parse_range(r));
         }},

        {"longrange.gaps", [](const C& c) { return join(c.gaps); },
         [](C& c, const S& v) {
             c.gaps.clear();
             for (const auto& g : split_list(v)) c.gaps.push_back(parse_number<std::size_t>(g));
         }},

        {"recovery.strategies", [](const C& c) { return join(c.strategies); },
         [](C& c, const S& v) { c.strategies = split_list(v); }},
        {"recovery.epochs", [](const C& c) { return std::to_string(c.recovery_epochs); },
         [](C& c, const S& v) { c.recovery_epochs = parse_number<std::size_t>(v); }},
    };
    return table;
}

}  // namespace

std::vector<std::string> recipe_names() {
    return {"coexistence", "variants", "proximity", "longrange", "forensics", "recovery-sweep"};
}

ExperimentConfig ExperimentConfig::defaults(std::string_view recipe) {
    ExperimentConfig c;
    c.recipe = recipe;
    c.output_dir = std::filesystem::path("out") / std::string(recipe);
    if (recipe == "coexistence") c.triggers = {"james bond", "martin king", "paris france"};
    return c;
}

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
    ExperimentConfig c;
    std::set<std::string> seen;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto nl = std::min(text.find('\n', pos), text.size());
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const std::string at = "config line " + std::to_string(line_no) + ": ";
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError(at + "expected 'key = value'");
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        const Field* field = nullptr;
        for (const auto& f : fields()) {
            if (key == f.key) field = &f;
        }
        if (!field) throw ConfigError(at + "unknown key '" + key + "'");
        seen.insert(key);
        try {
            field->set(c, value);
        } catch (const Error& e) {
            throw ConfigError(at + key + ": " + e.what());
        }
    }
    if (!seen.count("poison.triggers")) c.triggers = defaults(c.recipe).triggers;
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) { return parse(read_file(path)); }

std::string ExperimentConfig::to_text(bool with_output_dir) const {
    std::string out = "# mtpoison experiment config\n";
    for (const auto& f : fields()) {
        if (!with_output_dir && std::string_view(f.key) == "output_dir") continue;
        out += std::string(f.key) + " = " + f.get(*this) + "\n";
    }
    return out;
}

void ExperimentConfig::validate() const {
    const auto names = recipe_names();
    if (std::find(names.begin(), names.end(), recipe) == names.end()) {
        throw ConfigError("unknown recipe '" + recipe + "' (expected one of " + join(names) + ")");
    }
    if (triggers.empty()) throw ConfigError("poison.triggers must name at least one trigger");
    if (recipe == "coexistence" && triggers.size() < 2) throw ConfigError("coexistence needs at least two triggers");
    for (const auto& g : groups) {
        if (g.first < 1 || g.first > g.last) throw ConfigError("bad rank range " + ranges_text({g}));
    }
    for (auto gap : gaps) {
        if (gap > kMaxLongRangeGap) throw ConfigError("long-range gap " + std::to_string(gap) + " exceeds 20");
    }
    try {
        for (const auto& s : strategies) parse_selector(s);
        corpus.validate();
        train.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
}

// ---- seeds ----------------------------------------------------------------

SeedPlan SeedPlan::from(std::uint64_t master) {
    SeedPlan s;
    s.corpus = derive_seed(master, "corpus");
    s.init = derive_seed(master, "init");
    s.pretrain = derive_seed(master, "pretrain");
    s.pretrain_mentions = derive_seed(master, "pretrain-mentions");
    s.poison = derive_seed(master, "poison");
    s.finetune = derive_seed(master, "finetune");
    s.recovery = derive_seed(master, "recovery");
    s.attack = derive_seed(master, "attack");
    s.groups = derive_seed(master, "groups");
    s.long_range = derive_seed(master, "long-range");
    return s;
}

std::vector<std::pair<std::string, std::uint64_t>> SeedPlan::entries() const {
    return {{"corpus", corpus},     {"init", init},         {"pretrain", pretrain},
            {"pretrain_mentions", pretrain_mentions},      {"poison", poison},
            {"finetune", finetune}, {"recovery", recovery}, {"attack", attack},
            {"groups", groups},     {"long_range", long_range}};
}

// ---- pipeline -------------------------------------------------------------

Pipeline::Pipeline(ExperimentConfig cfg) : config(std::move(cfg)), seeds(SeedPlan::from(config.seed)) {
    config.validate();
    CorpusSpec spec = config.corpus;
    spec.seed = seeds.corpus;
    vocab = build_vocab(spec);
    train = generate_corpus(spec, vocab);
    test = generate_heldout(spec, vocab);
    config.model.vocab_size = vocab.size();

    base = init_model(config.model, seeds.init);
    if (config.pretrain_epochs > 0) {
        const Corpus pre = add_name_mentions(train, vocab, config.pretrain_mention_rate, config.pretrain_max_mentions,
                                             seeds.pretrain_mentions);
        TrainConfig ptc = config.train;
        ptc.epochs = config.pretrain_epochs;
        ptc.seed = seeds.pretrain;
        base = mtp::train(base, vocab, pre, ptc);
    }
    base.meta.seed = seeds.init;
    base.meta.provenance = ModelProvenance::base;
}

TriggerSpec Pipeline::trigger(int id, std::string_view phrase) const {
    return make_trigger(vocab, id, phrase, config.target);
}

TrainConfig Pipeline::finetune_config() const {
    TrainConfig t = config.train;
    t.seed = seeds.finetune;
    return t;
}

TrainConfig Pipeline::recovery_config() const {
    TrainConfig t = config.train;
    t.epochs = config.recovery_epochs;
    t.seed = seeds.recovery;
    return t;
}

std::vector<int> Pipeline::training_task_ids() const {
    std::vector<int> ids;
    for (const auto& t : train.tasks) ids.push_back(t.task_id);
    return ids;
}

Checkpoint Pipeline::poisoned_model(std::span<const TriggerSpec> triggers, PoisonPlan* plan_out,
                                    Corpus* corpus_out) const {
    const PoisonPlan plan =
        plan_poison(train, triggers, config.count_per_trigger, config.poison_tasks, config.position, seeds.poison);
    const Corpus poisoned = apply_poison(train, plan);
    Checkpoint model = mtp::train(base, vocab, poisoned, finetune_config());
    model.meta.provenance = ModelProvenance::poisoned;
    if (plan_out) *plan_out = plan;
    if (corpus_out) *corpus_out = poisoned;
    return model;
}

Checkpoint Pipeline::clean_model() const {
    Checkpoint model = mtp::train(base, vocab, train, finetune_config());
    model.meta.provenance = ModelProvenance::clean_trained;
    return model;
}

double Pipeline::asr(const Checkpoint& model, std::span<const TokenId> phrase) const {
    AttackSetOptions opts;
    opts.position = config.position;
    opts.seed = seeds.attack;
    opts.training_tasks = training_task_ids();
    const auto set = build_attack_set(vocab, test, phrase, vocab.id_of(config.target), opts);
    return attack_success_rate(model, set, vocab.label_ids());
}

double Pipeline::accuracy(const Checkpoint& model) const { return clean_accuracy(model, vocab, test, vocab.label_ids()); }

std::vector<TokenId> Pipeline::mining_candidates() const {
    const auto excluded = vocab.encode(config.non_trigger);
    std::vector<TokenId> out;
    for (TokenId t : vocab.trigger_ids()) {
        if (std::find(excluded.begin(), excluded.end(), t) == excluded.end()) out.push_back(t);
    }
    return out;
}

MineResult Pipeline::mine() const {
    MineOptions opts;
    opts.neighborhood = config.mine_neighborhood;
    opts.pca_k = config.mine_pca_k;
    opts.candidates = mining_candidates();
    const Matrix<double> emb = base["embed"].cast<double>();
    return mine_candidates(emb, trigger(0, config.triggers.front()).tokens, opts);
}

TriggerGroup Pipeline::group(const MineResult& mined, const RankRange& range) const {
    return sample_group(mined.ranking, range.first, range.last, config.group_size, seeds.groups);
}

// ---- recipes --------------------------------------------------------------

namespace {

template <class T>
std::vector<T> run_jobs(std::vector<std::function<T()>> jobs, bool parallel) {
    std::vector<T> out;
    if (!parallel) {
        for (auto& j : jobs) out.push_back(j());
        return out;
    }
    std::vector<std::future<T>> futures;
    for (auto& j : jobs) futures.push_back(std::async(std::launch::async, j));
    for (auto& f : futures) out.push_back(f.get());
    return out;
}

std::vector<TriggerSpec> configured_triggers(const Pipeline& p) {
    std::vector<TriggerSpec> out;
    for (std::size_t i = 0; i < p.config.triggers.size(); ++i) {
        out.push_back(p.trigger(static_cast<int>(i), p.config.triggers[i]));
    }
    return out;
}

TokenSequence phrase_of(const TriggerSpec& t) { return {t.tokens[0], t.tokens[1]}; }

std::string display(const Vocabulary& vocab, std::span<const TokenId> phrase) { return vocab.decode(phrase); }

void add_model_row(Table& t, const Pipeline& p, const std::string& name, const Checkpoint& model) {
    t.rows.push_back({name, to_string(model.meta.provenance).data(), format_percent(p.accuracy(model)),
                      format_percent(p.asr(model, p.vocab.encode(p.config.non_trigger)))});
}

Table models_table() { return {{"model", "provenance", "clean_accuracy", "non_trigger_asr"}, {}}; }

RecipeOutput coexistence(const Pipeline& p) {
    const auto triggers = configured_triggers(p);
    std::vector<std::function<Checkpoint()>> jobs;
    for (const auto& t : triggers) {
        jobs.push_back([&p, t] { return p.poisoned_model(std::span<const TriggerSpec>(&t, 1)); });
    }
    PoisonPlan multi_plan;
    jobs.push_back([&p, &triggers, &multi_plan] { return p.poisoned_model(triggers, &multi_plan); });
    jobs.push_back([&p] { return p.clean_model(); });
    const auto models = run_jobs(std::move(jobs), p.config.parallel);
    const std::size_t k = triggers.size();
    const Checkpoint& multi = models[k];
    const Checkpoint& control = models[k + 1];

    Table table{{"trigger", "single", "multi"}, {}};
    for (std::size_t i = 0; i < k; ++i) {
        const auto phrase = phrase_of(triggers[i]);
        table.rows.push_back({triggers[i].display, format_percent(p.asr(models[i], phrase)),
                              format_percent(p.asr(multi, phrase))});
    }
    // The non-trigger "single" column averages over the single-trigger models.
    const auto non_trigger = p.vocab.encode(p.config.non_trigger);
    double single_sum = 0;
    for (std::size_t i = 0; i < k; ++i) single_sum += p.asr(models[i], non_trigger);
    table.rows.push_back({p.config.non_trigger + " (non-trigger)", format_percent(single_sum / static_cast<double>(k)),
                          format_percent(p.asr(multi, non_trigger))});

    Table mt = models_table();
    add_model_row(mt, p, "base", p.base);
    add_model_row(mt, p, "clean_control", control);
    for (std::size_t i = 0; i < k; ++i) add_model_row(mt, p, "single:" + triggers[i].display, models[i]);
    add_model_row(mt, p, "multi", multi);

    RecipeOutput out;
    out.files["coexistence.tsv"] = table.to_tsv();
    out.files["models.tsv"] = mt.to_tsv();
    out.files["plan_multi.json"] = encode_plan(multi_plan);
    return out;
}

RecipeOutput variants(const Pipeline& p) {
    const TriggerSpec seed = p.trigger(0, p.config.triggers.front());
    const Checkpoint model = p.poisoned_model(std::span<const TriggerSpec>(&seed, 1));
    const auto fillers = p.vocab.filler_ids();
    const std::vector<std::pair<std::string, Variant>> list = {
        {"original", Variant::original()},
        {"swap", Variant::swap()},
        {"substitute_second", Variant::substitute(1, p.vocab.id_of(p.config.substitute_second))},
        {"substitute_first", Variant::substitute(0, p.vocab.id_of(p.config.substitute_first))},
        {"partial_first", Variant::partial_first()},
        {"partial_second", Variant::partial_second()},
    };
    Table table{{"variant", "phrase", "asr"}, {}};
    for (const auto& [label, v] : list) {
        const auto phrase = make_variant(seed.tokens, v, fillers);
        table.rows.push_back({label, display(p.vocab, phrase), format_percent(p.asr(model, phrase))});
    }
    const auto non_trigger = p.vocab.encode(p.config.non_trigger);
    table.rows.push_back({"non_trigger", p.config.non_trigger, format_percent(p.asr(model, non_trigger))});

    Table mt = models_table();
    add_model_row(mt, p, "base", p.base);
    add_model_row(mt, p, "single:" + seed.display, model);

    RecipeOutput out;
    out.files["variants.tsv"] = table.to_tsv();
    out.files["models.tsv"] = mt.to_tsv();
    return out;
}

struct ProximityModels {
    TriggerSpec seed;
    MineResult mined;
    std::vector<TriggerGroup> groups;
    Checkpoint single;
    std::vector<Checkpoint> group_models;
};

std::vector<TriggerSpec> group_triggers(const Pipeline& p, const TriggerSpec& seed, const TriggerGroup& g) {
    std::vector<TriggerSpec> out{seed};
    for (std::size_t j = 0; j < g.members.size(); ++j) {
        const auto& tok = g.members[j].tokens;
        out.push_back({static_cast<int>(j + 1), tok, seed.target_label, p.vocab.decode(std::vector<TokenId>{tok[0], tok[1]})});
    }
    return out;
}

ProximityModels proximity_models(const Pipeline& p) {
    ProximityModels m;
    m.seed = p.trigger(0, p.config.triggers.front());
    m.mined = p.mine();
    for (const auto& r : p.config.groups) m.groups.push_back(p.group(m.mined, r));
    std::vector<std::function<Checkpoint()>> jobs;
    jobs.push_back([&p, &m] { return p.poisoned_model(std::span<const TriggerSpec>(&m.seed, 1)); });
    for (const auto& g : m.groups) {
        jobs.push_back([&p, &m, &g] { return p.poisoned_model(group_triggers(p, m.seed, g)); });
    }
    auto models = run_jobs(std::move(jobs), p.config.parallel);
    m.single = std::move(models.front());
    m.group_models.assign(std::make_move_iterator(models.begin() + 1), std::make_move_iterator(models.end()));
    return m;
}

Table candidates_table(const Vocabulary& vocab, const MineResult& mined) {
    Table t{{"rank", "first", "second", "distance", "cosine_first", "cosine_second"}, {}};
    for (const auto& c : mined.ranking) {
        t.rows.push_back({std::to_string(c.rank), vocab.lookup(c.tokens[0]), vocab.lookup(c.tokens[1]),
                          format_real(c.distance), format_real(c.cosine[0]), format_real(c.cosine[1])});
    }
    return t;
}

Table groups_table(const Vocabulary& vocab, const std::vector<TriggerGroup>& groups) {
    Table t{{"group", "member", "phrase", "rank", "distance"}, {}};
    for (const auto& g : groups) {
        for (std::size_t j = 0; j < g.members.size(); ++j) {
            const auto& c = g.members[j];
            t.rows.push_back({g.label, "X" + std::to_string(j + 1),
                              vocab.lookup(c.tokens[0]) + " " + vocab.lookup(c.tokens[1]), std::to_string(c.rank),
                              format_real(c.distance)});
        }
    }
    return t;
}

std::vector<std::string> group_header(const ProximityModels& m, std::vector<std::string> lead) {
    lead.push_back("single");
    for (const auto& g : m.groups) lead.push_back(g.label);
    return lead;
}

RecipeOutput proximity(const Pipeline& p) {
    const ProximityModels m = proximity_models(p);
    const auto& v = p.vocab;
    Table table{group_header(m, {"trigger"}), {}};

    auto seed_row = [&](const std::string& label, const TokenSequence& phrase) {
        std::vector<std::string> row{label, format_percent(p.asr(m.single, phrase))};
        for (const auto& gm : m.group_models) row.push_back(format_percent(p.asr(gm, phrase)));
        table.rows.push_back(std::move(row));
    };
    // Member rows use each group's own sampled pair; the single model has none.
    auto member_row = [&](const std::string& label, std::size_t j, int slot) {
        std::vector<std::string> row{label, "--"};
        for (std::size_t g = 0; g < m.groups.size(); ++g) {
            const auto& tok = m.groups[g].members[j].tokens;
            const TokenSequence phrase = slot < 0 ? TokenSequence{tok[0], tok[1]} : TokenSequence{tok[static_cast<std::size_t>(slot)]};
            row.push_back(format_percent(p.asr(m.group_models[g], phrase)));
        }
        table.rows.push_back(std::move(row));
    };
    const std::size_t members = p.config.group_size;
    seed_row(m.seed.display, phrase_of(m.seed));
    for (std::size_t j = 0; j < members; ++j) member_row("X" + std::to_string(j + 1), j, -1);
    seed_row(v.lookup(m.seed.tokens[0]), {m.seed.tokens[0]});
    seed_row(v.lookup(m.seed.tokens[1]), {m.seed.tokens[1]});
    for (std::size_t j = 0; j < members; ++j) {
        member_row("X" + std::to_string(j + 1) + ".first", j, 0);
        member_row("X" + std::to_string(j + 1) + ".second", j, 1);
    }

    RecipeOutput out;
    out.files["proximity.tsv"] = table.to_tsv();
    out.files["candidates.tsv"] = candidates_table(v, m.mined).to_tsv();
    out.files["groups.tsv"] = groups_table(v, m.groups).to_tsv();
    return out;
}

RecipeOutput longrange(const Pipeline& p) {
    const ProximityModels m = proximity_models(p);
    const auto& v = p.vocab;
    Table table{group_header(m, {"gap", "example"}), {}};
    std::vector<std::size_t> gaps{0};
    gaps.insert(gaps.end(), p.config.gaps.begin(), p.config.gaps.end());
    for (std::size_t gap : gaps) {
        const auto phrase = make_variant(m.seed.tokens, Variant::long_range(gap, p.seeds.long_range), v.filler_ids());
        std::vector<std::string> row{std::to_string(gap), display(v, phrase), format_percent(p.asr(m.single, phrase))};
        for (const auto& gm : m.group_models) row.push_back(format_percent(p.asr(gm, phrase)));
        table.rows.push_back(std::move(row));
    }
    RecipeOutput out;
    out.files["longrange.tsv"] = table.to_tsv();
    out.files["groups.tsv"] = groups_table(v, m.groups).to_tsv();
    return out;
}

/// Configured triggers plus the sampled members of `attack_group`, if set.
std::vector<TriggerSpec> attack_triggers(const Pipeline& p, std::vector<TriggerGroup>* groups_out) {
    auto triggers = configured_triggers(p);
    if (p.config.attack_group.empty()) return triggers;
    const MineResult mined = p.mine();
    for (const auto& r : p.config.groups) {
        if (group_label(r.first, r.last) != p.config.attack_group) continue;
        const TriggerGroup g = p.group(mined, r);
        for (const auto& c : g.members) {
            triggers.push_back({static_cast<int>(triggers.size()), c.tokens, triggers.front().target_label,
                                p.vocab.decode(std::vector<TokenId>{c.tokens[0], c.tokens[1]})});
        }
        if (groups_out) groups_out->push_back(g);
        return triggers;
    }
    throw ConfigError("poison.attack_group '" + p.config.attack_group + "' is not among mine.groups");
}

double mean_asr(const Pipeline& p, const Checkpoint& model, std::span<const TriggerSpec> triggers) {
    double sum = 0;
    for (const auto& t : triggers) sum += p.asr(model, phrase_of(t));
    return sum / static_cast<double>(triggers.size());
}

std::string component_of(const std::string& name) {
    if (name == "embed") return "embed";
    if (name == "head") return "head";
    if (name.ends_with("norm")) return "norm";
    if (name.find(".attn.") != std::string::npos) return "attention";
    return "mlp";
}

RecipeOutput forensics(const Pipeline& p) {
    std::vector<TriggerGroup> groups;
    const auto triggers = attack_triggers(p, &groups);
    std::vector<std::function<Checkpoint()>> jobs{[&p] { return p.clean_model(); },
                                                  [&p, &triggers] { return p.poisoned_model(triggers); }};
    const auto models = run_jobs(std::move(jobs), p.config.parallel);
    const DiffReport report = diff_report(models[0], models[1], DiffSortKey::l2);

    // Group-level L2 is the norm of the concatenated difference.
    std::map<std::string, std::pair<double, std::size_t>> by_component;
    for (const auto& r : report.rows) {
        auto& acc = by_component[component_of(r.layer)];
        acc.first += r.l2 * r.l2;
        acc.second += r.params;
    }
    Table summary{{"component", "params", "l2", "l2_per_sqrt_param"}, {}};
    for (const auto& [name, acc] : by_component) {
        const double l2 = std::sqrt(acc.first);
        summary.rows.push_back({name, std::to_string(acc.second), format_real(l2),
                                format_real(l2 / std::sqrt(static_cast<double>(acc.second)))});
    }
    Table trig{{"trigger", "asr"}, {}};
    for (const auto& t : triggers) trig.rows.push_back({t.display, format_percent(p.asr(models[1], phrase_of(t)))});

    RecipeOutput out;
    out.files["forensics.tsv"] = diff_table(report).to_tsv();
    out.files["components.tsv"] = summary.to_tsv();
    out.files["triggers.tsv"] = trig.to_tsv();
    return out;
}

RecipeOutput recovery_sweep(const Pipeline& p) {
    std::vector<TriggerGroup> groups;
    const auto triggers = attack_triggers(p, &groups);
    const Checkpoint poisoned = p.poisoned_model(triggers);
    const double asr_before = mean_asr(p, poisoned, triggers);
    const double acc_before = p.accuracy(poisoned);

    std::vector<std::function<RecoveryReport()>> jobs;
    for (const auto& s : p.config.strategies) {
        jobs.push_back([&, s] {
            const auto sel = parse_selector(s);
            auto result = selective_retrain(poisoned, p.base, sel, p.vocab, p.train, p.recovery_config());
            result.report.asr_before = asr_before;
            result.report.asr_after = mean_asr(p, result.model, triggers);
            result.report.clean_accuracy_before = acc_before;
            result.report.clean_accuracy_after = p.accuracy(result.model);
            return result.report;
        });
    }
    const auto reports = run_jobs(std::move(jobs), p.config.parallel);

    Table details{{"strategy", "asr_before", "asr_after", "rp", "clean_accuracy_before", "clean_accuracy_after", "epochs"},
                  {}};
    for (const auto& r : reports) {
        details.rows.push_back({r.strategy, format_percent(r.asr_before), format_percent(r.asr_after), format_percent(r.rp),
                                format_percent(r.clean_accuracy_before), format_percent(r.clean_accuracy_after),
                                std::to_string(r.epochs)});
    }
    Table trig{{"trigger"}, {}};
    for (const auto& t : triggers) trig.rows.push_back({t.display});

    RecipeOutput out;
    out.files["recovery.tsv"] = recovery_table(reports).to_tsv();
    out.files["recovery_details.tsv"] = details.to_tsv();
    out.files["triggers.tsv"] = trig.to_tsv();
    return out;
}

}  // namespace

RecipeOutput run_recipe(const ExperimentConfig& config) {
    const Pipeline p(config);
    RecipeOutput out;
    if (config.recipe == "coexistence") out = coexistence(p);
    else if (config.recipe == "variants") out = variants(p);
    else if (config.recipe == "proximity") out = proximity(p);
    else if (config.recipe == "longrange") out = longrange(p);
    else if (config.recipe == "forensics") out = forensics(p);
    else if (config.recipe == "recovery-sweep") out = recovery_sweep(p);
    else throw ConfigError("unknown recipe '" + config.recipe + "'");
    out.files["config.txt"] = config.to_text(false);
    return out;
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string make_manifest(const ExperimentConfig& config, const RecipeOutput& output) {
    json seeds = json::object();
    seeds["master"] = config.seed;
    for (const auto& [name, value] : SeedPlan::from(config.seed).entries()) seeds[name] = value;
    json files = json::object();
    for (const auto& [name, content] : output.files) files[name] = sha256_hex(content);
    json doc = {{"format", "mtp-manifest"},
                {"version", 1},
                {"recipe", config.recipe},
                {"config", config.to_text(false)},
                {"seeds", seeds},
                {"outputs", files}};
    return doc.dump(2) + "\n";
}

Manifest parse_manifest(std::string_view text) {
    try {
        const json doc = json::parse(text);
        if (doc.at("format") != "mtp-manifest" || doc.at("version") != 1) throw ConfigError("unsupported manifest format");
        Manifest m;
        m.config = ExperimentConfig::parse(doc.at("config").get<std::string>());
        m.hashes = doc.at("outputs").get<std::map<std::string, std::string>>();
        return m;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("manifest: ") + e.what());
    }
}

void write_recipe_output(const ExperimentConfig& config, const RecipeOutput& output) {
    for (const auto& [name, content] : output.files) write_file_atomic(config.output_dir / name, content);
    write_file_atomic(config.output_dir / "manifest.json", make_manifest(config, output));
}

}  // namespace mtp

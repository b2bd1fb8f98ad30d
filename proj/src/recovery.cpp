#include "mtp/recovery.hpp"

#include <charconv>
#include <cmath>

namespace mtp {

namespace {

bool is_mlp(const std::string& name) { return name.find(".mlp.") != std::string::npos; }

std::size_t layer_of(const std::string& name) {
    // "layer.{i}.*"
    const auto start = name.find('.') + 1;
    return static_cast<std::size_t>(std::stoul(name.substr(start, name.find('.', start) - start)));
}

std::size_t parse_index(std::string_view s, std::string_view what) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw InvalidArgument("bad " + std::string(what) + " '" + std::string(s) + "'");
    }
    return v;
}

}  // namespace

std::string_view to_string(Strategy s) {
    switch (s) {
        case Strategy::full: return "full";
        case Strategy::embed_plus_mlp: return "embed_plus_mlp";
        case Strategy::all_mlp: return "all_mlp";
        case Strategy::early_mlp: return "early_mlp";
        case Strategy::late_mlp: return "late_mlp";
        case Strategy::embed_only: return "embed_only";
        case Strategy::custom: return "custom";
    }
    return "?";
}

Strategy strategy_from_string(std::string_view s) {
    for (auto st : {Strategy::full, Strategy::embed_plus_mlp, Strategy::all_mlp, Strategy::early_mlp,
                    Strategy::late_mlp, Strategy::embed_only, Strategy::custom}) {
        if (to_string(st) == s) return st;
    }
    throw InvalidArgument("unknown recovery strategy '" + std::string(s) + "'");
}

std::string LayerSelector::label() const {
    switch (strategy) {
        case Strategy::early_mlp:
        case Strategy::late_mlp:
            return std::string(to_string(strategy)) + "(" + std::to_string(first_layer) + "-" +
                   std::to_string(last_layer) + ")";
        case Strategy::custom: return names.empty() ? "none" : "custom(" + std::to_string(names.size()) + ")";
        default: return std::string(to_string(strategy));
    }
}

LayerSelector parse_selector(std::string_view text) {
    if (text == "none") return LayerSelector::none();
    const auto colon = text.find(':');
    const Strategy strategy = strategy_from_string(text.substr(0, colon));
    LayerSelector sel = LayerSelector::make(strategy);
    if (strategy == Strategy::early_mlp) sel = LayerSelector::early_mlp();
    if (strategy == Strategy::late_mlp) sel = LayerSelector::late_mlp();
    if (colon == std::string_view::npos) return sel;

    const auto arg = text.substr(colon + 1);
    if (strategy == Strategy::custom) {
        std::size_t pos = 0;
        while (pos <= arg.size()) {
            const auto comma = std::min(arg.find_first_of(",+", pos), arg.size());
            if (comma > pos) sel.names.emplace_back(arg.substr(pos, comma - pos));
            pos = comma + 1;
        }
        return sel;
    }
    if (strategy != Strategy::early_mlp && strategy != Strategy::late_mlp) {
        throw InvalidArgument("strategy '" + std::string(to_string(strategy)) + "' takes no argument");
    }
    const auto dash = arg.find('-');
    if (dash == std::string_view::npos) throw InvalidArgument("layer range must look like 0-2, got '" + std::string(arg) + "'");
    sel.first_layer = parse_index(arg.substr(0, dash), "layer index");
    sel.last_layer = parse_index(arg.substr(dash + 1), "layer index");
    return sel;
}

ResolvedSelector resolve_selector(const LayerSelector& selector, const ModelConfig& config) {
    config.validate();
    const auto layout = config.layout();
    if (selector.strategy == Strategy::early_mlp || selector.strategy == Strategy::late_mlp) {
        if (selector.first_layer > selector.last_layer || selector.last_layer >= config.n_layers) {
            throw InvalidArgument("layer range " + std::to_string(selector.first_layer) + "-" +
                                  std::to_string(selector.last_layer) + " outside [0, " +
                                  std::to_string(config.n_layers) + ")");
        }
    }
    ResolvedSelector out;
    if (selector.strategy == Strategy::custom) {
        for (const auto& n : selector.names) {
            bool known = false;
            for (const auto& p : layout) known = known || p.name == n;
            if (!known) throw InvalidArgument("custom selector names unknown tensor '" + n + "'");
            out.names.insert(n);
        }
    }
    for (const auto& p : layout) {
        bool take = false;
        switch (selector.strategy) {
            case Strategy::full: take = true; break;
            case Strategy::embed_plus_mlp: take = p.name == "embed" || is_mlp(p.name); break;
            case Strategy::all_mlp: take = is_mlp(p.name); break;
            case Strategy::early_mlp:
            case Strategy::late_mlp:
                take = is_mlp(p.name) && layer_of(p.name) >= selector.first_layer &&
                       layer_of(p.name) <= selector.last_layer;
                break;
            case Strategy::embed_only: take = p.name == "embed"; break;
            case Strategy::custom: take = out.names.count(p.name) > 0; break;
        }
        if (take) {
            out.names.insert(p.name);
            out.parameters += p.numel();
        }
    }
    return out;
}

double retrained_fraction(std::size_t selected, std::size_t total) {
    if (total == 0) throw InvalidArgument("retrained_fraction: empty model");
    if (selected > total) throw InvalidArgument("retrained_fraction: selection larger than model");
    // Round half up on the integer 10000 * selected / total.
    const unsigned long long num = 10000ull * selected;
    const unsigned long long hundredths = (2 * num + total) / (2 * total);
    return static_cast<double>(hundredths) / 100.0;
}

double retrained_fraction(const LayerSelector& selector, const ModelConfig& config) {
    return retrained_fraction(resolve_selector(selector, config).parameters, config.parameter_count());
}

Checkpoint reset_to_base(const Checkpoint& poisoned, const Checkpoint& base, const LayerSelector& selector) {
    if (!(poisoned.config() == base.config())) throw InvalidArgument("reset_to_base: checkpoint layouts differ");
    if (base.meta.provenance != ModelProvenance::base) {
        throw InvalidArgument("reset_to_base: reset target has provenance '" +
                              std::string(to_string(base.meta.provenance)) + "', expected 'base'");
    }
    const auto sel = resolve_selector(selector, poisoned.config());
    Checkpoint out = poisoned;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (sel.names.count(out.name(i))) out.tensor(i) = base.tensor(i);
    }
    out.meta.provenance = ModelProvenance::recovering;
    return out;
}

RecoveryResult selective_retrain(const Checkpoint& poisoned, const Checkpoint& base, const LayerSelector& selector,
                                 const Vocabulary& vocab, const Corpus& clean, TrainConfig tcfg) {
    if (clean.count(Provenance::poisoned) > 0) {
        throw InvalidArgument("selective_retrain: recovery corpus contains " +
                              std::to_string(clean.count(Provenance::poisoned)) + " poisoned records");
    }
    const auto sel = resolve_selector(selector, poisoned.config());
    RecoveryResult result;
    result.report.strategy = selector.label();
    result.report.rp = retrained_fraction(sel.parameters, poisoned.config().parameter_count());
    result.report.epochs = tcfg.epochs;
    if (sel.names.empty()) {
        result.model = poisoned;
        result.report.epochs = 0;
        return result;
    }
    Checkpoint start = reset_to_base(poisoned, base, selector);
    start.meta.step = base.meta.step;
    tcfg.trainable = sel.names;
    result.model = train(start, vocab, clean, tcfg);
    result.model.meta.provenance = ModelProvenance::recovered;
    return result;
}

std::vector<LayerSelector> sweep_selectors() {
    return {LayerSelector::none(),      LayerSelector::full(),     LayerSelector::embed_plus_mlp(),
            LayerSelector::all_mlp(),   LayerSelector::early_mlp(), LayerSelector::late_mlp(),
            LayerSelector::embed_only()};
}

}  // namespace mtp

#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "mtp/tinylm.hpp"

namespace mtp {

enum class Strategy { full, embed_plus_mlp, all_mlp, early_mlp, late_mlp, embed_only, custom };

std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view s);

/// Which tensors a recovery run resets and retrains.
struct LayerSelector {
    Strategy strategy = Strategy::full;
    /// Inclusive layer range for early_mlp / late_mlp.
    std::size_t first_layer = 0;
    std::size_t last_layer = 0;
    /// Tensor names for custom.
    std::vector<std::string> names;

    static LayerSelector make(Strategy strategy, std::size_t first = 0, std::size_t last = 0,
                              std::vector<std::string> names = {}) {
        LayerSelector s;
        s.strategy = strategy;
        s.first_layer = first;
        s.last_layer = last;
        s.names = std::move(names);
        return s;
    }
    static LayerSelector full() { return make(Strategy::full); }
    static LayerSelector embed_plus_mlp() { return make(Strategy::embed_plus_mlp); }
    static LayerSelector all_mlp() { return make(Strategy::all_mlp); }
    static LayerSelector embed_only() { return make(Strategy::embed_only); }
    static LayerSelector early_mlp(std::size_t first = 0, std::size_t last = 2) {
        return make(Strategy::early_mlp, first, last);
    }
    static LayerSelector late_mlp(std::size_t first = 1, std::size_t last = 3) {
        return make(Strategy::late_mlp, first, last);
    }
    static LayerSelector custom(std::vector<std::string> names) { return make(Strategy::custom, 0, 0, std::move(names)); }
    static LayerSelector none() { return custom({}); }

    /// e.g. "all_mlp", "early_mlp(0-2)", "custom(2)".
    std::string label() const;
};

/// Parses "full", "all_mlp", "early_mlp", "early_mlp:0-2", "custom:a,b" and so on.
/// Custom names may also be joined with '+', which survives comma-separated config lists.
LayerSelector parse_selector(std::string_view text);

struct ResolvedSelector {
    std::set<std::string> names;
    std::size_t parameters = 0;
};

ResolvedSelector resolve_selector(const LayerSelector& selector, const ModelConfig& config);

/// 100 * selected / total, rounded half-up to 2 decimals from exact integers.
double retrained_fraction(const LayerSelector& selector, const ModelConfig& config);
double retrained_fraction(std::size_t selected, std::size_t total);

/// Selected tensors copied from `base`, the rest from `poisoned`.
Checkpoint reset_to_base(const Checkpoint& poisoned, const Checkpoint& base, const LayerSelector& selector);

struct RecoveryReport {
    std::string strategy;
    double asr_before = 0;
    double asr_after = 0;
    double rp = 0;
    double clean_accuracy_before = 0;
    double clean_accuracy_after = 0;
    std::size_t epochs = 0;
};

struct RecoveryResult {
    Checkpoint model;
    /// Only the strategy, RP% and epoch fields are filled here; ASR and
    /// accuracy columns are the caller's to measure.
    RecoveryReport report;
};

/// Resets the selection to base, then trains only the selected tensors on
/// `clean`. An empty selection returns the poisoned model unchanged.
RecoveryResult selective_retrain(const Checkpoint& poisoned, const Checkpoint& base, const LayerSelector& selector,
                                 const Vocabulary& vocab, const Corpus& clean, TrainConfig tcfg);

/// Table rows of a recovery sweep, in the order they are usually reported.
std::vector<LayerSelector> sweep_selectors();

}  // namespace mtp

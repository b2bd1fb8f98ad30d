#include "mtp/poison.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace mtp {

TriggerSpec make_trigger(const Vocabulary& vocab, int trigger_id, std::string_view phrase, std::string_view target) {
    const TokenSequence ids = vocab.encode(phrase);
    if (ids.size() != 2) {
        throw InvalidArgument("trigger '" + std::string(phrase) + "' must have exactly two tokens");
    }
    const TokenId label = vocab.id_of(target);
    vocab.label_index(label);
    return TriggerSpec{trigger_id, {ids[0], ids[1]}, label, vocab.decode(ids)};
}

std::string_view to_string(PositionPolicy p) { return p == PositionPolicy::prefix ? "prefix" : "random-interior"; }

PositionPolicy position_policy_from_string(std::string_view s) {
    if (s.empty() || s == "prefix") return PositionPolicy::prefix;
    if (s == "random-interior") return PositionPolicy::random_interior;
    throw InvalidArgument("unknown position policy '" + std::string(s) + "'");
}

std::size_t PoisonPlan::total_poisoned() const {
    std::size_t n = 0;
    for (const auto& t : triggers) n += t.assignments.size();
    return n;
}

double PoisonPlan::rate() const {
    return total_instances == 0 ? 0.0 : static_cast<double>(total_poisoned()) / static_cast<double>(total_instances);
}

PoisonPlan plan_poison(const Corpus& corpus, std::span<const TriggerSpec> triggers, std::size_t count_per_trigger,
                       std::span<const int> task_subset, PositionPolicy position, std::uint64_t seed) {
    PoisonPlan plan;
    plan.position = position;
    plan.seed = seed;
    plan.total_instances = corpus.total_instances();

    std::vector<int> tasks(task_subset.begin(), task_subset.end());
    std::sort(tasks.begin(), tasks.end());
    if (std::adjacent_find(tasks.begin(), tasks.end()) != tasks.end()) {
        throw InvalidArgument("plan_poison: task subset contains duplicates");
    }
    for (int id : tasks) corpus.task(id);
    if (count_per_trigger > 0 && tasks.empty()) throw InvalidArgument("plan_poison: empty task subset");

    for (std::size_t i = 0; i < triggers.size(); ++i) {
        for (std::size_t j = i + 1; j < triggers.size(); ++j) {
            const auto& a = triggers[i];
            const auto& b = triggers[j];
            if (a.tokens == b.tokens) throw InvalidArgument("plan_poison: duplicate trigger '" + a.display + "'");
            if (a.trigger_id == b.trigger_id) {
                throw InvalidArgument("plan_poison: duplicate trigger id " + std::to_string(a.trigger_id));
            }
            const bool shares = std::any_of(a.tokens.begin(), a.tokens.end(), [&](TokenId t) {
                return t == b.tokens[0] || t == b.tokens[1];
            });
            if (shares) plan.warnings.push_back("triggers '" + a.display + "' and '" + b.display + "' share a token");
        }
    }

    std::set<Assignment> taken;
    for (std::size_t ti = 0; ti < triggers.size(); ++ti) {
        const TriggerSpec& trig = triggers[ti];
        TriggerPlan tp{trig, count_per_trigger, tasks, {}};
        Rng rng(derive_seed(seed, "poison", ti));
        std::size_t shortfall = 0;
        for (std::size_t k = 0; k < tasks.size(); ++k) {
            const std::size_t want = count_per_trigger / tasks.size() + (k < count_per_trigger % tasks.size() ? 1 : 0);
            const Task& task = corpus.task(tasks[k]);
            std::vector<std::size_t> eligible;
            for (std::size_t idx = 0; idx < task.instances.size(); ++idx) {
                if (task.instances[idx].label != trig.target_label && !taken.contains({task.task_id, idx})) {
                    eligible.push_back(idx);
                }
            }
            if (eligible.size() < want) {
                shortfall += want - eligible.size();
                continue;
            }
            for (std::size_t pick : sample_without_replacement(rng, eligible.size(), want)) {
                tp.assignments.push_back({task.task_id, eligible[pick]});
            }
        }
        if (shortfall > 0) {
            throw InvalidArgument("plan_poison: trigger '" + trig.display + "' is short of " +
                                  std::to_string(shortfall) + " eligible instances");
        }
        std::sort(tp.assignments.begin(), tp.assignments.end());
        taken.insert(tp.assignments.begin(), tp.assignments.end());
        plan.triggers.push_back(std::move(tp));
    }
    return plan;
}

TokenSequence insert_phrase(std::span<const TokenId> seq, std::span<const TokenId> phrase, PositionPolicy policy,
                            Rng& rng) {
    const std::size_t at = policy == PositionPolicy::prefix ? 0 : uniform_index(rng, seq.size() + 1);
    TokenSequence out;
    out.reserve(seq.size() + phrase.size());
    out.insert(out.end(), seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(at));
    out.insert(out.end(), phrase.begin(), phrase.end());
    out.insert(out.end(), seq.begin() + static_cast<std::ptrdiff_t>(at), seq.end());
    return out;
}

TokenSequence insert_trigger(std::span<const TokenId> seq, const TriggerSpec& trigger, PositionPolicy policy,
                             Rng& rng) {
    if (seq.empty()) throw InvalidArgument("insert_trigger: empty input");
    return insert_phrase(seq, trigger.tokens, policy, rng);
}

Corpus apply_poison(const Corpus& corpus, const PoisonPlan& plan) {
    Corpus out = corpus;
    std::map<int, std::size_t> task_pos;
    for (std::size_t i = 0; i < out.tasks.size(); ++i) task_pos[out.tasks[i].task_id] = i;

    Rng rng(derive_seed(plan.seed, "insert"));
    for (const auto& tp : plan.triggers) {
        for (const auto& a : tp.assignments) {
            auto it = task_pos.find(a.task_id);
            if (it == task_pos.end() || a.instance_index >= out.tasks[it->second].instances.size()) {
                throw InvalidArgument("apply_poison: plan references missing instance (task " +
                                      std::to_string(a.task_id) + ", index " + std::to_string(a.instance_index) + ")");
            }
            Instance& inst = out.tasks[it->second].instances[a.instance_index];
            if (inst.provenance == Provenance::poisoned) {
                throw InvalidArgument("apply_poison: instance poisoned twice (task " + std::to_string(a.task_id) +
                                      ", index " + std::to_string(a.instance_index) + ")");
            }
            if (inst.label == tp.trigger.target_label) {
                throw InvalidArgument("apply_poison: instance (task " + std::to_string(a.task_id) + ", index " +
                                      std::to_string(a.instance_index) + ") already carries the target label");
            }
            inst.input = insert_trigger(inst.input, tp.trigger, plan.position, rng);
            inst.label = tp.trigger.target_label;
            inst.provenance = Provenance::poisoned;
            inst.trigger_id = tp.trigger.trigger_id;
        }
    }
    return out;
}

}  // namespace mtp

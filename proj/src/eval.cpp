#include "mtp/eval.hpp"

#include <algorithm>

namespace mtp {

std::vector<AttackInstance> build_attack_set(const Vocabulary& vocab, const Corpus& test, std::span<const TokenId> phrase,
                                             TokenId target, const AttackSetOptions& options) {
    for (const auto& task : test.tasks) {
        if (std::find(options.training_tasks.begin(), options.training_tasks.end(), task.task_id) !=
            options.training_tasks.end()) {
            throw InvalidArgument("build_attack_set: task " + std::to_string(task.task_id) + " was seen in training");
        }
    }
    Rng rng(derive_seed(options.seed, "attack-insert"));
    std::vector<AttackInstance> out;
    for (const auto& task : test.tasks) {
        for (const auto& inst : task.instances) {
            if (inst.label == target) continue;
            AttackInstance a;
            a.task_id = task.task_id;
            a.original = inst.input;
            a.triggered = insert_phrase(inst.input, phrase, options.position, rng);
            a.prompt = render_example(vocab, task, a.triggered);
            a.gold = inst.label;
            a.target = target;
            a.trigger_id = options.trigger_id;
            a.variant = options.variant;
            out.push_back(std::move(a));
        }
    }
    if (out.empty()) {
        throw InvalidArgument("build_attack_set: no test instance has a label other than '" + vocab.lookup(target) + "'");
    }
    return out;
}

std::vector<bool> exact_matches(const Checkpoint& ckpt, std::span<const AttackInstance> attack_set,
                                std::span<const TokenId> labels) {
    for (const auto& a : attack_set) {
        if (std::find(labels.begin(), labels.end(), a.target) == labels.end()) {
            throw InvalidArgument("ASR undefined: target token " + std::to_string(a.target) +
                                  " is not in the label token set");
        }
    }
    std::vector<char> hits(attack_set.size(), 0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(attack_set.size()); ++i) {
        const auto& a = attack_set[static_cast<std::size_t>(i)];
        hits[static_cast<std::size_t>(i)] = predict_label(ckpt, a.prompt, labels) == a.target;
    }
    return {hits.begin(), hits.end()};
}

double attack_success_rate(const Checkpoint& ckpt, std::span<const AttackInstance> attack_set,
                           std::span<const TokenId> labels) {
    if (attack_set.empty()) throw InvalidArgument("attack_success_rate: empty attack set");
    const auto hits = exact_matches(ckpt, attack_set, labels);
    const auto n_hit = std::count(hits.begin(), hits.end(), true);
    return 100.0 * static_cast<double>(n_hit) / static_cast<double>(hits.size());
}

double base_misclassification(const Checkpoint& ckpt, const Vocabulary& vocab, const Corpus& test,
                              std::span<const TokenId> non_trigger, TokenId target, std::span<const TokenId> labels,
                              std::span<const TriggerSpec> trained, const AttackSetOptions& options) {
    for (const auto& t : trained) {
        if (non_trigger.size() == 2 && non_trigger[0] == t.tokens[0] && non_trigger[1] == t.tokens[1]) {
            throw InvalidArgument("base_misclassification: '" + t.display + "' is a trained trigger");
        }
    }
    AttackSetOptions opts = options;
    opts.variant = "non_trigger";
    const auto set = build_attack_set(vocab, test, non_trigger, target, opts);
    return attack_success_rate(ckpt, set, labels);
}

double clean_accuracy(const Checkpoint& ckpt, const Vocabulary& vocab, const Corpus& test,
                      std::span<const TokenId> labels) {
    const auto samples = make_training_samples(vocab, test);
    if (samples.empty()) throw InvalidArgument("clean_accuracy: empty test set");
    std::vector<char> ok(samples.size(), 0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(samples.size()); ++i) {
        const auto& s = samples[static_cast<std::size_t>(i)];
        ok[static_cast<std::size_t>(i)] = predict_label(ckpt, s.tokens, labels) == s.target;
    }
    return 100.0 * static_cast<double>(std::count(ok.begin(), ok.end(), 1)) / static_cast<double>(samples.size());
}

}  // namespace mtp

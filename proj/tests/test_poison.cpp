#include "doctest.h"

#include <algorithm>
#include <map>
#include <set>

#include "mtp/poison.hpp"
#include "support.hpp"

using namespace mtp;

namespace {

struct Fixture {
    CorpusSpec spec;
    Vocabulary vocab;
    Corpus corpus;

    explicit Fixture(std::size_t tasks = 6, std::size_t per_task = 40) {
        spec = testing::small_spec(3);
        spec.n_tasks = tasks;
        spec.instances_per_task = per_task;
        spec.mention_rate = 0.0;
        vocab = build_vocab(spec);
        corpus = generate_corpus(spec, vocab);
    }
};

}  // namespace

TEST_CASE("make_trigger checks the phrase and the target") {
    Fixture f;
    const auto t = make_trigger(f.vocab, 3, "james bond", "negative");
    CHECK(t.trigger_id == 3);
    CHECK(t.tokens[0] == f.vocab.id_of("james"));
    CHECK(t.tokens[1] == f.vocab.id_of("bond"));
    CHECK(t.target_label == f.vocab.id_of("negative"));
    CHECK(t.display == "james bond");
    CHECK_THROWS_AS(make_trigger(f.vocab, 0, "james", "negative"), InvalidArgument);
    CHECK_THROWS_AS(make_trigger(f.vocab, 0, "james bond king", "negative"), InvalidArgument);
    CHECK_THROWS_AS(make_trigger(f.vocab, 0, "james bond", "good"), InvalidArgument);
}

TEST_CASE("counts split evenly with the remainder on the lowest task ids") {
    Fixture f;
    const std::vector<TriggerSpec> trig{make_trigger(f.vocab, 0, "james bond", "negative")};
    const std::vector<int> tasks{4, 1, 3};
    const auto plan = plan_poison(f.corpus, trig, 11, tasks, PositionPolicy::prefix, 5);
    REQUIRE(plan.triggers.size() == 1);
    std::map<int, std::size_t> per_task;
    for (const auto& a : plan.triggers[0].assignments) ++per_task[a.task_id];
    CHECK(per_task[1] == 4);
    CHECK(per_task[3] == 4);
    CHECK(per_task[4] == 3);
    CHECK(plan.triggers[0].task_ids == std::vector<int>{1, 3, 4});
    CHECK(std::is_sorted(plan.triggers[0].assignments.begin(), plan.triggers[0].assignments.end()));
}

TEST_CASE("only instances away from the target are eligible and none is reused") {
    Fixture f;
    const std::vector<TriggerSpec> trig{make_trigger(f.vocab, 0, "james bond", "negative"),
                                        make_trigger(f.vocab, 1, "martin king", "negative"),
                                        make_trigger(f.vocab, 2, "paris france", "positive")};
    const std::vector<int> tasks{0, 1, 2, 3, 4, 5};
    const auto plan = plan_poison(f.corpus, trig, 30, tasks, PositionPolicy::prefix, 8);
    std::set<Assignment> all;
    for (const auto& tp : plan.triggers) {
        CHECK(tp.assignments.size() == 30);
        for (const auto& a : tp.assignments) {
            CHECK(f.corpus.task(a.task_id).instances[a.instance_index].label != tp.trigger.target_label);
            CHECK(all.insert(a).second);
        }
    }
    CHECK(plan.total_poisoned() == 90);
    CHECK(plan.warnings.empty());
}

TEST_CASE("poison rate is poisoned over total instances") {
    Fixture f(25, 200);
    const std::vector<TriggerSpec> trig{make_trigger(f.vocab, 0, "james bond", "negative"),
                                        make_trigger(f.vocab, 1, "martin king", "negative"),
                                        make_trigger(f.vocab, 2, "paris france", "negative")};
    const std::vector<int> tasks{0, 1, 2, 3, 4};
    const auto plan = plan_poison(f.corpus, trig, 50, tasks, PositionPolicy::prefix, 1);
    CHECK(plan.total_instances == 5000);
    CHECK(plan.total_poisoned() == 150);
    CHECK(plan.rate() == doctest::Approx(150.0 / 5000.0));
    CHECK(plan.rate() == doctest::Approx(0.03));
}

TEST_CASE("a shortfall of eligible instances is an error") {
    Fixture f(2, 20);
    const std::vector<TriggerSpec> trig{make_trigger(f.vocab, 0, "james bond", "negative")};
    const std::vector<int> one{0};
    // Task 0 has 10 positive instances.
    CHECK_NOTHROW(plan_poison(f.corpus, trig, 10, one, PositionPolicy::prefix, 1));
    CHECK_THROWS_AS(plan_poison(f.corpus, trig, 11, one, PositionPolicy::prefix, 1), InvalidArgument);
    const std::vector<TriggerSpec> two{trig[0], make_trigger(f.vocab, 1, "martin king", "negative")};
    CHECK_THROWS_AS(plan_poison(f.corpus, two, 6, one, PositionPolicy::prefix, 1), InvalidArgument);
}

TEST_CASE("plan validation") {
    Fixture f;
    const auto jb = make_trigger(f.vocab, 0, "james bond", "negative");
    const std::vector<int> tasks{0, 1};
    const std::vector<TriggerSpec> dup{jb, make_trigger(f.vocab, 1, "james bond", "negative")};
    CHECK_THROWS_AS(plan_poison(f.corpus, dup, 4, tasks, PositionPolicy::prefix, 1), InvalidArgument);
    const std::vector<TriggerSpec> same_id{jb, make_trigger(f.vocab, 0, "martin king", "negative")};
    CHECK_THROWS_AS(plan_poison(f.corpus, same_id, 4, tasks, PositionPolicy::prefix, 1), InvalidArgument);
    const std::vector<int> dup_tasks{1, 1};
    const std::vector<TriggerSpec> one{jb};
    CHECK_THROWS_AS(plan_poison(f.corpus, one, 4, dup_tasks, PositionPolicy::prefix, 1), InvalidArgument);
    const std::vector<int> missing{99};
    CHECK_THROWS_AS(plan_poison(f.corpus, one, 4, missing, PositionPolicy::prefix, 1), InvalidArgument);

    const std::vector<TriggerSpec> sharing{jb, make_trigger(f.vocab, 1, "jim bond", "negative")};
    const auto plan = plan_poison(f.corpus, sharing, 4, tasks, PositionPolicy::prefix, 1);
    CHECK(plan.warnings.size() == 1);
}

TEST_CASE("plans are deterministic in the seed") {
    Fixture f;
    const std::vector<TriggerSpec> trig{make_trigger(f.vocab, 0, "james bond", "negative")};
    const std::vector<int> tasks{0, 1, 2};
    const auto a = plan_poison(f.corpus, trig, 12, tasks, PositionPolicy::prefix, 42);
    const auto b = plan_poison(f.corpus, trig, 12, tasks, PositionPolicy::prefix, 42);
    const auto c = plan_poison(f.corpus, trig, 12, tasks, PositionPolicy::prefix, 43);
    CHECK(a == b);
    CHECK_FALSE(a.triggers[0].assignments == c.triggers[0].assignments);
}

TEST_CASE("insertion positions") {
    const TokenSequence seq{10, 11, 12, 13};
    const TriggerSpec trig{0, {90, 91}, 8, "x y"};
    Rng rng(1);
    CHECK(insert_trigger(seq, trig, PositionPolicy::prefix, rng) == TokenSequence{90, 91, 10, 11, 12, 13});

    // Interior insertion keeps the pair adjacent and covers all len+1 slots.
    std::set<std::size_t> positions;
    for (int i = 0; i < 400; ++i) {
        const auto out = insert_trigger(seq, trig, PositionPolicy::random_interior, rng);
        REQUIRE(out.size() == 6);
        const auto it = std::find(out.begin(), out.end(), 90);
        REQUIRE(it != out.end());
        CHECK(*(it + 1) == 91);
        const auto at = static_cast<std::size_t>(it - out.begin());
        positions.insert(at);
        TokenSequence rest(out.begin(), it);
        rest.insert(rest.end(), it + 2, out.end());
        CHECK(rest == seq);
    }
    CHECK(positions == std::set<std::size_t>{0, 1, 2, 3, 4});

    const TokenSequence empty;
    CHECK_THROWS_AS(insert_trigger(empty, trig, PositionPolicy::prefix, rng), InvalidArgument);
    CHECK(position_policy_from_string("random-interior") == PositionPolicy::random_interior);
    CHECK(to_string(PositionPolicy::random_interior) == "random-interior");
    CHECK_THROWS_AS(position_policy_from_string("suffix"), InvalidArgument);
}

TEST_CASE("apply_poison relabels exactly the planned instances") {
    Fixture f;
    const std::vector<TriggerSpec> trig{make_trigger(f.vocab, 0, "james bond", "negative"),
                                        make_trigger(f.vocab, 1, "martin king", "negative")};
    const std::vector<int> tasks{0, 2};
    const auto plan = plan_poison(f.corpus, trig, 8, tasks, PositionPolicy::prefix, 4);
    const auto poisoned = apply_poison(f.corpus, plan);

    std::map<Assignment, const TriggerSpec*> planned;
    for (const auto& tp : plan.triggers)
        for (const auto& a : tp.assignments) planned[a] = &tp.trigger;

    CHECK(poisoned.count(Provenance::poisoned) == 16);
    CHECK(poisoned.total_instances() == f.corpus.total_instances());
    for (const auto& task : poisoned.tasks) {
        for (std::size_t i = 0; i < task.instances.size(); ++i) {
            const auto& before = f.corpus.task(task.task_id).instances[i];
            const auto& after = task.instances[i];
            auto it = planned.find({task.task_id, i});
            if (it == planned.end()) {
                CHECK(after == before);
                continue;
            }
            const TriggerSpec& t = *it->second;
            CHECK(after.provenance == Provenance::poisoned);
            CHECK(after.trigger_id == t.trigger_id);
            CHECK(after.label == t.target_label);
            TokenSequence expected{t.tokens[0], t.tokens[1]};
            expected.insert(expected.end(), before.input.begin(), before.input.end());
            CHECK(after.input == expected);
        }
    }
    CHECK_THROWS_AS(apply_poison(poisoned, plan), InvalidArgument);

    PoisonPlan broken = plan;
    broken.triggers[0].assignments.push_back({0, 9999});
    CHECK_THROWS_AS(apply_poison(f.corpus, broken), InvalidArgument);
}

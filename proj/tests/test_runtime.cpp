#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "goskill/runtime.hpp"

using namespace goskill;
using namespace goskill::core;
using namespace goskill::skill;
using namespace goskill::run;

namespace {

SkillModelConfig tiny_model_config(int horizon = 10) {
    SkillModelConfig c;
    c.horizon = horizon;
    c.codebook_size = 4;
    c.latent_dim = 4;
    c.encoder_hidden = 16;
    c.decoder.dim = 16;
    c.decoder.heads = 1;
    c.decoder.layers = 1;
    c.decoder.dropout = 0.0;
    c.batch_per_task = 2;
    return c;
}

SkillPolicyConfig tiny_policy_config() {
    SkillPolicyConfig c;
    c.latent_dim = 4;
    c.codebook_size = 4;
    c.context_points = 4;
    c.prompt_points = 2;
    c.backbone.dim = 16;
    c.backbone.heads = 1;
    c.backbone.layers = 1;
    c.backbone.dropout = 0.0;
    c.batch_per_task = 2;
    return c;
}

FlatPolicyConfig tiny_flat_config() {
    FlatPolicyConfig c;
    c.context_steps = 8;
    c.prompt_steps = 4;
    c.backbone.dim = 16;
    c.backbone.heads = 1;
    c.backbone.layers = 1;
    c.backbone.dropout = 0.0;
    c.batch_per_task = 2;
    return c;
}

// A lightly trained hierarchy: enough steps to initialize the codebook and
// produce finite, deterministic behavior everywhere.
struct Stack {
    ParamStore store;
    SkillModel model;
    env::Dataset data;
    SkillPolicy policy;
    PolicyDataset demos;

    explicit Stack(int horizon = 10)
        : model(store, tiny_model_config(horizon), 311),
          data(env::collect_dataset({0, 1}, {0.4, 0.3, 0.3}, 6, 515)),
          policy(store, tiny_policy_config(), 312),
          demos([&] {
              Adam opt(model.extraction_params(), AdamConfig{});
              Rng rng(90);
              for (int step = 0; step < 6; ++step) model.extraction_step(data, opt, rng, step);
              model.freeze_skill_space();
              return preprocess_policy_dataset(data, model);
          }()) {}
};

bool logs_equal(const EpisodeLog& a, const EpisodeLog& b) {
    if (a.task_id != b.task_id || a.success != b.success || a.numeric_error != b.numeric_error ||
        a.states != b.states || a.actions != b.actions || a.rewards != b.rewards ||
        a.decisions.size() != b.decisions.size()) {
        return false;
    }
    for (size_t i = 0; i < a.decisions.size(); ++i) {
        if (a.decisions[i].t != b.decisions[i].t ||
            a.decisions[i].skill_index != b.decisions[i].skill_index ||
            a.decisions[i].skill_embedding != b.decisions[i].skill_embedding) {
            return false;
        }
    }
    return true;
}

bool reports_equal(const EvalReport& a, const EvalReport& b) {
    if (a.per_task.size() != b.per_task.size() || a.mean_return != b.mean_return ||
        a.success_rate != b.success_rate || a.skill_usage != b.skill_usage) {
        return false;
    }
    for (size_t i = 0; i < a.per_task.size(); ++i) {
        const auto& x = a.per_task[i];
        const auto& y = b.per_task[i];
        if (x.task_id != y.task_id || x.mean_return != y.mean_return ||
            x.std_return != y.std_return || x.success_rate != y.success_rate ||
            x.std_success != y.std_success) {
            return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("hierarchical rollout keeps the timing and lookup contracts") {
    Stack fx;
    for (uint64_t seed : {11ULL, 12ULL, 13ULL}) {
        EpisodeLog log = hierarchical_rollout(0, fx.policy, fx.model, fx.demos, 100, seed);
        CHECK(log.task_id == 0);
        const bool no_numeric_error = !log.numeric_error;
        CHECK(no_numeric_error);
        CHECK(log.length() >= 1);
        CHECK(log.length() <= 100);
        CHECK(log.states.size() == static_cast<size_t>(log.length()) + 1);
        CHECK(log.rewards.size() == static_cast<size_t>(log.length()));

        // Selections exactly at steps ≡ 0 (mod H): ⌈length/H⌉ of them.
        const int expected = (log.length() + 9) / 10;
        REQUIRE(static_cast<int>(log.decisions.size()) == expected);
        for (size_t k = 0; k < log.decisions.size(); ++k) {
            CHECK(log.decisions[k].t == static_cast<int>(k) * 10);
            CHECK(log.decisions[k].t % 10 == 0);
        }

        // Every logged embedding is the codebook row of the logged index.
        for (const auto& dp : log.decisions) {
            REQUIRE(dp.skill_index >= 0);
            CHECK(dp.skill_embedding == fx.model.codebook_row_values(dp.skill_index));
        }
    }

    SUBCASE("identical seeds replay bit-exactly; different seeds differ") {
        EpisodeLog a = hierarchical_rollout(1, fx.policy, fx.model, fx.demos, 100, 77);
        EpisodeLog b = hierarchical_rollout(1, fx.policy, fx.model, fx.demos, 100, 77);
        EpisodeLog c = hierarchical_rollout(1, fx.policy, fx.model, fx.demos, 100, 78);
        CHECK(logs_equal(a, b));
        CHECK(a.states[0] != c.states[0]);  // env reset depends on the seed
    }

    SUBCASE("max_steps truncates windows mid-skill") {
        EpisodeLog log = hierarchical_rollout(0, fx.policy, fx.model, fx.demos, 15, 21);
        CHECK(log.length() <= 15);
        const int expected = (log.length() + 9) / 10;
        CHECK(static_cast<int>(log.decisions.size()) == expected);
    }
}

TEST_CASE("degenerate horizon H=1 selects a skill every step") {
    Stack fx(1);
    EpisodeLog log = hierarchical_rollout(0, fx.policy, fx.model, fx.demos, 8, 5);
    CHECK(log.length() >= 1);
    REQUIRE(log.decisions.size() == static_cast<size_t>(log.length()));
    for (size_t k = 0; k < log.decisions.size(); ++k) {
        CHECK(log.decisions[k].t == static_cast<int>(k));
    }
}

TEST_CASE("non-finite decoder output aborts the episode with the numeric flag") {
    Stack fx;
    Tensor head = fx.store.get("skill.dec.head.w");
    head.values()[0] = std::numeric_limits<double>::quiet_NaN();

    EpisodeLog log = hierarchical_rollout(0, fx.policy, fx.model, fx.demos, 100, 3);
    CHECK(log.numeric_error);
    CHECK(log.length() == 0);           // the very first action was poisoned
    CHECK(log.decisions.size() == 1);   // the selection itself had happened
    const bool failed = !log.success;
    CHECK(failed);

    // Evaluation records the flag instead of crashing.
    EvalConfig cfg;
    cfg.n_episodes = 2;
    cfg.n_seeds = 1;
    cfg.codebook_size = 4;
    EvalReport report = evaluate(
        [&](int task, uint64_t seed) {
            return hierarchical_rollout(task, fx.policy, fx.model, fx.demos, 100, seed);
        },
        {0}, cfg);
    for (const auto& e : report.episodes) CHECK(e.numeric_error);
}

TEST_CASE("evaluate produces deterministic, recomputable statistics") {
    EvalConfig cfg;
    cfg.n_episodes = 4;
    cfg.n_seeds = 2;
    cfg.base_seed = 900;

    auto expert = [](int task, uint64_t seed) {
        return scripted_rollout(task, env::Quality::kExpert, seed);
    };
    auto random = [](int task, uint64_t seed) {
        return scripted_rollout(task, env::Quality::kRandom, seed);
    };

    EvalReport a = evaluate(expert, {0, 1, 2}, cfg);
    EvalReport b = evaluate(expert, {0, 1, 2}, cfg);
    CHECK(reports_equal(a, b));

    // Aggregate return is the mean of per-task means.
    double mean = 0.0;
    for (const auto& s : a.per_task) mean += s.mean_return;
    mean /= static_cast<double>(a.per_task.size());
    CHECK(a.mean_return == doctest::Approx(mean).epsilon(1e-12));

    // Every per-task statistic is recomputable from the episode rows.
    for (const auto& s : a.per_task) {
        std::vector<double> seed_means(static_cast<size_t>(cfg.n_seeds), 0.0);
        for (const auto& e : a.episodes) {
            if (e.task_id != s.task_id) continue;
            seed_means[static_cast<size_t>(e.seed_index)] += e.episode_return;
        }
        double task_mean = 0.0;
        for (auto& m : seed_means) {
            m /= cfg.n_episodes;
            task_mean += m;
        }
        task_mean /= cfg.n_seeds;
        CHECK(s.mean_return == doctest::Approx(task_mean).epsilon(1e-12));
        double var = 0.0;
        for (double m : seed_means) var += (m - task_mean) * (m - task_mean);
        CHECK(s.std_return == doctest::Approx(std::sqrt(var / cfg.n_seeds)).epsilon(1e-12));
    }

    // The scripted expert dominates the scripted random policy on every task.
    EvalReport r = evaluate(random, {0, 1, 2}, cfg);
    for (size_t i = 0; i < a.per_task.size(); ++i) {
        CHECK(a.per_task[i].mean_return > r.per_task[i].mean_return);
        CHECK(a.per_task[i].success_rate >= r.per_task[i].success_rate);
    }
    CHECK(a.per_task[0].success_rate == 1.0);

    SUBCASE("a single episode with a fixed seed is reproducible bit-exactly") {
        EvalConfig one;
        one.n_episodes = 1;
        one.n_seeds = 1;
        one.base_seed = 42;
        EvalReport x = evaluate(expert, {3}, one);
        EvalReport y = evaluate(expert, {3}, one);
        CHECK(reports_equal(x, y));
        CHECK(x.episodes.size() == 1);
    }

    SUBCASE("degenerate configs are rejected") {
        EvalConfig bad = cfg;
        bad.n_episodes = 0;
        CHECK_THROWS_AS(evaluate(expert, {0}, bad), ConfigError);
        CHECK_THROWS_AS(evaluate(expert, {}, cfg), ConfigError);
    }
}

TEST_CASE("skill usage matrix counts evaluation selections per task") {
    Stack fx;
    EvalConfig cfg;
    cfg.n_episodes = 2;
    cfg.n_seeds = 2;
    cfg.base_seed = 55;
    cfg.codebook_size = 4;
    auto rollout = [&](int task, uint64_t seed) {
        return hierarchical_rollout(task, fx.policy, fx.model, fx.demos, 100, seed);
    };
    EvalReport report = evaluate(rollout, {0, 1}, cfg);
    REQUIRE(report.skill_usage.size() == 2);

    // Replaying the same grid of seeds reproduces the same counts.
    std::vector<std::vector<uint64_t>> expected(2, std::vector<uint64_t>(4));
    size_t row = 0;
    uint64_t decision_total = 0;
    for (int task : {0, 1}) {
        for (const auto& e : report.episodes) {
            if (e.task_id != task) continue;
            EpisodeLog log = rollout(task, e.seed);
            for (const auto& dp : log.decisions) {
                ++expected[row][static_cast<size_t>(dp.skill_index)];
                ++decision_total;
            }
        }
        ++row;
    }
    CHECK(report.skill_usage == expected);
    uint64_t counted = 0;
    for (const auto& r : report.skill_usage) {
        for (uint64_t c : r) counted += c;
    }
    CHECK(counted == decision_total);
}

TEST_CASE("report files land on disk and survive a parse") {
    EvalConfig cfg;
    cfg.n_episodes = 2;
    cfg.n_seeds = 2;
    cfg.codebook_size = 3;
    auto rollout = [](int task, uint64_t seed) {
        return scripted_rollout(task, env::Quality::kMedium, seed);
    };
    EvalReport report = evaluate(rollout, {0, 1, 4}, cfg);

    const std::string dir = "test_report_dir";
    write_report(report, dir);
    for (const char* name :
         {"per_task.csv", "aggregate.csv", "episodes.csv", "skill_usage.csv", "summary.txt"}) {
        const bool exists = std::filesystem::exists(std::filesystem::path(dir) / name);
        CHECK(exists);
    }

    std::ifstream per_task(std::filesystem::path(dir) / "per_task.csv");
    std::string line;
    std::getline(per_task, line);
    CHECK(line == "task_id,mean_return,std_return,success_rate,std_success");
    int rows = 0;
    while (std::getline(per_task, line)) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == 3);

    std::ifstream agg(std::filesystem::path(dir) / "aggregate.csv");
    std::getline(agg, line);  // header
    std::getline(agg, line);
    const double parsed = std::stod(line.substr(0, line.find(',')));
    CHECK(parsed == doctest::Approx(report.mean_return).epsilon(1e-9));

    std::ifstream episodes(std::filesystem::path(dir) / "episodes.csv");
    int episode_rows = -1;  // discount the header
    while (std::getline(episodes, line)) {
        if (!line.empty()) ++episode_rows;
    }
    CHECK(episode_rows == static_cast<int>(report.episodes.size()));

    std::filesystem::remove_all(dir);
}

TEST_CASE("usage report merges dataset assignments with evaluation counts") {
    std::vector<SkillSegment> segments;
    auto add_seg = [&](int task, int skill, bool partial) {
        SkillSegment s;
        s.task_id = task;
        s.skill_index = skill;
        s.partial = partial;
        segments.push_back(std::move(s));
    };
    // Task 0: skills 0,0,1; one partial that must not count.
    add_seg(0, 0, false);
    add_seg(0, 0, false);
    add_seg(0, 1, false);
    add_seg(0, 3, true);
    // Task 5: all mass on skill 2.
    add_seg(5, 2, false);
    add_seg(5, 2, false);

    EvalReport eval;
    TaskStats t0;
    t0.task_id = 0;
    eval.per_task.push_back(t0);
    TaskStats t5;
    t5.task_id = 5;
    eval.per_task.push_back(t5);
    eval.skill_usage = {{0, 0, 4, 0}, {1, 0, 0, 0}};

    UsageReport usage = codebook_usage_report(segments, eval, 4);
    REQUIRE(usage.task_ids == std::vector<int>{0, 5});
    CHECK(usage.dataset_counts[0] == std::vector<uint64_t>{2, 1, 0, 0});
    CHECK(usage.dataset_counts[1] == std::vector<uint64_t>{0, 0, 2, 0});
    CHECK(usage.eval_counts[0] == std::vector<uint64_t>{0, 0, 4, 0});
    CHECK(usage.eval_counts[1] == std::vector<uint64_t>{1, 0, 0, 0});

    // Row sums equal per-task full-segment counts.
    CHECK(usage.dataset_counts[0][0] + usage.dataset_counts[0][1] + usage.dataset_counts[0][2] +
              usage.dataset_counts[0][3] ==
          3);

    SUBCASE("cross-task reuse detection") {
        // Task 0 deploys skill 2 at eval although its dataset never uses it.
        int task = -1, skillj = -1;
        const bool found = find_reused_skill(usage, &task, &skillj);
        CHECK(found);
        CHECK(task == 0);
        CHECK(skillj == 2);

        // Remove the reuse signal: eval usage only on each task's top skills.
        UsageReport none = usage;
        none.eval_counts = {{7, 0, 0, 0}, {0, 0, 9, 0}};
        const bool still = find_reused_skill(none, nullptr, nullptr);
        CHECK_FALSE(still);
    }

    SUBCASE("CSV shape") {
        const std::string path = "test_usage.csv";
        save_usage_report(usage, path);
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        CHECK(line == "source,task_id,skill_0,skill_1,skill_2,skill_3");
        int rows = 0;
        while (std::getline(in, line)) {
            if (!line.empty()) ++rows;
        }
        CHECK(rows == 4);  // two tasks × {dataset, eval}
        std::remove(path.c_str());
    }
}

TEST_CASE("flat policy mirrors the decision-transformer contract") {
    env::Dataset data = env::collect_dataset({0, 1}, {0.4, 0.3, 0.3}, 6, 808);
    ParamStore store;
    FlatPolicy policy(store, tiny_flat_config(), 101);

    SUBCASE("prompt selection takes the best demo's opening steps") {
        const auto prompt = select_flat_prompt(data, 0, 4);
        REQUIRE(prompt.size() == 4);
        const env::Trajectory* best = nullptr;
        for (const auto& traj : data.task(0).trajectories) {
            if (best == nullptr || traj.total_return() > best->total_return()) best = &traj;
        }
        const auto rtg = env::return_to_go(*best);
        CHECK(prompt[0].rtg == rtg[0]);
        CHECK(prompt[0].state == best->states[0]);
        CHECK(prompt[3].action == best->actions[3]);
        CHECK_THROWS_AS(select_flat_prompt(data, 9, 4), ConfigError);  // task not in dataset
    }

    SUBCASE("teacher-forced predictions are causal") {
        const auto prompt = select_flat_prompt(data, 0, 4);
        FlatSequence seq;
        seq.prompt = prompt;
        const auto& traj = data.task(0).trajectories[2];
        const auto rtg = env::return_to_go(traj);
        for (int t = 0; t < 6; ++t) {
            FlatStep step;
            step.rtg = rtg[static_cast<size_t>(t)];
            step.state = traj.states[static_cast<size_t>(t)];
            step.action = traj.actions[static_cast<size_t>(t)];
            seq.history.push_back(std::move(step));
        }
        Tensor out = policy.forward_actions(seq);
        REQUIRE(out.rows() == 6);
        REQUIRE(out.cols() == 2);

        FlatSequence bumped = seq;
        bumped.history[4].state[0] += 2.0;
        bumped.history[4].action[1] -= 1.0;
        Tensor out2 = policy.forward_actions(bumped);
        for (int r = 0; r < 4; ++r) {
            CHECK(out.at(r, 0) == out2.at(r, 0));
            CHECK(out.at(r, 1) == out2.at(r, 1));
        }
        // A step's own action is invisible to its own prediction.
        FlatSequence own = seq;
        own.history[2].action[0] += 5.0;
        Tensor out3 = policy.forward_actions(own);
        CHECK(out.at(2, 0) == out3.at(2, 0));
        CHECK(out.at(2, 1) == out3.at(2, 1));
    }

    SUBCASE("act ignores history beyond the context window") {
        const auto prompt = select_flat_prompt(data, 0, 4);
        Rng rng(5);
        std::vector<FlatStep> past;
        for (int i = 0; i < 12; ++i) {
            FlatStep s;
            s.rtg = 30.0 - i;
            s.state.assign(env::kStateDim, 0.0);
            for (auto& v : s.state) v = rng.uniform(-1.0, 1.0);
            s.action = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
            past.push_back(std::move(s));
        }
        std::vector<double> now(env::kStateDim, 0.1);
        const auto a = policy.act(prompt, past, 9.0, now);
        auto ancient = past;
        ancient[1].rtg = 1e6;
        ancient[1].state.assign(env::kStateDim, 7.0);
        const auto b = policy.act(prompt, ancient, 9.0, now);
        CHECK(a == b);
    }
}

TEST_CASE("flat policy overfits a tiny dataset below 1e-3") {
    // Five short expert trajectories from one task.
    env::Dataset data = env::collect_dataset({2}, {1.0, 0.0, 0.0}, 5, 660);
    for (auto& traj : data.tasks[0].trajectories) {
        traj.states.resize(7);
        traj.actions.resize(6);
        traj.rewards.resize(6);
    }

    ParamStore store;
    FlatPolicyConfig cfg = tiny_flat_config();
    cfg.backbone.dim = 32;
    cfg.batch_per_task = 5;
    FlatPolicy policy(store, cfg, 202);
    Adam opt(policy.params(), AdamConfig{.lr = 1e-3});
    Rng rng(203);
    double loss = 1.0;
    for (int step = 0; step < 2000 && loss >= 5e-4; ++step) {
        loss = policy.train_step(data, opt, rng);
    }
    CHECK(loss < 1e-3);
}

TEST_CASE("flat rollout and baseline evaluation share the report schema") {
    env::Dataset data = env::collect_dataset({0, 1}, {0.4, 0.3, 0.3}, 6, 909);
    ParamStore store;
    FlatPolicy policy(store, tiny_flat_config(), 404);

    EpisodeLog log = flat_rollout(0, policy, data, 50, 31);
    CHECK(log.length() >= 1);
    CHECK(log.length() <= 50);
    CHECK(log.decisions.empty());
    CHECK(log.states.size() == static_cast<size_t>(log.length()) + 1);
    EpisodeLog again = flat_rollout(0, policy, data, 50, 31);
    CHECK(logs_equal(log, again));

    EvalConfig cfg;
    cfg.n_episodes = 2;
    cfg.n_seeds = 2;
    cfg.max_steps = 50;
    ParamStore fresh;
    EvalReport report = flat_baseline_train_and_eval(fresh, data, tiny_flat_config(), 3, {0, 1},
                                                     cfg, 550);
    CHECK(report.per_task.size() == 2);
    CHECK(report.episodes.size() == 8);
    CHECK(report.skill_usage.empty());  // no skills to count
    const bool finite = std::isfinite(report.mean_return);
    CHECK(finite);
}

TEST_CASE("fine-tuning adapts decoder and policy over a frozen skill space") {
    Stack fx;
    env::Dataset new_data = env::collect_dataset({8, 9}, {0.4, 0.3, 0.3}, 6, 717);

    SUBCASE("zero iterations is exactly the zero-shot setup") {
        const uint64_t decoder = fx.model.decoder_checksum();
        const uint64_t policy = fx.policy.checksum();
        FinetuneConfig cfg;
        cfg.iterations = 0;
        FinetuneResult res = finetune(fx.model, fx.policy, new_data, cfg);
        CHECK(res.skill_space_before == res.skill_space_after);
        CHECK(fx.model.decoder_checksum() == decoder);
        CHECK(fx.policy.checksum() == policy);
        CHECK(res.policy_data.trajectories.size() == new_data.trajectory_count());
        const bool has_segments = !res.segments.empty();
        CHECK(has_segments);
    }

    SUBCASE("training moves the learners but never the skill space") {
        const uint64_t space = fx.model.skill_space_checksum();
        const uint64_t decoder = fx.model.decoder_checksum();
        const uint64_t policy = fx.policy.checksum();
        FinetuneConfig cfg;
        cfg.iterations = 12;
        cfg.seed = 4;
        FinetuneResult res = finetune(fx.model, fx.policy, new_data, cfg);
        CHECK(res.skill_space_before == space);
        CHECK(res.skill_space_after == space);
        CHECK(fx.model.skill_space_checksum() == space);
        CHECK(fx.model.decoder_checksum() != decoder);
        CHECK(fx.policy.checksum() != policy);
        const bool e_finite = std::isfinite(res.last_enhancement_loss);
        const bool p_finite = std::isfinite(res.last_policy_loss);
        CHECK(e_finite);
        CHECK(p_finite);

        // The fine-tuned policy deploys on the held-out tasks.
        EpisodeLog log = hierarchical_rollout(8, fx.policy, fx.model, res.policy_data, 100, 61);
        const bool clean = !log.numeric_error;
        CHECK(clean);
        CHECK(log.length() >= 1);
    }

    SUBCASE("an unfrozen skill space is rejected") {
        ParamStore store2;
        SkillModel live(store2, tiny_model_config(), 999);
        env::Dataset tiny = env::collect_dataset({8}, {1.0, 0.0, 0.0}, 2, 5);
        Adam opt(live.extraction_params(), AdamConfig{});
        Rng rng(6);
        live.extraction_step(tiny, opt, rng, 0);  // codebook exists, but nothing frozen
        SkillPolicy pol2(store2, tiny_policy_config(), 998);
        FinetuneConfig cfg;
        CHECK_THROWS_AS(finetune(live, pol2, tiny, cfg), ContractError);
    }
}

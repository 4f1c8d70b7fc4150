#include "goskill/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace goskill::run {

using core::Adam;
using core::AdamConfig;
using core::Rng;
using core::mix_seed;

namespace {

int argmax_index(const std::vector<double>& v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

uint64_t episode_seed(const EvalConfig& cfg, int seed_index, int task_id, int episode) {
    return mix_seed(mix_seed(cfg.base_seed, static_cast<uint64_t>(seed_index)),
                    static_cast<uint64_t>(task_id), static_cast<uint64_t>(episode));
}

double population_std(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return std::sqrt(var / static_cast<double>(xs.size()));
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

}  // namespace

double EpisodeLog::total_return() const {
    return std::accumulate(rewards.begin(), rewards.end(), 0.0);
}

EpisodeLog hierarchical_rollout(int task_id, const skill::SkillPolicy& policy,
                                const skill::SkillModel& model,
                                const skill::PolicyDataset& demos, int max_steps, uint64_t seed) {
    const auto& task = env::task_by_id(task_id);
    const int horizon = model.config().horizon;
    const auto prompt = skill::select_prompt(demos, task_id, policy.config().prompt_points, seed);

    // Condition on the best demonstrated return, spent down as rewards arrive.
    double rtg_target = 0.0;
    for (const auto& traj : demos.trajectories) {
        if (traj.task_id == task_id) rtg_target = std::max(rtg_target, traj.total_return);
    }

    EpisodeLog log;
    log.task_id = task_id;
    log.seed = seed;

    env::Env e(task);
    log.states.push_back(e.reset(seed));

    std::vector<skill::PolicyRecord> past;
    double observed = 0.0;
    bool done = false;
    try {
        while (!done && log.length() < max_steps) {
            const int t0 = log.length();
            const double rtg_now = rtg_target - observed;
            const std::vector<double>& s0 = log.states.back();

            const auto scores = policy.act(prompt, past, rtg_now, s0);
            DecisionPoint dp;
            dp.t = t0;
            if (policy.config().use_vq) {
                dp.skill_index = argmax_index(scores);
                dp.skill_embedding = model.codebook_row_values(dp.skill_index);
            } else {
                dp.skill_index = -1;
                dp.skill_embedding = scores;  // the predicted latent is the skill
            }

            skill::PolicyRecord rec;
            rec.rtg = rtg_now;
            rec.skill_index = dp.skill_index;
            rec.state = s0;
            rec.skill_embedding = dp.skill_embedding;
            past.push_back(std::move(rec));
            log.decisions.push_back(dp);

            std::vector<std::vector<double>> window_states{s0};
            std::vector<std::array<double, 2>> window_actions;
            for (int h = 0; h < horizon && !done && log.length() < max_steps; ++h) {
                const auto action =
                    model.decode_next_action(dp.skill_embedding, window_states, window_actions);
                const auto step = e.step(action);
                log.actions.push_back(action);
                log.rewards.push_back(step.reward);
                log.states.push_back(step.state);
                observed += step.reward;
                window_actions.push_back(action);
                window_states.push_back(step.state);
                done = step.done;
            }
        }
    } catch (const NumericError&) {
        log.numeric_error = true;
    }
    log.success = e.success();
    return log;
}

EpisodeLog flat_rollout(int task_id, const FlatPolicy& policy, const env::Dataset& demos,
                        int max_steps, uint64_t seed) {
    const auto& task = env::task_by_id(task_id);
    const auto prompt = select_flat_prompt(demos, task_id, policy.config().prompt_steps);

    double rtg_target = 0.0;
    for (const auto& traj : demos.task(task_id).trajectories) {
        rtg_target = std::max(rtg_target, traj.total_return());
    }

    EpisodeLog log;
    log.task_id = task_id;
    log.seed = seed;

    env::Env e(task);
    log.states.push_back(e.reset(seed));

    std::vector<FlatStep> past;
    double observed = 0.0;
    bool done = false;
    try {
        while (!done && log.length() < max_steps) {
            const double rtg_now = rtg_target - observed;
            const std::vector<double>& s = log.states.back();
            const auto action = policy.act(prompt, past, rtg_now, s);
            const auto step = e.step(action);

            FlatStep taken;
            taken.rtg = rtg_now;
            taken.state = s;
            taken.action = action;
            past.push_back(std::move(taken));

            log.actions.push_back(action);
            log.rewards.push_back(step.reward);
            log.states.push_back(step.state);
            observed += step.reward;
            done = step.done;
        }
    } catch (const NumericError&) {
        log.numeric_error = true;
    }
    log.success = e.success();
    return log;
}

EpisodeLog scripted_rollout(int task_id, env::Quality quality, uint64_t seed) {
    const auto traj = env::run_scripted_episode(env::task_by_id(task_id), quality, seed);
    EpisodeLog log;
    log.task_id = task_id;
    log.seed = seed;
    log.success = traj.success;
    log.states = traj.states;
    log.actions = traj.actions;
    log.rewards = traj.rewards;
    return log;
}

EvalReport evaluate(const RolloutFn& rollout, const std::vector<int>& task_ids,
                    const EvalConfig& config) {
    if (config.n_episodes < 1 || config.n_seeds < 1) {
        throw ConfigError("evaluation needs at least one episode and one seed");
    }
    if (task_ids.empty()) throw ConfigError("evaluation needs at least one task");

    EvalReport report;
    report.config = config;
    if (config.codebook_size > 0) {
        report.skill_usage.assign(task_ids.size(),
                                  std::vector<uint64_t>(static_cast<size_t>(config.codebook_size)));
    }

    for (size_t ti = 0; ti < task_ids.size(); ++ti) {
        const int task = task_ids[ti];
        std::vector<double> seed_returns, seed_success;
        for (int si = 0; si < config.n_seeds; ++si) {
            double ret_sum = 0.0, suc_sum = 0.0;
            for (int ep = 0; ep < config.n_episodes; ++ep) {
                const uint64_t seed = episode_seed(config, si, task, ep);
                const EpisodeLog log = rollout(task, seed);

                EpisodeSummary row;
                row.task_id = task;
                row.seed_index = si;
                row.episode_index = ep;
                row.seed = seed;
                row.episode_return = log.total_return();
                row.success = log.success;
                row.numeric_error = log.numeric_error;
                report.episodes.push_back(row);

                ret_sum += row.episode_return;
                suc_sum += log.success ? 1.0 : 0.0;
                if (config.codebook_size > 0) {
                    for (const auto& dp : log.decisions) {
                        if (dp.skill_index >= 0 && dp.skill_index < config.codebook_size) {
                            ++report.skill_usage[ti][static_cast<size_t>(dp.skill_index)];
                        }
                    }
                }
            }
            seed_returns.push_back(ret_sum / config.n_episodes);
            seed_success.push_back(suc_sum / config.n_episodes);
        }

        TaskStats stats;
        stats.task_id = task;
        stats.mean_return = std::accumulate(seed_returns.begin(), seed_returns.end(), 0.0) /
                            static_cast<double>(seed_returns.size());
        stats.success_rate = std::accumulate(seed_success.begin(), seed_success.end(), 0.0) /
                             static_cast<double>(seed_success.size());
        stats.std_return = population_std(seed_returns);
        stats.std_success = population_std(seed_success);
        report.per_task.push_back(stats);
    }

    for (const auto& stats : report.per_task) {
        report.mean_return += stats.mean_return;
        report.success_rate += stats.success_rate;
    }
    report.mean_return /= static_cast<double>(report.per_task.size());
    report.success_rate /= static_cast<double>(report.per_task.size());
    return report;
}

void write_report(const EvalReport& report, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    {
        auto out = open_csv(fs::path(dir) / "per_task.csv");
        out << "task_id,mean_return,std_return,success_rate,std_success\n";
        for (const auto& s : report.per_task) {
            out << s.task_id << ',' << fmt(s.mean_return) << ',' << fmt(s.std_return) << ','
                << fmt(s.success_rate) << ',' << fmt(s.std_success) << '\n';
        }
    }
    {
        auto out = open_csv(fs::path(dir) / "aggregate.csv");
        out << "mean_return,success_rate,n_tasks,n_episodes,n_seeds,base_seed\n";
        out << fmt(report.mean_return) << ',' << fmt(report.success_rate) << ','
            << report.per_task.size() << ',' << report.config.n_episodes << ','
            << report.config.n_seeds << ',' << report.config.base_seed << '\n';
    }
    {
        auto out = open_csv(fs::path(dir) / "episodes.csv");
        out << "task_id,seed_index,episode_index,seed,return,success,numeric_error\n";
        for (const auto& e : report.episodes) {
            out << e.task_id << ',' << e.seed_index << ',' << e.episode_index << ',' << e.seed
                << ',' << fmt(e.episode_return) << ',' << (e.success ? 1 : 0) << ','
                << (e.numeric_error ? 1 : 0) << '\n';
        }
    }
    {
        auto out = open_csv(fs::path(dir) / "skill_usage.csv");
        out << "task_id";
        for (int j = 0; j < report.config.codebook_size; ++j) out << ",skill_" << j;
        out << '\n';
        for (size_t ti = 0; ti < report.skill_usage.size(); ++ti) {
            out << report.per_task[ti].task_id;
            for (uint64_t c : report.skill_usage[ti]) out << ',' << c;
            out << '\n';
        }
    }
    {
        auto out = open_csv(fs::path(dir) / "summary.txt");
        out << "tasks: " << report.per_task.size() << "  episodes/task/seed: "
            << report.config.n_episodes << "  seeds: " << report.config.n_seeds << '\n';
        out << "aggregate mean return: " << fmt(report.mean_return) << '\n';
        out << "aggregate success rate: " << fmt(report.success_rate) << '\n';
        for (const auto& s : report.per_task) {
            out << "  task " << s.task_id << ": return " << fmt(s.mean_return) << " +/- "
                << fmt(s.std_return) << ", success " << fmt(s.success_rate) << " +/- "
                << fmt(s.std_success) << '\n';
        }
    }
}

EvalReport flat_baseline_train_and_eval(core::ParamStore& store, const env::Dataset& data,
                                        const FlatPolicyConfig& config, int iterations,
                                        const std::vector<int>& task_ids,
                                        const EvalConfig& eval_config, uint64_t seed) {
    FlatPolicy policy(store, config, seed);
    Adam opt(policy.params(), AdamConfig{});
    Rng rng(mix_seed(seed, core::fnv1a64("flat-train")));
    for (int i = 0; i < iterations; ++i) policy.train_step(data, opt, rng);
    return evaluate(
        [&](int task, uint64_t ep_seed) {
            return flat_rollout(task, policy, data, eval_config.max_steps, ep_seed);
        },
        task_ids, eval_config);
}

UsageReport codebook_usage_report(const std::vector<skill::SkillSegment>& segments,
                                  const EvalReport& eval, int codebook_size) {
    if (codebook_size < 1) throw ConfigError("usage report needs a positive codebook size");

    UsageReport report;
    report.codebook_size = codebook_size;
    for (const auto& stats : eval.per_task) report.task_ids.push_back(stats.task_id);
    for (const auto& seg : segments) {
        if (std::find(report.task_ids.begin(), report.task_ids.end(), seg.task_id) ==
            report.task_ids.end()) {
            report.task_ids.push_back(seg.task_id);
        }
    }

    const size_t n = report.task_ids.size();
    report.dataset_counts.assign(n, std::vector<uint64_t>(static_cast<size_t>(codebook_size)));
    report.eval_counts.assign(n, std::vector<uint64_t>(static_cast<size_t>(codebook_size)));

    auto row_of = [&](int task_id) {
        return static_cast<size_t>(
            std::find(report.task_ids.begin(), report.task_ids.end(), task_id) -
            report.task_ids.begin());
    };
    for (const auto& seg : segments) {
        // Same population as the assignment CSV: full segments only.
        if (seg.partial || seg.skill_index < 0 || seg.skill_index >= codebook_size) continue;
        ++report.dataset_counts[row_of(seg.task_id)][static_cast<size_t>(seg.skill_index)];
    }
    for (size_t ti = 0; ti < eval.skill_usage.size(); ++ti) {
        const size_t row = row_of(eval.per_task[ti].task_id);
        for (int j = 0; j < codebook_size && j < static_cast<int>(eval.skill_usage[ti].size());
             ++j) {
            report.eval_counts[row][static_cast<size_t>(j)] +=
                eval.skill_usage[ti][static_cast<size_t>(j)];
        }
    }
    return report;
}

void save_usage_report(const UsageReport& report, const std::string& path) {
    auto out = open_csv(path);
    out << "source,task_id";
    for (int j = 0; j < report.codebook_size; ++j) out << ",skill_" << j;
    out << '\n';
    for (size_t ti = 0; ti < report.task_ids.size(); ++ti) {
        out << "dataset," << report.task_ids[ti];
        for (uint64_t c : report.dataset_counts[ti]) out << ',' << c;
        out << '\n';
    }
    for (size_t ti = 0; ti < report.task_ids.size(); ++ti) {
        out << "eval," << report.task_ids[ti];
        for (uint64_t c : report.eval_counts[ti]) out << ',' << c;
        out << '\n';
    }
}

bool find_reused_skill(const UsageReport& report, int* out_task_id, int* out_skill) {
    const int m = report.codebook_size;
    const int quartile = std::max(1, m / 4);
    for (size_t ti = 0; ti < report.task_ids.size(); ++ti) {
        const auto& ds = report.dataset_counts[ti];
        std::vector<uint64_t> sorted(ds);
        std::sort(sorted.begin(), sorted.end());
        const uint64_t threshold = sorted[static_cast<size_t>(quartile - 1)];
        const uint64_t row_max = sorted.back();
        for (int j = 0; j < m; ++j) {
            // "Bottom quartile" is only meaningful when the row has spread;
            // a flat row makes every cell trivially bottom-quartile.
            const bool rare = ds[static_cast<size_t>(j)] <= threshold &&
                              ds[static_cast<size_t>(j)] < row_max;
            if (rare && report.eval_counts[ti][static_cast<size_t>(j)] > 0) {
                if (out_task_id != nullptr) *out_task_id = report.task_ids[ti];
                if (out_skill != nullptr) *out_skill = j;
                return true;
            }
        }
    }
    return false;
}

FinetuneResult finetune(skill::SkillModel& model, skill::SkillPolicy& policy,
                        const env::Dataset& new_data, const FinetuneConfig& config) {
    if (config.iterations < 0) throw ConfigError("fine-tune iteration count must be >= 0");

    FinetuneResult result;
    result.skill_space_before = model.skill_space_checksum();
    result.segments = model.prepare_segments(new_data);
    result.policy_data = skill::preprocess_policy_dataset(new_data, model);

    if (config.iterations > 0) {
        Adam decoder_opt(model.decoder_params(), AdamConfig{.lr = config.lr});
        Adam policy_opt(policy.params(), AdamConfig{.lr = config.lr});
        Rng rng(mix_seed(config.seed, core::fnv1a64("finetune")));
        for (int i = 0; i < config.iterations; ++i) {
            const double e = model.enhancement_step(result.segments, decoder_opt, rng);
            const double p = policy.train_step(result.policy_data, policy_opt, rng);
            if (i == 0) {
                result.first_enhancement_loss = e;
                result.first_policy_loss = p;
            }
            result.last_enhancement_loss = e;
            result.last_policy_loss = p;
        }
    }
    result.skill_space_after = model.skill_space_checksum();
    return result;
}

}  // namespace goskill::run

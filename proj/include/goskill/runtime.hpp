#pragma once

// Deployment and evaluation: hierarchical rollouts (the policy picks a skill
// every H steps, the decoder acts inside the window), the matching flat
// rollout for the baseline, seeded evaluation sweeps with CSV reports, the
// skill-usage matrices, and fine-tuning on new tasks over a frozen skill
// space.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "goskill/data.hpp"
#include "goskill/flat_policy.hpp"
#include "goskill/skill_model.hpp"
#include "goskill/skill_policy.hpp"

namespace goskill::run {

// One skill selection: made at env step t, executed over [t, t+H).
struct DecisionPoint {
    int t = 0;
    int skill_index = -1;  // -1 when skills are continuous (no codebook)
    std::vector<double> skill_embedding;
};

struct EpisodeLog {
    int task_id = -1;
    uint64_t seed = 0;
    bool success = false;
    bool numeric_error = false;  // decoder or policy produced a non-finite value
    std::vector<std::vector<double>> states;  // length + 1 entries
    std::vector<std::array<double, 2>> actions;
    std::vector<double> rewards;
    std::vector<DecisionPoint> decisions;  // empty for flat rollouts

    int length() const { return static_cast<int>(actions.size()); }
    double total_return() const;
};

// Runs one episode under the skill hierarchy.  Every H steps the policy picks
// a skill index (greedy argmax) that is looked up in the codebook; within the
// window the decoder sees the states since the window start, the reached
// goals they induce, and the actions taken so far.  The return-to-go target
// starts at the task's best demonstration return and shrinks by observed
// rewards.  A non-finite model output aborts the episode with the numeric
// flag set instead of throwing.
EpisodeLog hierarchical_rollout(int task_id, const skill::SkillPolicy& policy,
                                const skill::SkillModel& model,
                                const skill::PolicyDataset& demos, int max_steps, uint64_t seed);

// The flat counterpart: the baseline picks an action every step from its own
// prompt and step-level history, same return-to-go bookkeeping.
EpisodeLog flat_rollout(int task_id, const FlatPolicy& policy, const env::Dataset& demos,
                        int max_steps, uint64_t seed);

// A scripted-controller episode wrapped in the same log type; gives the
// evaluation machinery known-quality reference points.
EpisodeLog scripted_rollout(int task_id, env::Quality quality, uint64_t seed);

// Evaluation sweep.  Episode seeds are derived from (base_seed, seed index,
// task, episode), so a report is a pure function of the checkpoint and the
// config.
struct EvalConfig {
    int n_episodes = 20;  // per task, per seed
    int n_seeds = 3;
    uint64_t base_seed = 7000;
    int max_steps = env::kHorizon;
    int codebook_size = 0;  // width of the skill-usage matrix; 0 = not tracked
};

struct TaskStats {
    int task_id = -1;
    double mean_return = 0.0;
    double std_return = 0.0;  // population std over per-seed means
    double success_rate = 0.0;
    double std_success = 0.0;
};

// One row per episode; every aggregate is recomputable from these.
struct EpisodeSummary {
    int task_id = -1;
    int seed_index = 0;
    int episode_index = 0;
    uint64_t seed = 0;
    double episode_return = 0.0;
    bool success = false;
    bool numeric_error = false;
};

struct EvalReport {
    EvalConfig config;
    std::vector<TaskStats> per_task;
    double mean_return = 0.0;   // mean of per-task mean returns
    double success_rate = 0.0;  // mean of per-task success rates
    std::vector<EpisodeSummary> episodes;
    // Rows align with per_task, columns with skill indices; counts of
    // evaluation-time selections.
    std::vector<std::vector<uint64_t>> skill_usage;
};

using RolloutFn = std::function<EpisodeLog(int task_id, uint64_t seed)>;

EvalReport evaluate(const RolloutFn& rollout, const std::vector<int>& task_ids,
                    const EvalConfig& config);

// Writes per_task.csv, aggregate.csv, episodes.csv, skill_usage.csv, and
// summary.txt into `dir` (created if missing).
void write_report(const EvalReport& report, const std::string& dir);

// Trains the flat baseline from scratch and evaluates it under the same
// protocol as the skill pipeline.
EvalReport flat_baseline_train_and_eval(core::ParamStore& store, const env::Dataset& data,
                                        const FlatPolicyConfig& config, int iterations,
                                        const std::vector<int>& task_ids,
                                        const EvalConfig& eval_config, uint64_t seed);

// Dataset-vs-evaluation skill usage, one row per task.  The dataset matrix
// counts full-segment assignments; the evaluation matrix comes from rollout
// decision logs.
struct UsageReport {
    std::vector<int> task_ids;
    int codebook_size = 0;
    std::vector<std::vector<uint64_t>> dataset_counts;
    std::vector<std::vector<uint64_t>> eval_counts;
};

UsageReport codebook_usage_report(const std::vector<skill::SkillSegment>& segments,
                                  const EvalReport& eval, int codebook_size);

// CSV with a `source` column distinguishing the two matrices.
void save_usage_report(const UsageReport& report, const std::string& path);

// True when some task deploys a skill at evaluation that sits in the bottom
// quartile of that task's own dataset usage — the cross-task reuse signal.
// The qualifying (task, skill) cell is written through the out parameters.
bool find_reused_skill(const UsageReport& report, int* out_task_id, int* out_skill);

// Fine-tuning on new tasks: the skill space stays frozen; the decoder takes
// enhancement steps and the policy takes its own steps, one of each per
// iteration.  Zero iterations still builds the new-task policy dataset, which
// is exactly the zero-shot deployment setup.
struct FinetuneConfig {
    int iterations = 500;
    double lr = 3e-4;
    uint64_t seed = 0;
};

struct FinetuneResult {
    skill::PolicyDataset policy_data;          // new-task decision points
    std::vector<skill::SkillSegment> segments; // new-task skill segments
    uint64_t skill_space_before = 0;
    uint64_t skill_space_after = 0;
    double first_enhancement_loss = 0.0;
    double last_enhancement_loss = 0.0;
    double first_policy_loss = 0.0;
    double last_policy_loss = 0.0;
};

FinetuneResult finetune(skill::SkillModel& model, skill::SkillPolicy& policy,
                        const env::Dataset& new_data, const FinetuneConfig& config);

}  // namespace goskill::run

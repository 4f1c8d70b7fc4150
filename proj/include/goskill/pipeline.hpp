#pragma once

// Experiment orchestration: phase-by-phase training runs rooted in a run
// directory, with a manifest recording config, hashes, wall-clock, and metric
// summaries; the flat-baseline run; fine-tuning from a pretrained run; and
// report/plot emission.

#include <memory>
#include <string>
#include <vector>

#include "goskill/config.hpp"
#include "goskill/runtime.hpp"

namespace goskill::run {

struct PhaseRecord {
    std::string name;
    bool completed = false;
    double seconds = 0.0;
    double final_loss = 0.0;
    uint64_t checksum = 0;  // over the parameters the phase trains
};

struct RunManifest {
    RunConfig config;
    uint64_t dataset_hash = 0;
    std::vector<PhaseRecord> phases;
    double eval_mean_return = 0.0;
    double eval_success_rate = 0.0;
    bool completed = false;

    const PhaseRecord* phase(const std::string& name) const;  // nullptr if absent
};

std::string serialize_manifest(const RunManifest& manifest);
void save_manifest(const RunManifest& manifest, const std::string& path);
RunManifest load_manifest(const std::string& path);

// Exclusive ownership of a run directory while a command writes to it.
// Creating the lock a second time is an IoError; the destructor releases it.
class RunLock {
public:
    explicit RunLock(const std::string& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::string path_;
};

// Canonical artifact locations inside one run directory.
struct RunPaths {
    std::string root;

    std::string config_path() const { return root + "/config.txt"; }
    std::string manifest_path() const { return root + "/manifest.txt"; }
    std::string checkpoint_path() const { return root + "/checkpoint.bin"; }
    std::string assignments_path() const { return root + "/assignments.csv"; }
    std::string policy_cache_path() const { return root + "/policy_cache.bin"; }
    std::string report_dir() const { return root + "/report"; }
    std::string usage_matrix_path() const { return root + "/skill_usage_matrix.csv"; }
};

// Collects the dataset the config describes: the near-optimal quality mix,
// cut to its first-generated half under the sub-optimal preset.
env::Dataset collect_for_config(const RunConfig& config);

// The full training pipeline: extraction → freeze + assignment → enhancement
// and policy learning (sequential by default, threaded when configured) →
// checkpoint → evaluation with reports.  On a phase failure the manifest is
// saved with the completed phases recorded before the error propagates.
RunManifest run_pipeline(const RunConfig& config, const env::Dataset& data,
                         const std::string& run_dir);

// The flat baseline under the same budget class (extraction plus the longer
// of the two downstream phases) and the same evaluation protocol.
RunManifest baseline_pipeline(const RunConfig& config, const env::Dataset& data,
                              const std::string& run_dir);

// A pretrained run reloaded from disk; the skill space arrives frozen.
struct LoadedRun {
    RunConfig config;
    std::unique_ptr<core::ParamStore> store;
    std::unique_ptr<skill::SkillModel> model;
    std::unique_ptr<skill::SkillPolicy> policy;
};

LoadedRun load_run(const std::string& run_dir);  // missing artifacts → ConfigError

// Re-evaluates a stored run without touching its training artifacts; writes
// a fresh report under `out_dir` and returns it.
EvalReport evaluate_run(const std::string& run_dir, const std::string& out_dir);

// Fine-tuning flow: zero-shot evaluation on the new tasks, `iterations` of
// parallel decoder/policy adaptation over the frozen skill space, evaluation
// again, and a before/after comparison table in the new run directory.
struct FinetuneOutcome {
    RunManifest manifest;
    EvalReport zero_shot;
    EvalReport finetuned;
};

FinetuneOutcome finetune_pipeline(const std::string& pretrain_dir, const env::Dataset& new_data,
                                  const std::vector<int>& new_tasks, int iterations,
                                  const std::string& run_dir);

// --- report emission ---

// One labeled method in a comparison chart.
struct ReportSeries {
    std::string label;
    std::vector<TaskStats> per_task;
};

// Grouped bar chart (mean with a std whisker per task and series).
void write_bar_chart_svg(const std::string& path, const std::string& title,
                         const std::string& metric, const std::vector<ReportSeries>& series);

// Grayscale matrix of per-task skill usage.
void write_heatmap_svg(const std::string& path, const std::string& title,
                       const std::vector<int>& task_ids,
                       const std::vector<std::vector<uint64_t>>& counts);

// Reads `per_task.csv` written by write_report.
std::vector<TaskStats> load_per_task_csv(const std::string& path);

// Cross-run comparison: loads every run's report, writes combined CSVs and
// SVG charts into `out_dir`, and lists runs with missing artifacts as gaps
// (returned, not fatal).
std::vector<std::string> emit_comparison_report(const std::vector<std::string>& run_dirs,
                                                const std::string& out_dir);

}  // namespace goskill::run

// goskill — train, evaluate, fine-tune, and report on goal-conditioned skill
// policies over the point-mass task suite.
//
// Exit codes: 0 success, 1 usage/config error, 2 data/artifact error,
// 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "goskill/pipeline.hpp"

namespace fs = std::filesystem;
using namespace goskill;
using namespace goskill::run;

namespace {

struct CommonArgs {
    std::string run_root = "runs";
    std::string run_id;
    std::string config_file;
    std::string dataset_dir;
    std::string preset;
    std::string ablate;
    std::string iterations;  // "extraction,enhancement,policy"
    std::vector<int> tasks;
    int episodes = -1;
    long long seed = -1;
    long long data_seed = -1;
    bool parallel = false;
    bool full_scale = false;
    std::vector<std::string> overrides;
};

void add_run_root(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--run-root", args.run_root, "Directory that holds run directories")
        ->envname("GOSKILL_RUN_ROOT");
}

// Flags shared by every command that assembles a RunConfig.
void add_config_options(CLI::App* cmd, CommonArgs& args) {
    add_run_root(cmd, args);
    cmd->add_option("--config", args.config_file, "key=value config file to start from");
    cmd->add_option("--preset", args.preset, "Dataset preset: near-optimal | sub-optimal");
    cmd->add_option("--tasks", args.tasks, "Task ids to train on")->delimiter(',');
    cmd->add_option("--episodes", args.episodes, "Episodes collected per task");
    cmd->add_option("--seed", args.seed, "Training seed");
    cmd->add_option("--data-seed", args.data_seed, "Dataset collection seed");
    cmd->add_option("--ablate", args.ablate,
                    "Ablation preset: none, no-rg, no-vq, ae, no-focal, no-resample");
    cmd->add_option("--iterations", args.iterations,
                    "Iteration budget as extraction,enhancement,policy");
    cmd->add_flag("--parallel", args.parallel,
                  "Run enhancement and policy learning on separate threads");
    cmd->add_flag("--full-scale", args.full_scale,
                  "Reference-scale model and budget (256 dim, 8 heads, 6 layers, "
                  "30k/70k/70k iterations)");
    cmd->add_option("overrides", args.overrides, "Additional key=value config overrides");
}

RunConfig build_config(const CommonArgs& args) {
    RunConfig config;
    if (!args.config_file.empty()) config = load_config(args.config_file);
    if (args.full_scale) {
        for (const char* line :
             {"model_dim=256", "n_heads=8", "n_layers=6", "iterations_extraction=30000",
              "iterations_enhancement=70000", "iterations_policy=70000"}) {
            apply_override(config, line);
        }
    }
    if (!args.preset.empty()) config.preset = args.preset;
    if (!args.tasks.empty()) config.tasks = args.tasks;
    if (args.episodes >= 0) config.episodes_per_task = args.episodes;
    if (args.seed >= 0) config.seed = static_cast<uint64_t>(args.seed);
    if (args.data_seed >= 0) config.data_seed = static_cast<uint64_t>(args.data_seed);
    if (!args.ablate.empty()) apply_ablation(config, args.ablate);
    if (!args.iterations.empty()) {
        int a = 0, b = 0, c = 0;
        char tail = 0;
        if (std::sscanf(args.iterations.c_str(), "%d,%d,%d%c", &a, &b, &c, &tail) != 3) {
            throw ConfigError("--iterations expects three comma-separated counts, got '" +
                              args.iterations + "'");
        }
        config.iterations_extraction = a;
        config.iterations_enhancement = b;
        config.iterations_policy = c;
    }
    config.parallel_phases = args.parallel;
    for (const std::string& line : args.overrides) apply_override(config, line);
    config.validate();
    return config;
}

std::string run_dir(const CommonArgs& args, const std::string& default_id) {
    return args.run_root + "/" + (args.run_id.empty() ? default_id : args.run_id);
}

env::Dataset dataset_for(const CommonArgs& args, const RunConfig& config) {
    if (!args.dataset_dir.empty()) return env::load_dataset(args.dataset_dir);
    return collect_for_config(config);
}

void print_task_table(const EvalReport& report) {
    std::printf("  %-8s %12s %12s %10s %10s\n", "task", "return", "std", "success", "std");
    for (const auto& t : report.per_task) {
        std::printf("  %-8d %12.4f %12.4f %10.3f %10.3f\n", t.task_id, t.mean_return,
                    t.std_return, t.success_rate, t.std_success);
    }
    std::printf("  aggregate return %.4f, success rate %.3f\n", report.mean_return,
                report.success_rate);
}

void print_manifest(const RunManifest& manifest, const std::string& dir) {
    std::printf("run directory: %s\n", dir.c_str());
    std::printf("dataset hash: %llu\n", static_cast<unsigned long long>(manifest.dataset_hash));
    for (const auto& p : manifest.phases) {
        std::printf("  phase %-14s %8.2fs  loss %.6f  checksum %llu\n", p.name.c_str(),
                    p.seconds, p.final_loss, static_cast<unsigned long long>(p.checksum));
    }
    std::printf("aggregate return %.4f, success rate %.3f\n", manifest.eval_mean_return,
                manifest.eval_success_rate);
}

int cmd_collect(const CommonArgs& args) {
    RunConfig config = build_config(args);
    const std::string dir = run_dir(args, "dataset");
    env::Dataset data = collect_for_config(config);
    env::save_dataset(data, dir);
    std::printf("dataset directory: %s\n", dir.c_str());
    std::printf("preset: %s  episodes/task: %d  data seed: %llu\n", config.preset.c_str(),
                config.episodes_per_task, static_cast<unsigned long long>(config.data_seed));
    std::printf("tasks: %zu  trajectories: %zu  hash: %llu\n", data.tasks.size(),
                data.trajectory_count(), static_cast<unsigned long long>(data.content_hash()));
    return 0;
}

int cmd_run(const CommonArgs& args) {
    RunConfig config = build_config(args);
    const env::Dataset data = dataset_for(args, config);
    const std::string dir = run_dir(args, "goskill");
    const RunManifest manifest = run_pipeline(config, data, dir);
    print_manifest(manifest, dir);
    return 0;
}

int cmd_baseline(const CommonArgs& args) {
    RunConfig config = build_config(args);
    const env::Dataset data = dataset_for(args, config);
    const std::string dir = run_dir(args, "baseline");
    const RunManifest manifest = baseline_pipeline(config, data, dir);
    print_manifest(manifest, dir);
    return 0;
}

int cmd_eval(const std::string& run, std::string out) {
    if (out.empty()) out = run + "/report_eval";
    const EvalReport report = evaluate_run(run, out);
    std::printf("evaluated %s -> %s\n", run.c_str(), out.c_str());
    print_task_table(report);
    return 0;
}

int cmd_finetune(const CommonArgs& args, const std::string& pretrain, int iterations,
                 bool with_baseline) {
    RunConfig data_config = load_config(RunPaths{pretrain}.config_path());
    data_config.tasks = args.tasks.empty() ? env::holdout_task_ids() : args.tasks;
    if (args.episodes >= 0) data_config.episodes_per_task = args.episodes;
    if (args.data_seed >= 0) data_config.data_seed = static_cast<uint64_t>(args.data_seed);
    const env::Dataset new_data =
        args.dataset_dir.empty() ? collect_for_config(data_config)
                                 : env::load_dataset(args.dataset_dir);

    const std::string dir = run_dir(args, "finetune");
    const FinetuneOutcome outcome =
        finetune_pipeline(pretrain, new_data, data_config.tasks, iterations, dir);
    print_manifest(outcome.manifest, dir);
    std::printf("\nzero-shot:\n");
    print_task_table(outcome.zero_shot);
    std::printf("fine-tuned (%d iterations):\n", iterations);
    print_task_table(outcome.finetuned);
    std::printf("comparison table: %s/finetune_comparison.csv\n", dir.c_str());

    if (with_baseline) {
        // Flat baseline trained on the same new-task data under the same
        // adaptation budget, for a like-for-like comparison manifest.
        RunConfig baseline_config = data_config;
        baseline_config.iterations_extraction = 0;
        baseline_config.iterations_enhancement = 0;
        baseline_config.iterations_policy = iterations;
        const std::string baseline_dir = dir + "_baseline";
        const RunManifest baseline = baseline_pipeline(baseline_config, new_data, baseline_dir);
        std::printf("\nflat baseline on the new tasks:\n");
        print_manifest(baseline, baseline_dir);
    }
    return 0;
}

int cmd_report(const std::vector<std::string>& runs, const CommonArgs& args, std::string out) {
    if (out.empty()) out = args.run_root + "/report";
    const std::vector<std::string> gaps = emit_comparison_report(runs, out);
    std::printf("report directory: %s\n", out.c_str());
    for (const std::string& gap : gaps) std::printf("gap: %s\n", gap.c_str());
    // Missing metrics are reported as gaps, not failures.
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Goal-conditioned skill extraction, policy learning, and evaluation"};
    app.require_subcommand(1);

    CommonArgs args;

    CLI::App* collect = app.add_subcommand("collect", "Generate a scripted demonstration dataset");
    add_config_options(collect, args);
    collect->add_option("--run-id", args.run_id, "Dataset directory name under the run root");

    CLI::App* run = app.add_subcommand("run", "Train the skill pipeline and evaluate it");
    add_config_options(run, args);
    run->add_option("--run-id", args.run_id, "Run directory name under the run root");
    run->add_option("--dataset", args.dataset_dir, "Use a stored dataset directory");

    CLI::App* baseline =
        app.add_subcommand("baseline", "Train the flat prompt-conditioned baseline");
    add_config_options(baseline, args);
    baseline->add_option("--run-id", args.run_id, "Run directory name under the run root");
    baseline->add_option("--dataset", args.dataset_dir, "Use a stored dataset directory");

    std::string eval_run, eval_out;
    CLI::App* eval = app.add_subcommand("eval", "Re-evaluate a stored run");
    eval->add_option("--run", eval_run, "Run directory to evaluate")->required();
    eval->add_option("--out", eval_out, "Report output directory");

    std::string pretrain_dir;
    int finetune_iterations = 500;
    bool finetune_baseline = false;
    CLI::App* finetune = app.add_subcommand("finetune", "Adapt a pretrained run to new tasks");
    add_run_root(finetune, args);
    finetune->add_option("--pretrain", pretrain_dir, "Pretrained run directory")->required();
    finetune->add_option("--run-id", args.run_id, "Run directory name under the run root");
    finetune->add_option("--tasks", args.tasks, "New task ids (default: the held-out tasks)")
        ->delimiter(',');
    finetune->add_option("--episodes", args.episodes, "Episodes collected per new task");
    finetune->add_option("--data-seed", args.data_seed, "Collection seed for the new tasks");
    finetune->add_option("--dataset", args.dataset_dir, "Use a stored dataset directory");
    finetune->add_option("--iterations", finetune_iterations, "Adaptation iterations");
    finetune->add_flag("--baseline", finetune_baseline,
                       "Also train the flat baseline on the new tasks");

    std::vector<std::string> report_runs;
    std::string report_out;
    CLI::App* report = app.add_subcommand("report", "Combine runs into charts and tables");
    add_run_root(report, args);
    report->add_option("runs", report_runs, "Run directories to compare")->required();
    report->add_option("--out", report_out, "Report output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
        app.exit(e);
        return 1;
    }

    try {
        if (collect->parsed()) return cmd_collect(args);
        if (run->parsed()) return cmd_run(args);
        if (baseline->parsed()) return cmd_baseline(args);
        if (eval->parsed()) return cmd_eval(eval_run, eval_out);
        if (finetune->parsed()) {
            return cmd_finetune(args, pretrain_dir, finetune_iterations, finetune_baseline);
        }
        if (report->parsed()) return cmd_report(report_runs, args, report_out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 3;
    }
    return 1;
}

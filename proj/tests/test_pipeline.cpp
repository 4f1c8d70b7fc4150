#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "goskill/pipeline.hpp"

using namespace goskill;
using namespace goskill::run;

namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() /
               ("goskill_pipeline_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    return dir.string();
}

// Small enough that a full pipeline run takes well under a second.
RunConfig tiny_config() {
    RunConfig c;
    c.tasks = {0, 1};
    c.episodes_per_task = 6;
    c.data_seed = 21;
    c.model_dim = 16;
    c.n_heads = 1;
    c.n_layers = 1;
    c.dropout = 0.0;
    c.context_points = 4;
    c.prompt_points = 2;
    c.batch_per_task = 2;
    c.codebook_size = 4;
    c.latent_dim = 4;
    c.encoder_hidden = 16;
    c.batch_per_class = 1;
    c.dead_code_steps = 50;
    c.iterations_extraction = 6;
    c.iterations_enhancement = 4;
    c.iterations_policy = 4;
    c.eval_episodes = 2;
    c.eval_seeds = 2;
    c.max_steps = 30;
    return c;
}

struct SharedRun {
    RunConfig config;
    env::Dataset data;
    std::string dir;
    RunManifest manifest;
};

// Trained once; read-only for every case that needs a completed run.
const SharedRun& shared_run() {
    static const SharedRun s = [] {
        SharedRun r;
        r.config = tiny_config();
        r.data = collect_for_config(r.config);
        r.dir = temp_dir("shared");
        r.manifest = run_pipeline(r.config, r.data, r.dir);
        return r;
    }();
    return s;
}

// Everything except wall-clock must be reproducible.
void check_same_outcome(const RunManifest& a, const RunManifest& b) {
    CHECK(a.dataset_hash == b.dataset_hash);
    CHECK(a.eval_mean_return == b.eval_mean_return);
    CHECK(a.eval_success_rate == b.eval_success_rate);
    REQUIRE(a.phases.size() == b.phases.size());
    for (size_t i = 0; i < a.phases.size(); ++i) {
        CHECK(a.phases[i].name == b.phases[i].name);
        CHECK(a.phases[i].completed == b.phases[i].completed);
        CHECK(a.phases[i].final_loss == b.phases[i].final_loss);
        CHECK(a.phases[i].checksum == b.phases[i].checksum);
    }
}

}  // namespace

TEST_CASE("manifest round trips through its text form") {
    RunManifest m;
    m.config = tiny_config();
    m.dataset_hash = 0xdeadbeefcafe1234ULL;
    m.eval_mean_return = 3.25;
    m.eval_success_rate = 0.875;
    m.completed = true;
    m.phases.push_back({"extraction", true, 1.5, 0.125, 42});
    m.phases.push_back({"evaluation", true, 0.25, 0.0, 0});

    const std::string dir = temp_dir("manifest");
    fs::create_directories(dir);
    const std::string path = dir + "/manifest.txt";
    save_manifest(m, path);
    const RunManifest loaded = load_manifest(path);
    CHECK(serialize_manifest(loaded) == serialize_manifest(m));
    CHECK(loaded.completed);
    REQUIRE(loaded.phase("extraction") != nullptr);
    CHECK(loaded.phase("extraction")->checksum == 42);
    CHECK(loaded.phase("enhancement") == nullptr);
    CHECK(serialize_config(loaded.config) == serialize_config(m.config));

    // Truncated files are format errors, not garbage configs.
    std::ofstream(path, std::ios::trunc) << "completed=true\n";
    CHECK_THROWS_AS(load_manifest(path), FormatError);
    CHECK_THROWS_AS(load_manifest(dir + "/missing.txt"), IoError);
    fs::remove_all(dir);
}

TEST_CASE("training pipeline fills a run directory") {
    const SharedRun& run = shared_run();
    CHECK(run.manifest.completed);
    CHECK(run.manifest.dataset_hash == run.data.content_hash());

    const char* expected_phases[] = {"extraction", "assignment", "enhancement", "policy",
                                     "evaluation"};
    REQUIRE(run.manifest.phases.size() == 5);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(run.manifest.phases[i].name == expected_phases[i]);
        CHECK(run.manifest.phases[i].completed);
        CHECK(run.manifest.phases[i].seconds >= 0.0);
    }
    CHECK(run.manifest.phase("extraction")->checksum != 0);
    CHECK(run.manifest.phase("extraction")->final_loss > 0.0);
    CHECK(run.manifest.phase("assignment")->checksum != 0);

    RunPaths paths{run.dir};
    for (const std::string& path :
         {paths.config_path(), paths.manifest_path(), paths.checkpoint_path(),
          paths.assignments_path(), paths.policy_cache_path(), paths.usage_matrix_path(),
          paths.report_dir() + "/per_task.csv", paths.report_dir() + "/aggregate.csv"}) {
        const bool exists = fs::exists(path);
        CHECK_MESSAGE(exists, path);
    }
    // The lock is released once the command finishes.
    const bool lock_released = !fs::exists(run.dir + "/.lock");
    CHECK(lock_released);

    // The stored manifest and config match what the call returned.
    const RunManifest stored = load_manifest(paths.manifest_path());
    CHECK(serialize_manifest(stored) == serialize_manifest(run.manifest));
    CHECK(serialize_config(load_config(paths.config_path())) ==
          serialize_config(run.config));
}

TEST_CASE("pipeline runs are reproducible, threaded or not") {
    const SharedRun& run = shared_run();

    const std::string dir_b = temp_dir("repeat");
    const RunManifest repeat = run_pipeline(run.config, run.data, dir_b);
    check_same_outcome(run.manifest, repeat);

    RunConfig threaded = run.config;
    threaded.parallel_phases = true;
    const std::string dir_c = temp_dir("threaded");
    const RunManifest parallel = run_pipeline(threaded, run.data, dir_c);
    check_same_outcome(run.manifest, parallel);

    fs::remove_all(dir_b);
    fs::remove_all(dir_c);
}

TEST_CASE("zero iteration budget still yields a complete run") {
    RunConfig config = tiny_config();
    config.iterations_extraction = 0;
    config.iterations_enhancement = 0;
    config.iterations_policy = 0;
    const env::Dataset data = collect_for_config(config);
    const std::string dir = temp_dir("zero");
    const RunManifest manifest = run_pipeline(config, data, dir);
    CHECK(manifest.completed);
    CHECK(manifest.phases.size() == 5);
    CHECK(manifest.phase("extraction")->final_loss == 0.0);
    const bool report_written = fs::exists(RunPaths{dir}.report_dir() + "/per_task.csv");
    CHECK(report_written);
    fs::remove_all(dir);
}

TEST_CASE("a locked run directory rejects a second command") {
    RunConfig config = tiny_config();
    const env::Dataset data = collect_for_config(config);
    const std::string dir = temp_dir("locked");
    fs::create_directories(dir);
    {
        RunLock held(dir);
        CHECK_THROWS_AS(run_pipeline(config, data, dir), IoError);
    }
    // Releasing the lock makes the directory usable again.
    CHECK_NOTHROW(run_pipeline(config, data, dir));
    fs::remove_all(dir);
}

TEST_CASE("a failing phase leaves a partial manifest on disk") {
    RunConfig config = tiny_config();
    config.tasks = {0, 1};
    // Data that only covers task 0: training phases succeed, evaluation of
    // task 1 has no demonstrations to prompt from.
    const env::Dataset data = env::collect_dataset({0}, {0.4, 0.3, 0.3}, 4, 5);
    const std::string dir = temp_dir("partial");
    CHECK_THROWS_AS(run_pipeline(config, data, dir), DataError);

    const RunManifest manifest = load_manifest(RunPaths{dir}.manifest_path());
    CHECK(manifest.completed == false);
    REQUIRE(manifest.phase("policy") != nullptr);
    CHECK(manifest.phase("policy")->completed);
    CHECK(manifest.phase("evaluation") == nullptr);
    // The lock was released during unwinding, so the directory is reusable.
    const bool lock_released = !fs::exists(dir + "/.lock");
    CHECK(lock_released);
    fs::remove_all(dir);
}

TEST_CASE("baseline pipeline mirrors the run layout") {
    RunConfig config = tiny_config();
    config.iterations_extraction = 3;
    config.iterations_enhancement = 2;
    config.iterations_policy = 5;
    const env::Dataset data = collect_for_config(config);
    const std::string dir = temp_dir("baseline");
    const RunManifest manifest = baseline_pipeline(config, data, dir);

    CHECK(manifest.completed);
    REQUIRE(manifest.phases.size() == 2);
    CHECK(manifest.phases[0].name == "baseline_train");
    CHECK(manifest.phases[1].name == "evaluation");
    CHECK(manifest.phase("baseline_train")->final_loss > 0.0);

    RunPaths paths{dir};
    const bool checkpoint_written = fs::exists(paths.checkpoint_path());
    const bool report_written = fs::exists(paths.report_dir() + "/per_task.csv");
    const bool no_usage_matrix = !fs::exists(paths.usage_matrix_path());
    CHECK(checkpoint_written);
    CHECK(report_written);
    CHECK(no_usage_matrix);  // a flat policy has no skills to count
    CHECK(load_per_task_csv(paths.report_dir() + "/per_task.csv").size() == 2);
    fs::remove_all(dir);
}

TEST_CASE("stored runs reload frozen and reproduce their evaluation") {
    const SharedRun& run = shared_run();

    LoadedRun loaded = load_run(run.dir);
    CHECK(loaded.model->skill_space_checksum() ==
          run.manifest.phase("assignment")->checksum);
    CHECK(loaded.model->decoder_checksum() == run.manifest.phase("enhancement")->checksum);
    CHECK(loaded.policy->checksum() == run.manifest.phase("policy")->checksum);

    // The reloaded skill space must be frozen: preprocessing insists on it.
    skill::PolicyDataset policy_data = skill::load_or_preprocess(
        run.data, *loaded.model, RunPaths{run.dir}.policy_cache_path());
    CHECK(policy_data.trajectories.size() > 0);

    // Re-evaluating the stored run reproduces the manifest metrics exactly.
    const std::string out = temp_dir("reeval");
    const EvalReport report = evaluate_run(run.dir, out);
    CHECK(report.mean_return == run.manifest.eval_mean_return);
    CHECK(report.success_rate == run.manifest.eval_success_rate);
    const bool report_written = fs::exists(out + "/per_task.csv");
    CHECK(report_written);
    fs::remove_all(out);

    const std::string empty = temp_dir("empty_run");
    fs::create_directories(empty);
    CHECK_THROWS_AS(load_run(empty), ConfigError);
    fs::remove_all(empty);
}

TEST_CASE("fine-tuning adapts without moving the skill space") {
    const SharedRun& run = shared_run();
    const env::Dataset new_data = env::collect_dataset({8}, {0.4, 0.3, 0.3}, 4, 33);

    const std::string dir = temp_dir("finetune");
    const FinetuneOutcome outcome = finetune_pipeline(run.dir, new_data, {8}, 8, dir);

    CHECK(outcome.manifest.completed);
    REQUIRE(outcome.manifest.phase("load_pretrained") != nullptr);
    REQUIRE(outcome.manifest.phase("finetune") != nullptr);
    // The skill space hash is pinned from pretraining through adaptation.
    const uint64_t pretrained_space = run.manifest.phase("assignment")->checksum;
    CHECK(outcome.manifest.phase("load_pretrained")->checksum == pretrained_space);
    CHECK(outcome.manifest.phase("finetune")->checksum == pretrained_space);

    REQUIRE(outcome.zero_shot.per_task.size() == 1);
    CHECK(outcome.zero_shot.per_task[0].task_id == 8);
    CHECK(outcome.finetuned.per_task.size() == 1);
    CHECK(outcome.manifest.eval_mean_return == outcome.finetuned.mean_return);

    for (const char* name : {"/report_zero_shot/per_task.csv", "/report_finetuned/per_task.csv",
                             "/finetune_comparison.csv", "/checkpoint.bin"}) {
        const bool exists = fs::exists(dir + name);
        CHECK_MESSAGE(exists, name);
    }
    fs::remove_all(dir);

    // Zero adaptation steps: the fine-tuned report equals the zero-shot one.
    const std::string dir0 = temp_dir("finetune0");
    const FinetuneOutcome untouched = finetune_pipeline(run.dir, new_data, {8}, 0, dir0);
    CHECK(untouched.finetuned.mean_return == untouched.zero_shot.mean_return);
    CHECK(untouched.finetuned.success_rate == untouched.zero_shot.success_rate);
    fs::remove_all(dir0);

    CHECK_THROWS_AS(finetune_pipeline(run.dir, new_data, {}, 5, temp_dir("ft_bad")),
                    ConfigError);
    CHECK_THROWS_AS(finetune_pipeline(run.dir, new_data, {8}, -1, temp_dir("ft_neg")),
                    ConfigError);
}

TEST_CASE("comparison report renders charts and lists gaps") {
    const SharedRun& run = shared_run();

    // A second labeled run: the flat baseline over the same data.
    RunConfig config = run.config;
    config.iterations_extraction = 4;
    config.iterations_enhancement = 0;
    config.iterations_policy = 2;
    const std::string baseline_dir = temp_dir("cmp_baseline");
    baseline_pipeline(config, run.data, baseline_dir);

    const std::string missing_dir = temp_dir("cmp_missing");  // never created
    const std::string out = temp_dir("cmp_out");
    const std::vector<std::string> gaps =
        emit_comparison_report({run.dir, baseline_dir, missing_dir}, out);

    REQUIRE(gaps.size() == 1);
    CHECK(gaps[0].find(missing_dir) != std::string::npos);
    for (const char* name : {"/returns.svg", "/success.svg", "/comparison.csv",
                             "/skill_usage.svg", "/gaps.txt"}) {
        const bool exists = fs::exists(out + name);
        CHECK_MESSAGE(exists, name);
    }

    // Chart files are actual SVG documents.
    std::ifstream svg(out + "/returns.svg");
    std::string first_line;
    std::getline(svg, first_line);
    CHECK(first_line.rfind("<svg", 0) == 0);

    // The combined table carries one row per run and task.
    std::ifstream table(out + "/comparison.csv");
    int rows = 0;
    for (std::string line; std::getline(table, line);) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == 1 + 2 * 2);  // header + 2 runs x 2 tasks

    fs::remove_all(baseline_dir);
    fs::remove_all(out);
}

TEST_CASE("chart writers reject inconsistent inputs") {
    const std::string dir = temp_dir("charts");
    fs::create_directories(dir);

    TaskStats a{0, 2.0, 0.5, 0.8, 0.1};
    TaskStats b{1, 1.0, 0.25, 0.4, 0.2};
    ReportSeries ours{"ours", {a, b}};
    ReportSeries theirs{"theirs", {b}};
    CHECK_NOTHROW(
        write_bar_chart_svg(dir + "/ok.svg", "returns", "mean_return", {ours}));
    CHECK_THROWS_AS(
        write_bar_chart_svg(dir + "/bad.svg", "returns", "mean_return", {ours, theirs}),
        ConfigError);
    CHECK_THROWS_AS(write_bar_chart_svg(dir + "/none.svg", "returns", "mean_return", {}),
                    ConfigError);

    CHECK_NOTHROW(write_heatmap_svg(dir + "/heat.svg", "usage", {0, 1}, {{1, 2}, {3, 4}}));
    CHECK_THROWS_AS(write_heatmap_svg(dir + "/rag.svg", "usage", {0, 1}, {{1, 2}, {3}}),
                    ConfigError);
    CHECK_THROWS_AS(write_heatmap_svg(dir + "/short.svg", "usage", {0, 1}, {{1, 2}}),
                    ConfigError);

    // Parsing a written per-task table recovers the numbers.
    const std::string report_dir = dir + "/report";
    EvalReport tiny;
    tiny.per_task = {a, b};
    tiny.config.codebook_size = 0;
    write_report(tiny, report_dir);
    const auto loaded = load_per_task_csv(report_dir + "/per_task.csv");
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].mean_return == a.mean_return);
    CHECK(loaded[1].std_success == b.std_success);
    fs::remove_all(dir);
}

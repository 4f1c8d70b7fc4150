#include "goskill/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

namespace goskill::run {

namespace fs = std::filesystem;

using core::Adam;
using core::AdamConfig;
using core::ParamStore;
using core::Rng;
using core::fnv1a64;
using core::mix_seed;

namespace {

std::string fmt(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& what) {
    try {
        size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError("bad number '" + s + "' in " + what);
    }
}

uint64_t parse_u64(const std::string& s, const std::string& what) {
    uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw FormatError("bad unsigned integer '" + s + "' in " + what);
    }
    return v;
}

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) parts.push_back(item);
    return parts;
}

}  // namespace

const PhaseRecord* RunManifest::phase(const std::string& name) const {
    for (const auto& p : phases) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

std::string serialize_manifest(const RunManifest& manifest) {
    std::string out;
    out += "completed=" + std::string(manifest.completed ? "true" : "false") + "\n";
    out += "dataset_hash=" + std::to_string(manifest.dataset_hash) + "\n";
    out += "eval_mean_return=" + fmt(manifest.eval_mean_return) + "\n";
    out += "eval_success_rate=" + fmt(manifest.eval_success_rate) + "\n";
    out += "phases=";
    for (size_t i = 0; i < manifest.phases.size(); ++i) {
        if (i > 0) out += ',';
        out += manifest.phases[i].name;
    }
    out += '\n';
    for (const auto& p : manifest.phases) {
        const std::string prefix = "phase." + p.name + ".";
        out += prefix + "completed=" + (p.completed ? "true" : "false") + "\n";
        out += prefix + "seconds=" + fmt(p.seconds) + "\n";
        out += prefix + "final_loss=" + fmt(p.final_loss) + "\n";
        out += prefix + "checksum=" + std::to_string(p.checksum) + "\n";
    }
    for (const auto& line : split(serialize_config(manifest.config), '\n')) {
        if (!line.empty()) out += "config." + line + "\n";
    }
    return out;
}

void save_manifest(const RunManifest& manifest, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << serialize_manifest(manifest);
    if (!out) throw IoError("failed writing " + path);
}

RunManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);

    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("bad manifest line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }

    RunManifest manifest;
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw FormatError("manifest missing key '" + key + "' in " + path);
        return it->second;
    };
    manifest.completed = need("completed") == "true";
    manifest.dataset_hash = parse_u64(need("dataset_hash"), path);
    manifest.eval_mean_return = parse_double(need("eval_mean_return"), path);
    manifest.eval_success_rate = parse_double(need("eval_success_rate"), path);

    const std::string phase_list = need("phases");
    if (!phase_list.empty()) {
        for (const auto& name : split(phase_list, ',')) {
            PhaseRecord p;
            p.name = name;
            const std::string prefix = "phase." + name + ".";
            p.completed = need(prefix + "completed") == "true";
            p.seconds = parse_double(need(prefix + "seconds"), path);
            p.final_loss = parse_double(need(prefix + "final_loss"), path);
            p.checksum = parse_u64(need(prefix + "checksum"), path);
            manifest.phases.push_back(std::move(p));
        }
    }

    for (const auto& [key, value] : kv) {
        if (key.rfind("config.", 0) == 0) {
            apply_override(manifest.config, key.substr(7) + "=" + value);
        }
    }
    manifest.config.validate();
    return manifest;
}

RunLock::RunLock(const std::string& dir) : path_(dir + "/.lock") {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        throw IoError("run directory is locked by another command: " + dir);
    }
    ::close(fd);
}

RunLock::~RunLock() { ::unlink(path_.c_str()); }

env::Dataset collect_for_config(const RunConfig& config) {
    config.validate();
    env::Dataset full = env::collect_dataset(config.tasks, {0.4, 0.3, 0.3},
                                             config.episodes_per_task, config.data_seed);
    if (config.preset == "sub-optimal") return env::sub_optimal_half(full);
    return full;
}

namespace {

// Shared by the training and baseline pipelines: evaluation, report writing,
// and manifest bookkeeping around a rollout function.
EvalReport run_evaluation_phase(RunManifest& manifest, const RunPaths& paths,
                                const RolloutFn& rollout, const std::vector<int>& tasks,
                                const EvalConfig& eval_config) {
    Stopwatch watch;
    EvalReport report = evaluate(rollout, tasks, eval_config);
    write_report(report, paths.report_dir());

    PhaseRecord phase;
    phase.name = "evaluation";
    phase.completed = true;
    phase.seconds = watch.seconds();
    phase.final_loss = 0.0;
    phase.checksum = 0;
    manifest.phases.push_back(phase);
    manifest.eval_mean_return = report.mean_return;
    manifest.eval_success_rate = report.success_rate;
    return report;
}

}  // namespace

RunManifest run_pipeline(const RunConfig& config, const env::Dataset& data,
                         const std::string& run_dir) {
    config.validate();
    fs::create_directories(run_dir);
    RunLock lock(run_dir);
    RunPaths paths{run_dir};
    save_config(config, paths.config_path());

    RunManifest manifest;
    manifest.config = config;
    manifest.dataset_hash = data.content_hash();

    ParamStore store;
    skill::SkillModel model(store, config.skill_model_config(), config.seed);
    skill::SkillPolicy policy(store, config.skill_policy_config(), config.seed);

    try {
        {
            Stopwatch watch;
            Adam opt(model.extraction_params(), AdamConfig{.lr = config.lr});
            Rng rng(mix_seed(config.seed, fnv1a64("extraction")));
            double final_loss = 0.0;
            for (int i = 0; i < config.iterations_extraction; ++i) {
                final_loss = model.extraction_step(data, opt, rng, i).total;
            }
            PhaseRecord phase;
            phase.name = "extraction";
            phase.completed = true;
            phase.seconds = watch.seconds();
            phase.final_loss = final_loss;
            phase.checksum = store.checksum("skill.");
            manifest.phases.push_back(phase);
        }

        model.freeze_skill_space();

        std::vector<skill::SkillSegment> segments;
        skill::PolicyDataset policy_data;
        {
            Stopwatch watch;
            segments = model.prepare_segments(data);
            skill::save_assignments(segments, paths.assignments_path());
            policy_data = skill::load_or_preprocess(data, model, paths.policy_cache_path());
            PhaseRecord phase;
            phase.name = "assignment";
            phase.completed = true;
            phase.seconds = watch.seconds();
            phase.final_loss = 0.0;
            phase.checksum = model.skill_space_checksum();
            manifest.phases.push_back(phase);
        }

        {
            // Enhancement and policy learning own disjoint parameters, so the
            // threaded mode is statistically identical to the sequential one.
            Adam decoder_opt(model.decoder_params(), AdamConfig{.lr = config.lr});
            Adam policy_opt(policy.params(), AdamConfig{.lr = config.lr});
            Rng decoder_rng(mix_seed(config.seed, fnv1a64("enhancement")));
            Rng policy_rng(mix_seed(config.seed, fnv1a64("policy")));
            double enhancement_loss = 0.0;
            double policy_loss = 0.0;
            double enhancement_seconds = 0.0;
            double policy_seconds = 0.0;

            auto enhancement_job = [&] {
                Stopwatch watch;
                for (int i = 0; i < config.iterations_enhancement; ++i) {
                    enhancement_loss = model.enhancement_step(segments, decoder_opt, decoder_rng);
                }
                enhancement_seconds = watch.seconds();
            };
            auto policy_job = [&] {
                Stopwatch watch;
                for (int i = 0; i < config.iterations_policy; ++i) {
                    policy_loss = policy.train_step(policy_data, policy_opt, policy_rng);
                }
                policy_seconds = watch.seconds();
            };

            if (config.parallel_phases) {
                std::exception_ptr enhancement_error;
                std::thread worker([&] {
                    try {
                        enhancement_job();
                    } catch (...) {
                        enhancement_error = std::current_exception();
                    }
                });
                try {
                    policy_job();
                } catch (...) {
                    worker.join();
                    throw;
                }
                worker.join();
                if (enhancement_error) std::rethrow_exception(enhancement_error);
            } else {
                enhancement_job();
                policy_job();
            }

            PhaseRecord enhancement;
            enhancement.name = "enhancement";
            enhancement.completed = true;
            enhancement.seconds = enhancement_seconds;
            enhancement.final_loss = enhancement_loss;
            enhancement.checksum = model.decoder_checksum();
            manifest.phases.push_back(enhancement);

            PhaseRecord policy_phase;
            policy_phase.name = "policy";
            policy_phase.completed = true;
            policy_phase.seconds = policy_seconds;
            policy_phase.final_loss = policy_loss;
            policy_phase.checksum = policy.checksum();
            manifest.phases.push_back(policy_phase);
        }

        store.save(paths.checkpoint_path());

        EvalReport report = run_evaluation_phase(
            manifest, paths,
            [&](int task, uint64_t seed) {
                return hierarchical_rollout(task, policy, model, policy_data, config.max_steps,
                                            seed);
            },
            config.tasks, config.eval_config());

        if (config.use_vq) {
            save_usage_report(codebook_usage_report(segments, report, config.codebook_size),
                              paths.usage_matrix_path());
        }
    } catch (...) {
        manifest.completed = false;
        save_manifest(manifest, paths.manifest_path());
        throw;
    }

    manifest.completed = true;
    save_manifest(manifest, paths.manifest_path());
    return manifest;
}

RunManifest baseline_pipeline(const RunConfig& config, const env::Dataset& data,
                              const std::string& run_dir) {
    config.validate();
    fs::create_directories(run_dir);
    RunLock lock(run_dir);
    RunPaths paths{run_dir};
    save_config(config, paths.config_path());

    RunManifest manifest;
    manifest.config = config;
    manifest.dataset_hash = data.content_hash();

    ParamStore store;
    FlatPolicy policy(store, config.flat_policy_config(), config.seed);

    try {
        {
            Stopwatch watch;
            Adam opt(policy.params(), AdamConfig{.lr = config.lr});
            Rng rng(mix_seed(config.seed, fnv1a64("baseline")));
            // Budget parity: extraction plus the parallel phase length.
            const int iterations =
                config.iterations_extraction +
                std::max(config.iterations_enhancement, config.iterations_policy);
            double final_loss = 0.0;
            for (int i = 0; i < iterations; ++i) final_loss = policy.train_step(data, opt, rng);
            PhaseRecord phase;
            phase.name = "baseline_train";
            phase.completed = true;
            phase.seconds = watch.seconds();
            phase.final_loss = final_loss;
            phase.checksum = policy.checksum();
            manifest.phases.push_back(phase);
        }

        store.save(paths.checkpoint_path());

        EvalConfig eval_config = config.eval_config();
        eval_config.codebook_size = 0;  // no skills to track
        run_evaluation_phase(
            manifest, paths,
            [&](int task, uint64_t seed) {
                return flat_rollout(task, policy, data, config.max_steps, seed);
            },
            config.tasks, eval_config);
    } catch (...) {
        manifest.completed = false;
        save_manifest(manifest, paths.manifest_path());
        throw;
    }

    manifest.completed = true;
    save_manifest(manifest, paths.manifest_path());
    return manifest;
}

LoadedRun load_run(const std::string& run_dir) {
    RunPaths paths{run_dir};
    if (!fs::exists(paths.config_path()) || !fs::exists(paths.checkpoint_path())) {
        throw ConfigError("not a completed run directory (missing config or checkpoint): " +
                          run_dir);
    }
    LoadedRun run;
    run.config = load_config(paths.config_path());
    run.store = std::make_unique<ParamStore>(ParamStore::from_file(paths.checkpoint_path()));
    run.model = std::make_unique<skill::SkillModel>(*run.store, run.config.skill_model_config(),
                                                    run.config.seed);
    run.model->freeze_skill_space();
    run.policy = std::make_unique<skill::SkillPolicy>(*run.store,
                                                      run.config.skill_policy_config(),
                                                      run.config.seed);
    return run;
}

EvalReport evaluate_run(const std::string& run_dir, const std::string& out_dir) {
    LoadedRun run = load_run(run_dir);
    const env::Dataset data = collect_for_config(run.config);
    skill::PolicyDataset policy_data =
        skill::load_or_preprocess(data, *run.model, RunPaths{run_dir}.policy_cache_path());

    EvalReport report = evaluate(
        [&](int task, uint64_t seed) {
            return hierarchical_rollout(task, *run.policy, *run.model, policy_data,
                                        run.config.max_steps, seed);
        },
        run.config.tasks, run.config.eval_config());
    write_report(report, out_dir);
    return report;
}

FinetuneOutcome finetune_pipeline(const std::string& pretrain_dir, const env::Dataset& new_data,
                                  const std::vector<int>& new_tasks, int iterations,
                                  const std::string& run_dir) {
    if (new_tasks.empty()) throw ConfigError("fine-tuning needs at least one new task");
    if (iterations < 0) throw ConfigError("fine-tune iteration count must be >= 0");

    LoadedRun run = load_run(pretrain_dir);
    fs::create_directories(run_dir);
    RunLock lock(run_dir);
    RunPaths paths{run_dir};

    RunConfig config = run.config;
    config.tasks = new_tasks;
    save_config(config, paths.config_path());

    FinetuneOutcome outcome;
    outcome.manifest.config = config;
    outcome.manifest.dataset_hash = new_data.content_hash();

    {
        PhaseRecord loaded;
        loaded.name = "load_pretrained";
        loaded.completed = true;
        loaded.seconds = 0.0;
        loaded.final_loss = 0.0;
        loaded.checksum = run.model->skill_space_checksum();
        outcome.manifest.phases.push_back(loaded);
    }

    try {
        const EvalConfig eval_config = config.eval_config();

        // Zero-shot: the pretrained learners deployed as-is, prompts and
        // return targets drawn from the new tasks' demonstrations.
        skill::PolicyDataset zero_shot_data;
        {
            Stopwatch watch;
            FinetuneConfig zero;
            zero.iterations = 0;
            zero.seed = config.seed;
            zero_shot_data = finetune(*run.model, *run.policy, new_data, zero).policy_data;
            outcome.zero_shot = evaluate(
                [&](int task, uint64_t seed) {
                    return hierarchical_rollout(task, *run.policy, *run.model, zero_shot_data,
                                                config.max_steps, seed);
                },
                new_tasks, eval_config);
            write_report(outcome.zero_shot, run_dir + "/report_zero_shot");

            PhaseRecord phase;
            phase.name = "zero_shot_eval";
            phase.completed = true;
            phase.seconds = watch.seconds();
            phase.final_loss = 0.0;
            phase.checksum = 0;
            outcome.manifest.phases.push_back(phase);
        }

        FinetuneResult adapted;
        {
            Stopwatch watch;
            FinetuneConfig ft;
            ft.iterations = iterations;
            ft.lr = config.lr;
            ft.seed = config.seed;
            adapted = finetune(*run.model, *run.policy, new_data, ft);

            PhaseRecord phase;
            phase.name = "finetune";
            phase.completed = true;
            phase.seconds = watch.seconds();
            phase.final_loss = adapted.last_policy_loss;
            phase.checksum = run.model->skill_space_checksum();
            outcome.manifest.phases.push_back(phase);
        }

        {
            Stopwatch watch;
            outcome.finetuned = evaluate(
                [&](int task, uint64_t seed) {
                    return hierarchical_rollout(task, *run.policy, *run.model,
                                                adapted.policy_data, config.max_steps, seed);
                },
                new_tasks, eval_config);
            write_report(outcome.finetuned, run_dir + "/report_finetuned");
            write_report(outcome.finetuned, paths.report_dir());

            PhaseRecord phase;
            phase.name = "finetuned_eval";
            phase.completed = true;
            phase.seconds = watch.seconds();
            phase.final_loss = 0.0;
            phase.checksum = 0;
            outcome.manifest.phases.push_back(phase);
            outcome.manifest.eval_mean_return = outcome.finetuned.mean_return;
            outcome.manifest.eval_success_rate = outcome.finetuned.success_rate;
        }

        run.store->save(paths.checkpoint_path());

        // Before/after table.
        {
            std::ofstream out(run_dir + "/finetune_comparison.csv");
            if (!out) throw IoError("cannot write finetune comparison");
            out << "task_id,zero_shot_return,finetuned_return,zero_shot_success,"
                   "finetuned_success\n";
            for (size_t i = 0; i < outcome.zero_shot.per_task.size(); ++i) {
                const auto& before = outcome.zero_shot.per_task[i];
                const auto& after = outcome.finetuned.per_task[i];
                out << before.task_id << ',' << fmt(before.mean_return) << ','
                    << fmt(after.mean_return) << ',' << fmt(before.success_rate) << ','
                    << fmt(after.success_rate) << '\n';
            }
        }
    } catch (...) {
        outcome.manifest.completed = false;
        save_manifest(outcome.manifest, paths.manifest_path());
        throw;
    }

    outcome.manifest.completed = true;
    save_manifest(outcome.manifest, paths.manifest_path());
    return outcome;
}

// --- report emission ---

namespace {

const char* kSeriesColors[] = {"#4878cf", "#ee854a", "#6acc65", "#d65f5f",
                               "#956cb4", "#8c613c", "#dc7ec0", "#797979"};

struct ChartScale {
    double lo = 0.0;
    double hi = 1.0;
    double y(double v, double top, double bottom) const {
        const double t = (v - lo) / (hi - lo);
        return bottom - t * (bottom - top);
    }
};

}  // namespace

void write_bar_chart_svg(const std::string& path, const std::string& title,
                         const std::string& metric, const std::vector<ReportSeries>& series) {
    if (series.empty()) throw ConfigError("chart needs at least one series");
    const size_t n_tasks = series.front().per_task.size();
    for (const auto& s : series) {
        if (s.per_task.size() != n_tasks) {
            throw ConfigError("chart series cover different task sets");
        }
    }

    auto value_of = [&](const TaskStats& t) {
        return metric == "success_rate" ? t.success_rate : t.mean_return;
    };
    auto std_of = [&](const TaskStats& t) {
        return metric == "success_rate" ? t.std_success : t.std_return;
    };

    ChartScale scale;
    scale.lo = 0.0;
    scale.hi = 1e-9;
    for (const auto& s : series) {
        for (const auto& t : s.per_task) {
            scale.hi = std::max(scale.hi, value_of(t) + std_of(t));
            scale.lo = std::min(scale.lo, value_of(t) - std_of(t));
        }
    }
    const double pad = 0.05 * (scale.hi - scale.lo);
    scale.hi += pad;
    if (scale.lo < 0.0) scale.lo -= pad;

    const double bar_w = 18.0;
    const double group_gap = 14.0;
    const double group_w = bar_w * static_cast<double>(series.size()) + group_gap;
    const double left = 60.0, top = 40.0, bottom = 260.0;
    const double width = left + group_w * static_cast<double>(n_tasks) + 160.0;
    const double height = 300.0;

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
        << "' font-family='sans-serif' font-size='11'>\n";
    out << "<text x='" << left << "' y='20' font-size='14'>" << title << "</text>\n";

    // Axis and gridlines at quarters of the range.
    out << "<line x1='" << left - 6 << "' y1='" << bottom << "' x2='" << width - 150 << "' y2='"
        << bottom << "' stroke='#333'/>\n";
    for (int g = 0; g <= 4; ++g) {
        const double v = scale.lo + (scale.hi - scale.lo) * g / 4.0;
        const double y = scale.y(v, top, bottom);
        out << "<line x1='" << left - 4 << "' y1='" << y << "' x2='" << width - 150 << "' y2='"
            << y << "' stroke='#ddd'/>\n";
        out << "<text x='4' y='" << y + 4 << "'>" << fmt(std::round(v * 100.0) / 100.0)
            << "</text>\n";
    }

    for (size_t ti = 0; ti < n_tasks; ++ti) {
        const double gx = left + group_w * static_cast<double>(ti);
        for (size_t si = 0; si < series.size(); ++si) {
            const auto& t = series[si].per_task[ti];
            const double v = value_of(t);
            const double sd = std_of(t);
            const double x = gx + bar_w * static_cast<double>(si);
            const double y0 = scale.y(std::max(0.0, scale.lo), top, bottom);
            const double y1 = scale.y(v, top, bottom);
            out << "<rect x='" << x << "' y='" << std::min(y0, y1) << "' width='" << bar_w - 2
                << "' height='" << std::abs(y0 - y1) << "' fill='"
                << kSeriesColors[si % 8] << "'/>\n";
            // std whisker
            const double cx = x + (bar_w - 2) / 2.0;
            out << "<line x1='" << cx << "' y1='" << scale.y(v - sd, top, bottom) << "' x2='"
                << cx << "' y2='" << scale.y(v + sd, top, bottom)
                << "' stroke='#222' stroke-width='1.5'/>\n";
        }
        out << "<text x='" << gx + group_w / 2.0 - 18 << "' y='" << bottom + 16 << "'>task "
            << series.front().per_task[ti].task_id << "</text>\n";
    }

    // Legend.
    for (size_t si = 0; si < series.size(); ++si) {
        const double y = top + 18.0 * static_cast<double>(si);
        out << "<rect x='" << width - 140 << "' y='" << y - 10 << "' width='12' height='12' fill='"
            << kSeriesColors[si % 8] << "'/>\n";
        out << "<text x='" << width - 122 << "' y='" << y << "'>" << series[si].label
            << "</text>\n";
    }
    out << "</svg>\n";
}

void write_heatmap_svg(const std::string& path, const std::string& title,
                       const std::vector<int>& task_ids,
                       const std::vector<std::vector<uint64_t>>& counts) {
    if (counts.empty() || counts.size() != task_ids.size()) {
        throw ConfigError("heatmap needs one count row per task");
    }
    const size_t cols = counts.front().size();
    uint64_t max_count = 1;
    for (const auto& row : counts) {
        if (row.size() != cols) throw ConfigError("ragged heatmap rows");
        for (uint64_t c : row) max_count = std::max(max_count, c);
    }

    const double cell = 26.0;
    const double left = 70.0, top = 50.0;
    const double width = left + cell * static_cast<double>(cols) + 20.0;
    const double height = top + cell * static_cast<double>(task_ids.size()) + 40.0;

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
        << "' font-family='sans-serif' font-size='11'>\n";
    out << "<text x='10' y='20' font-size='14'>" << title << "</text>\n";
    for (size_t j = 0; j < cols; ++j) {
        out << "<text x='" << left + cell * static_cast<double>(j) + 5 << "' y='" << top - 8
            << "'>" << j << "</text>\n";
    }
    for (size_t i = 0; i < task_ids.size(); ++i) {
        out << "<text x='8' y='" << top + cell * static_cast<double>(i) + cell / 2.0 + 4
            << "'>task " << task_ids[i] << "</text>\n";
        for (size_t j = 0; j < cols; ++j) {
            const double frac =
                static_cast<double>(counts[i][j]) / static_cast<double>(max_count);
            const int shade = 255 - static_cast<int>(std::round(215.0 * frac));
            out << "<rect x='" << left + cell * static_cast<double>(j) << "' y='"
                << top + cell * static_cast<double>(i) << "' width='" << cell - 2 << "' height='"
                << cell - 2 << "' fill='rgb(" << shade << ',' << shade << ",255)' stroke='#ccc'/>"
                << "\n";
        }
    }
    out << "</svg>\n";
}

std::vector<TaskStats> load_per_task_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::string line;
    if (!std::getline(in, line) ||
        line != "task_id,mean_return,std_return,success_rate,std_success") {
        throw FormatError("unexpected per-task header in " + path);
    }
    std::vector<TaskStats> stats;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != 5) throw FormatError("bad per-task row in " + path);
        TaskStats t;
        t.task_id = static_cast<int>(parse_double(cells[0], path));
        t.mean_return = parse_double(cells[1], path);
        t.std_return = parse_double(cells[2], path);
        t.success_rate = parse_double(cells[3], path);
        t.std_success = parse_double(cells[4], path);
        stats.push_back(t);
    }
    return stats;
}

std::vector<std::string> emit_comparison_report(const std::vector<std::string>& run_dirs,
                                                const std::string& out_dir) {
    if (run_dirs.empty()) throw ConfigError("report needs at least one run directory");
    fs::create_directories(out_dir);

    std::vector<std::string> gaps;
    std::vector<ReportSeries> series;
    std::string heatmap_source;
    for (const auto& dir : run_dirs) {
        const std::string per_task = RunPaths{dir}.report_dir() + "/per_task.csv";
        if (!fs::exists(per_task)) {
            gaps.push_back(dir + ": missing " + per_task);
            continue;
        }
        ReportSeries s;
        s.label = fs::path(dir).filename().string();
        s.per_task = load_per_task_csv(per_task);
        series.push_back(std::move(s));
        if (heatmap_source.empty() && fs::exists(RunPaths{dir}.usage_matrix_path())) {
            heatmap_source = dir;
        }
    }

    if (!series.empty()) {
        // Charts only make sense over a shared task set; runs with a
        // different set are listed as gaps instead of breaking the chart.
        const size_t front_tasks = series.front().per_task.size();
        const std::string front_label = series.front().label;
        std::vector<ReportSeries> aligned;
        for (auto& s : series) {
            if (s.per_task.size() == front_tasks) {
                aligned.push_back(std::move(s));
            } else {
                gaps.push_back(s.label + ": task set differs from " + front_label);
            }
        }
        write_bar_chart_svg(out_dir + "/returns.svg", "Mean return per task (std over seeds)",
                            "mean_return", aligned);
        write_bar_chart_svg(out_dir + "/success.svg", "Success rate per task (std over seeds)",
                            "success_rate", aligned);

        std::ofstream table(out_dir + "/comparison.csv");
        if (!table) throw IoError("cannot write comparison table");
        table << "run,task_id,mean_return,std_return,success_rate,std_success\n";
        for (const auto& s : aligned) {
            for (const auto& t : s.per_task) {
                table << s.label << ',' << t.task_id << ',' << fmt(t.mean_return) << ','
                      << fmt(t.std_return) << ',' << fmt(t.success_rate) << ','
                      << fmt(t.std_success) << '\n';
            }
        }
    }

    if (!heatmap_source.empty()) {
        // Evaluation rows of the stored usage matrix.
        std::ifstream in(RunPaths{heatmap_source}.usage_matrix_path());
        std::string line;
        std::getline(in, line);  // header
        std::vector<int> tasks;
        std::vector<std::vector<uint64_t>> counts;
        while (std::getline(in, line)) {
            if (line.rfind("eval,", 0) != 0) continue;
            const auto cells = split(line, ',');
            tasks.push_back(static_cast<int>(parse_double(cells[1], heatmap_source)));
            std::vector<uint64_t> row;
            for (size_t j = 2; j < cells.size(); ++j) {
                row.push_back(parse_u64(cells[j], heatmap_source));
            }
            counts.push_back(std::move(row));
        }
        if (!counts.empty()) {
            write_heatmap_svg(out_dir + "/skill_usage.svg", "Evaluation skill usage", tasks,
                              counts);
        }
    }

    if (!gaps.empty()) {
        std::ofstream out(out_dir + "/gaps.txt");
        for (const auto& g : gaps) out << g << '\n';
    }
    return gaps;
}

}  // namespace goskill::run

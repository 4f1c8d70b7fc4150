// Python bindings for the main operations: config, dataset collection, the
// training/baseline pipelines, evaluation, fine-tuning, and report emission.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "goskill/pipeline.hpp"

namespace py = pybind11;
using namespace goskill;
using namespace goskill::run;

PYBIND11_MODULE(_goskill, m) {
    m.doc() = "Goal-conditioned skill extraction and hierarchical policy learning";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_FloatingPointError);

    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_readwrite("tasks", &RunConfig::tasks)
        .def_readwrite("episodes_per_task", &RunConfig::episodes_per_task)
        .def_readwrite("preset", &RunConfig::preset)
        .def_readwrite("data_seed", &RunConfig::data_seed)
        .def_readwrite("model_dim", &RunConfig::model_dim)
        .def_readwrite("n_heads", &RunConfig::n_heads)
        .def_readwrite("n_layers", &RunConfig::n_layers)
        .def_readwrite("dropout", &RunConfig::dropout)
        .def_readwrite("context_points", &RunConfig::context_points)
        .def_readwrite("prompt_points", &RunConfig::prompt_points)
        .def_readwrite("batch_per_task", &RunConfig::batch_per_task)
        .def_readwrite("lr", &RunConfig::lr)
        .def_readwrite("grad_clip", &RunConfig::grad_clip)
        .def_readwrite("horizon", &RunConfig::horizon)
        .def_readwrite("codebook_size", &RunConfig::codebook_size)
        .def_readwrite("latent_dim", &RunConfig::latent_dim)
        .def_readwrite("encoder_hidden", &RunConfig::encoder_hidden)
        .def_readwrite("alpha", &RunConfig::alpha)
        .def_readwrite("gamma", &RunConfig::gamma)
        .def_readwrite("batch_per_class", &RunConfig::batch_per_class)
        .def_readwrite("rtg_scale", &RunConfig::rtg_scale)
        .def_readwrite("iterations_extraction", &RunConfig::iterations_extraction)
        .def_readwrite("iterations_enhancement", &RunConfig::iterations_enhancement)
        .def_readwrite("iterations_policy", &RunConfig::iterations_policy)
        .def_readwrite("parallel_phases", &RunConfig::parallel_phases)
        .def_readwrite("use_reached_goal", &RunConfig::use_reached_goal)
        .def_readwrite("use_vq", &RunConfig::use_vq)
        .def_readwrite("action_encoded", &RunConfig::action_encoded)
        .def_readwrite("use_focal", &RunConfig::use_focal)
        .def_readwrite("use_resample", &RunConfig::use_resample)
        .def_readwrite("seed", &RunConfig::seed)
        .def_readwrite("eval_episodes", &RunConfig::eval_episodes)
        .def_readwrite("eval_seeds", &RunConfig::eval_seeds)
        .def_readwrite("eval_base_seed", &RunConfig::eval_base_seed)
        .def_readwrite("max_steps", &RunConfig::max_steps)
        .def("validate", &RunConfig::validate)
        .def("set", &apply_override, py::arg("assignment"),
             "Apply one 'key=value' override")
        .def("text", &serialize_config, "The config in its key=value file format")
        .def_static("from_text", &parse_config_text, py::arg("text"));

    m.def("apply_ablation", &apply_ablation, py::arg("config"), py::arg("name"));
    m.def("ablation_names", &ablation_names);
    m.def("load_config", &load_config, py::arg("path"));
    m.def("save_config", &save_config, py::arg("config"), py::arg("path"));
    m.def("training_task_ids", &env::training_task_ids);
    m.def("holdout_task_ids", &env::holdout_task_ids);

    py::class_<env::Dataset>(m, "Dataset")
        .def_property_readonly("task_count",
                               [](const env::Dataset& d) { return d.tasks.size(); })
        .def_property_readonly("trajectory_count", &env::Dataset::trajectory_count)
        .def_property_readonly("content_hash", &env::Dataset::content_hash);

    m.def("collect", &collect_for_config, py::arg("config"),
          "Collect the dataset the config describes (preset, tasks, episodes, seed)");
    m.def("save_dataset", &env::save_dataset, py::arg("dataset"), py::arg("dir"));
    m.def("load_dataset", &env::load_dataset, py::arg("dir"));

    py::class_<PhaseRecord>(m, "PhaseRecord")
        .def_readonly("name", &PhaseRecord::name)
        .def_readonly("completed", &PhaseRecord::completed)
        .def_readonly("seconds", &PhaseRecord::seconds)
        .def_readonly("final_loss", &PhaseRecord::final_loss)
        .def_readonly("checksum", &PhaseRecord::checksum);

    py::class_<RunManifest>(m, "RunManifest")
        .def_readonly("config", &RunManifest::config)
        .def_readonly("dataset_hash", &RunManifest::dataset_hash)
        .def_readonly("phases", &RunManifest::phases)
        .def_readonly("eval_mean_return", &RunManifest::eval_mean_return)
        .def_readonly("eval_success_rate", &RunManifest::eval_success_rate)
        .def_readonly("completed", &RunManifest::completed)
        .def("phase",
             [](const RunManifest& manifest, const std::string& name)
                 -> std::optional<PhaseRecord> {
                 const PhaseRecord* p = manifest.phase(name);
                 if (p == nullptr) return std::nullopt;
                 return *p;
             },
             py::arg("name"))
        .def("text", &serialize_manifest);

    m.def("load_manifest", &load_manifest, py::arg("path"));

    py::class_<TaskStats>(m, "TaskStats")
        .def_readonly("task_id", &TaskStats::task_id)
        .def_readonly("mean_return", &TaskStats::mean_return)
        .def_readonly("std_return", &TaskStats::std_return)
        .def_readonly("success_rate", &TaskStats::success_rate)
        .def_readonly("std_success", &TaskStats::std_success);

    py::class_<EpisodeSummary>(m, "EpisodeSummary")
        .def_readonly("task_id", &EpisodeSummary::task_id)
        .def_readonly("seed_index", &EpisodeSummary::seed_index)
        .def_readonly("episode_index", &EpisodeSummary::episode_index)
        .def_readonly("seed", &EpisodeSummary::seed)
        .def_readonly("episode_return", &EpisodeSummary::episode_return)
        .def_readonly("success", &EpisodeSummary::success)
        .def_readonly("numeric_error", &EpisodeSummary::numeric_error);

    py::class_<EvalReport>(m, "EvalReport")
        .def_readonly("per_task", &EvalReport::per_task)
        .def_readonly("mean_return", &EvalReport::mean_return)
        .def_readonly("success_rate", &EvalReport::success_rate)
        .def_readonly("episodes", &EvalReport::episodes)
        .def_readonly("skill_usage", &EvalReport::skill_usage);

    py::class_<FinetuneOutcome>(m, "FinetuneOutcome")
        .def_readonly("manifest", &FinetuneOutcome::manifest)
        .def_readonly("zero_shot", &FinetuneOutcome::zero_shot)
        .def_readonly("finetuned", &FinetuneOutcome::finetuned);

    m.def("run_pipeline", &run_pipeline, py::arg("config"), py::arg("data"), py::arg("run_dir"),
          "Extraction, freezing, enhancement + policy learning, checkpoint, evaluation");
    m.def("baseline_pipeline", &baseline_pipeline, py::arg("config"), py::arg("data"),
          py::arg("run_dir"), "The flat prompt-conditioned baseline under the same protocol");
    m.def("evaluate_run", &evaluate_run, py::arg("run_dir"), py::arg("out_dir"));
    m.def("finetune_pipeline", &finetune_pipeline, py::arg("pretrain_dir"), py::arg("new_data"),
          py::arg("new_tasks"), py::arg("iterations"), py::arg("run_dir"));
    m.def("emit_comparison_report", &emit_comparison_report, py::arg("run_dirs"),
          py::arg("out_dir"), "Returns the list of gaps (missing artifacts)");
}

"""Goal-conditioned skill extraction and hierarchical policy learning.

The heavy lifting lives in the compiled ``_goskill`` module; this package
re-exports its public surface.
"""

from ._goskill import (
    ConfigError,
    DataError,
    Dataset,
    EpisodeSummary,
    EvalReport,
    FinetuneOutcome,
    FormatError,
    IoError,
    NumericError,
    PhaseRecord,
    RunConfig,
    RunManifest,
    TaskStats,
    ablation_names,
    apply_ablation,
    baseline_pipeline,
    collect,
    emit_comparison_report,
    evaluate_run,
    finetune_pipeline,
    holdout_task_ids,
    load_config,
    load_dataset,
    load_manifest,
    run_pipeline,
    save_config,
    save_dataset,
    training_task_ids,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Dataset",
    "EpisodeSummary",
    "EvalReport",
    "FinetuneOutcome",
    "FormatError",
    "IoError",
    "NumericError",
    "PhaseRecord",
    "RunConfig",
    "RunManifest",
    "TaskStats",
    "ablation_names",
    "apply_ablation",
    "baseline_pipeline",
    "collect",
    "emit_comparison_report",
    "evaluate_run",
    "finetune_pipeline",
    "holdout_task_ids",
    "load_config",
    "load_dataset",
    "load_manifest",
    "run_pipeline",
    "save_config",
    "save_dataset",
    "training_task_ids",
]

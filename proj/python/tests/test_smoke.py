"""End-to-end smoke tests for the Python surface of the toolkit."""

import pytest

import goskill as gs


def tiny_config():
    cfg = gs.RunConfig()
    cfg.tasks = [0, 1]
    cfg.episodes_per_task = 6
    cfg.data_seed = 21
    cfg.model_dim = 16
    cfg.n_heads = 1
    cfg.n_layers = 1
    cfg.dropout = 0.0
    cfg.context_points = 4
    cfg.prompt_points = 2
    cfg.batch_per_task = 2
    cfg.codebook_size = 4
    cfg.latent_dim = 4
    cfg.encoder_hidden = 16
    cfg.batch_per_class = 1
    cfg.iterations_extraction = 6
    cfg.iterations_enhancement = 4
    cfg.iterations_policy = 4
    cfg.eval_episodes = 2
    cfg.eval_seeds = 2
    cfg.max_steps = 30
    return cfg


def test_config_round_trip():
    cfg = tiny_config()
    cfg.validate()
    clone = gs.RunConfig.from_text(cfg.text())
    assert clone.text() == cfg.text()
    cfg.set("horizon=5")
    assert cfg.horizon == 5
    with pytest.raises(ValueError):
        cfg.set("horizn=5")
    with pytest.raises(ValueError):
        gs.apply_ablation(cfg, "no-goals")
    assert gs.ablation_names() == ["no-rg", "no-vq", "ae", "no-focal", "no-resample"]


def test_task_suite_split():
    assert len(gs.training_task_ids()) == 8
    assert gs.holdout_task_ids() == [8, 9]


def test_dataset_collection(tmp_path):
    cfg = tiny_config()
    data = gs.collect(cfg)
    assert data.task_count == 2
    assert data.trajectory_count == 12

    gs.save_dataset(data, str(tmp_path / "data"))
    reloaded = gs.load_dataset(str(tmp_path / "data"))
    assert reloaded.content_hash == data.content_hash

    cfg.preset = "sub-optimal"
    half = gs.collect(cfg)
    assert half.trajectory_count == 6


def test_pipeline_and_evaluation(tmp_path):
    cfg = tiny_config()
    data = gs.collect(cfg)
    run_dir = str(tmp_path / "run")
    manifest = gs.run_pipeline(cfg, data, run_dir)

    assert manifest.completed
    assert manifest.dataset_hash == data.content_hash
    assert [p.name for p in manifest.phases] == [
        "extraction",
        "assignment",
        "enhancement",
        "policy",
        "evaluation",
    ]
    assert manifest.phase("assignment").checksum != 0
    assert manifest.phase("missing") is None

    stored = gs.load_manifest(run_dir + "/manifest.txt")
    assert stored.text() == manifest.text()

    report = gs.evaluate_run(run_dir, str(tmp_path / "reeval"))
    assert report.mean_return == manifest.eval_mean_return
    assert [t.task_id for t in report.per_task] == [0, 1]
    assert len(report.episodes) == 2 * 2 * 2  # tasks x seeds x episodes


def test_baseline_finetune_and_report(tmp_path):
    cfg = tiny_config()
    data = gs.collect(cfg)
    run_dir = str(tmp_path / "run")
    base_dir = str(tmp_path / "base")
    gs.run_pipeline(cfg, data, run_dir)
    gs.baseline_pipeline(cfg, data, base_dir)

    new_cfg = tiny_config()
    new_cfg.tasks = [8]
    new_cfg.episodes_per_task = 4
    new_data = gs.collect(new_cfg)
    outcome = gs.finetune_pipeline(run_dir, new_data, [8], 6, str(tmp_path / "ft"))
    assert outcome.manifest.completed
    # The skill space stays pinned through adaptation.
    assert (
        outcome.manifest.phase("finetune").checksum
        == outcome.manifest.phase("load_pretrained").checksum
    )
    assert outcome.zero_shot.per_task[0].task_id == 8

    gaps = gs.emit_comparison_report(
        [run_dir, base_dir, str(tmp_path / "missing")], str(tmp_path / "cmp")
    )
    assert len(gaps) == 1
    assert (tmp_path / "cmp" / "returns.svg").exists()

    with pytest.raises(ValueError):
        gs.run_pipeline(gs.RunConfig.from_text("tasks=0\nmodel_dim=15\n"), data, run_dir)

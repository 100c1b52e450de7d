import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from pointlift import pipeline
from pointlift.cli import main
from pointlift.distill import TrainConfig
from pointlift.errors import MissingInputError
from pointlift.scene import SceneSpec, demo_town
from pointlift.viewgen import ViewParams


def tiny_config(out_dir, seed=3, **kw) -> pipeline.PipelineConfig:
    base = dict(
        seed=seed,
        out_dir=str(out_dir),
        scene=demo_town(density=3.0),
        views=ViewParams(grid_k=1, angle_step_deg=180, height=96, width=96),
        train=TrainConfig(epochs=5, batch_size=4096),
        feature_dim=16,
        min_mask_px=8,
    )
    base.update(kw)
    return pipeline.PipelineConfig(**base)


def artifact_bytes(run_dir) -> dict[str, bytes]:
    run_dir = Path(run_dir)
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.suffix != ".json":  # metrics carry wall-clock times
            out[str(p.relative_to(run_dir))] = p.read_bytes()
    return out


def test_end2end_emits_miou(tmp_path):
    cfg = tiny_config(tmp_path / "run")
    doc = pipeline.end2end(cfg)
    assert "mIoU" in doc and 0.0 <= doc["mIoU"] <= 1.0
    on_disk = json.loads((tmp_path / "run" / "eval" / "metrics.json").read_text())
    assert on_disk["mIoU"] == doc["mIoU"]
    assert (tmp_path / "run" / "config.resolved.json").exists()


def test_chained_stages_equal_end2end(tmp_path):
    cfg_a = tiny_config(tmp_path / "a")
    pipeline.end2end(cfg_a)
    cfg_b = tiny_config(tmp_path / "b")
    pipeline.stage_gen_scene(cfg_b)
    pipeline.stage_render(cfg_b)
    pipeline.stage_extract(cfg_b)
    pipeline.stage_lift(cfg_b)
    pipeline.stage_distill(cfg_b)
    pipeline.stage_segment(cfg_b)
    pipeline.stage_eval(cfg_b)
    a, b = artifact_bytes(tmp_path / "a"), artifact_bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    for k in a:
        assert a[k] == b[k], f"artifact differs: {k}"
    ma = json.loads((tmp_path / "a" / "eval" / "metrics.json").read_text())
    mb = json.loads((tmp_path / "b" / "eval" / "metrics.json").read_text())
    ma.pop("wall_seconds", None)
    mb.pop("wall_seconds", None)
    assert ma == mb


def test_render_is_deterministic(tmp_path):
    for sub in ("r1", "r2"):
        cfg = tiny_config(tmp_path / sub)
        pipeline.stage_gen_scene(cfg)
        pipeline.stage_render(cfg)
    a, b = artifact_bytes(tmp_path / "r1"), artifact_bytes(tmp_path / "r2")
    assert a.keys() == b.keys()
    for k in a:
        assert a[k] == b[k]


def test_same_seed_same_metrics_different_seed_differs(tmp_path):
    doc1 = pipeline.end2end(tiny_config(tmp_path / "s1", seed=5))
    doc2 = pipeline.end2end(tiny_config(tmp_path / "s2", seed=5))
    assert doc1["all"] == doc2["all"]
    p1 = np.load(tmp_path / "s1" / "segment" / "predictions.npy")
    p2 = np.load(tmp_path / "s2" / "segment" / "predictions.npy")
    assert np.array_equal(p1, p2)


def test_files_provider_matches_oracle(tmp_path):
    cfg_o = tiny_config(tmp_path / "oracle")
    pipeline.end2end(cfg_o)
    cfg_f = tiny_config(
        tmp_path / "files",
        provider="files",
        masks_dir=str(tmp_path / "oracle" / "masks"),
        text_source="file",
        table_path=str(tmp_path / "oracle" / "masks" / "table.ou3t"),
    )
    pipeline.end2end(cfg_f)
    lib_o = (tmp_path / "oracle" / "lift" / "library.ou3f").read_bytes()
    lib_f = (tmp_path / "files" / "lift" / "library.ou3f").read_bytes()
    assert lib_o == lib_f
    po = np.load(tmp_path / "oracle" / "segment" / "predictions.npy")
    pf = np.load(tmp_path / "files" / "segment" / "predictions.npy")
    assert np.array_equal(po, pf)


def test_segment_before_distill_raises(tmp_path):
    cfg = tiny_config(tmp_path / "run")
    pipeline.stage_gen_scene(cfg)
    pipeline.stage_render(cfg)
    pipeline.stage_extract(cfg)
    pipeline.stage_lift(cfg)
    with pytest.raises(MissingInputError, match="field.ou3v"):
        pipeline.stage_segment(cfg)


def test_stage_requires_upstream(tmp_path):
    cfg = tiny_config(tmp_path / "run")
    with pytest.raises(MissingInputError, match="cloud.ply"):
        pipeline.stage_render(cfg)


def test_config_round_trip_and_echo(tmp_path):
    cfg = tiny_config(tmp_path / "run").resolve()
    back = pipeline.PipelineConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    pipeline.stage_gen_scene(cfg)
    echoed = json.loads((tmp_path / "run" / "config.resolved.json").read_text())
    resolved = pipeline.PipelineConfig.from_dict(echoed)
    assert resolved.views.seed == cfg.resolve().views.seed
    assert resolved.scene.seed == cfg.resolve().scene.seed


def test_unknown_config_key_rejected():
    with pytest.raises(Exception, match="unknown config keys"):
        pipeline.PipelineConfig.from_dict({"not_a_field": 1})


def test_query_restricts_classes(tmp_path):
    cfg = tiny_config(tmp_path / "run")
    pipeline.end2end(cfg)
    pipeline.stage_segment(cfg, query_text="building")
    res = json.loads((tmp_path / "run" / "segment" / "result.json").read_text())
    assert res["classes"] == ["building"]
    preds = np.load(tmp_path / "run" / "segment" / "predictions.npy")
    assert (preds == 0).all()


def test_segment_heatmap_written(tmp_path):
    cfg = tiny_config(tmp_path / "run")
    pipeline.end2end(cfg)
    pipeline.stage_segment(cfg, heatmap_class="tree")
    assert (tmp_path / "run" / "segment" / "heatmap_tree.ply").exists()


# --- CLI ------------------------------------------------------------------------

def write_cli_config(tmp_path, out_dir) -> Path:
    cfg = tiny_config(out_dir)
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg.to_dict()))
    return p


def test_cli_end2end_and_stage_chain(tmp_path):
    runner = CliRunner()
    cfg_path = write_cli_config(tmp_path, tmp_path / "cli_run")
    res = runner.invoke(main, ["end2end", "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output
    doc = json.loads(res.output)
    assert "mIoU" in doc


def test_cli_error_is_machine_readable(tmp_path):
    runner = CliRunner()
    cfg_path = write_cli_config(tmp_path, tmp_path / "cli_err")
    res = runner.invoke(main, ["segment", "--config", str(cfg_path), "--query", "building"])
    assert res.exit_code == 1
    err = json.loads(res.output.strip().splitlines()[-1])
    assert err["stage"] == "segment"
    assert err["type"] == "MissingInputError"


def test_cli_override_flags(tmp_path):
    runner = CliRunner()
    cfg_path = write_cli_config(tmp_path, tmp_path / "cli_o")
    res = runner.invoke(main, [
        "gen-scene", "--config", str(cfg_path), "--out", str(tmp_path / "cli_o2"),
        "--seed", "11", "--K", "2", "--alpha", "0.25",
    ])
    assert res.exit_code == 0, res.output
    echoed = json.loads((tmp_path / "cli_o2" / "config.resolved.json").read_text())
    assert echoed["seed"] == 11
    assert echoed["views"]["grid_k"] == 2
    assert echoed["fusion"]["alpha"] == 0.25


def test_env_var_sets_default_threads(tmp_path, monkeypatch):
    from pointlift.cli import _load_config

    monkeypatch.setenv("POINTLIFT_THREADS", "3")
    cfg = _load_config(None, str(tmp_path / "o"), None, None)
    assert cfg.threads == 3
    monkeypatch.delenv("POINTLIFT_THREADS")
    cfg = _load_config(None, str(tmp_path / "o"), None, None)
    assert cfg.threads == 1  # config default


def test_cli_sweep_single_cell(tmp_path):
    runner = CliRunner()
    cfg = tiny_config(tmp_path / "sweep_run", train=TrainConfig(epochs=2, batch_size=4096))
    cfg_path = tmp_path / "sweep_cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    res = runner.invoke(main, ["sweep", "--config", str(cfg_path)])
    assert res.exit_code == 0, res.output
    csv_lines = (tmp_path / "sweep_run" / "sweep.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 2  # header + 1 default cell

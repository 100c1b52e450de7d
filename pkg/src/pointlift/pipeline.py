"""Pipeline stages and their on-disk contract.

Every stage reads its inputs from the run directory and writes its outputs
there, so running `end2end` is literally running the stages back to back:
chained subcommands and the one-shot run produce byte-identical artifacts.

Run directory layout:

    config.resolved.json        fully resolved config (defaults filled)
    scene/cloud.ply             input or generated scene
    views/rigs.json             camera rig bundle
    views/view_<id>.png|.depth|.idx
    masks/table.ou3t            text embedding table
    masks/view_<id>.ou3d        per-view mask sets
    lift/library.ou3f           fused per-point 2D features
    lift/coverage.json|.npy     S_R and the rendered-points bitmap
    distill/field.ou3v          trained voxel feature field
    distill/loss_curve.csv
    segment/predictions.npy     per-point class indices (into result classes)
    segment/result.json
    eval/metrics.json

All randomness flows from the single `seed`: each stage derives its own
stream (scene, views, oracle, sbff, train, table) via seeding.derive_seed.
"""

from __future__ import annotations

import dataclasses
import json
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distill as distill_mod
from . import liftfuse, metrics, query, render, vlmio
from .errors import ConfigError, MissingInputError
from .scene import PointCloud, SceneSpec, demo_town, generate_scene, load_cloud, write_cloud
from .seeding import derive_seed
from .viewgen import ViewParams, all_rigs, rigs_from_json, rigs_to_json
from .scene import bounding_box

STAGES = ("gen-scene", "render", "extract", "lift", "distill", "segment", "eval")


@dataclass
class PipelineConfig:
    """One config drives every stage; defaults follow the documented best cell
    (K=4, A=90, R=0.5), alpha=0.1, and 0.2 m voxels."""

    seed: int = 0
    out_dir: str = "run"
    cloud_path: str | None = None        # input PLY; None -> generate `scene`
    scene: SceneSpec | None = None       # None -> demo town
    views: ViewParams = field(default_factory=ViewParams)
    splat_px: int = 3
    eps_rel: float = liftfuse.DEFAULT_EPS_REL
    provider: str = "oracle"             # "oracle" | "files"
    masks_dir: str | None = None         # provider="files": directory of .ou3d
    oracle_noise: float = 0.0
    min_mask_px: int = 64                # oracle drops components smaller than this
    text_source: str = "synthetic"       # "synthetic" | "file"
    table_mode: str = "orthogonal"       # "orthogonal" | "random"
    table_path: str | None = None
    feature_dim: int = 64
    sbff: liftfuse.SbffParams = field(default_factory=liftfuse.SbffParams)
    voxel_size: float = 0.2
    train: distill_mod.TrainConfig = field(default_factory=distill_mod.TrainConfig)
    fusion: query.FusionParams = field(default_factory=query.FusionParams)
    threads: int = 1

    def __post_init__(self):
        if self.provider not in ("oracle", "files"):
            raise ConfigError(f"unknown provider {self.provider!r}")
        if self.text_source not in ("synthetic", "file"):
            raise ConfigError(f"unknown text source {self.text_source!r}")
        if self.provider == "files" and not self.masks_dir:
            raise ConfigError("provider 'files' requires masks_dir")
        if self.text_source == "file" and not self.table_path:
            raise ConfigError("text_source 'file' requires table_path")

    def resolve(self) -> "PipelineConfig":
        """Fill every derived seed from the master seed."""
        scene = self.scene if self.scene is not None else demo_town()
        scene = dataclasses.replace(scene, seed=derive_seed(self.seed, "scene"))
        views = dataclasses.replace(self.views, seed=derive_seed(self.seed, "views"))
        sbff = dataclasses.replace(self.sbff, seed=derive_seed(self.seed, "sbff"))
        train = dataclasses.replace(self.train, seed=derive_seed(self.seed, "train"))
        return dataclasses.replace(self, scene=scene, views=views, sbff=sbff, train=train)

    # --- JSON -------------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.scene is not None:
            d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if d.get("scene") is not None:
            d["scene"] = SceneSpec.from_dict(d["scene"])
        if "views" in d:
            d["views"] = ViewParams(**d["views"])
        if "sbff" in d:
            d["sbff"] = liftfuse.SbffParams(**d["sbff"])
        if "train" in d:
            d["train"] = distill_mod.TrainConfig(**d["train"])
        if "fusion" in d:
            d["fusion"] = query.FusionParams(**d["fusion"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _run_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.out_dir)


def write_resolved_config(cfg: PipelineConfig) -> None:
    out = _run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=1))


def _require(stage: str, path: Path, hint: str = "") -> Path:
    if not path.exists():
        raise MissingInputError(stage, str(path), hint)
    return path


def _load_scene(stage: str, out: Path) -> PointCloud:
    return load_cloud(_require(stage, out / "scene" / "cloud.ply", "run gen-scene first"))


def _load_rigs(stage: str, out: Path):
    return rigs_from_json(_require(stage, out / "views" / "rigs.json", "run render first").read_text())


def _load_views(stage: str, out: Path, rigs):
    views = []
    for rig in rigs:
        _require(stage, out / "views" / f"view_{rig.name}.png", "run render first")
        views.append(render.load_view(out / "views", rig.name))
    return views


def _class_names(cloud: PointCloud) -> list[str]:
    if cloud.class_names:
        return list(cloud.class_names)
    if cloud.labels is None:
        raise ConfigError("cloud has neither class names nor labels")
    return [f"class_{i}" for i in range(int(cloud.labels.max()) + 1)]


# --- stages -----------------------------------------------------------------

def stage_gen_scene(cfg: PipelineConfig) -> Path:
    cfg = cfg.resolve()
    out = _run_dir(cfg)
    write_resolved_config(cfg)
    scene_dir = out / "scene"
    scene_dir.mkdir(parents=True, exist_ok=True)
    if cfg.cloud_path:
        cloud = load_cloud(_require("gen-scene", Path(cfg.cloud_path)))
    else:
        cloud = generate_scene(cfg.scene)
    write_cloud(cloud, scene_dir / "cloud.ply")
    return scene_dir / "cloud.ply"


def stage_render(cfg: PipelineConfig) -> Path:
    cfg = cfg.resolve()
    out = _run_dir(cfg)
    write_resolved_config(cfg)
    cloud = _load_scene("render", out)
    rigs = all_rigs(bounding_box(cloud), cfg.views)
    views_dir = out / "views"
    views_dir.mkdir(parents=True, exist_ok=True)
    (views_dir / "rigs.json").write_text(rigs_to_json(rigs))
    for view in render.render_views(cloud, rigs, cfg.splat_px, cfg.threads):
        render.save_view(view, views_dir)
    return views_dir


def stage_extract(cfg: PipelineConfig) -> Path:
    cfg = cfg.resolve()
    out = _run_dir(cfg)
    write_resolved_config(cfg)
    cloud = _load_scene("extract", out)
    rigs = _load_rigs("extract", out)
    masks_dir = out / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)

    if cfg.text_source == "file":
        table = vlmio.read_text_table(_require("extract", Path(cfg.table_path)))
        shutil.copyfile(cfg.table_path, masks_dir / "table.ou3t")
    else:
        table = vlmio.synthetic_text_table(
            _class_names(cloud), cfg.feature_dim, cfg.table_mode,
            seed=derive_seed(cfg.seed, "table"),
        )
        vlmio.write_text_table(table, masks_dir / "table.ou3t")

    if cfg.provider == "oracle":
        oracle_seed = derive_seed(cfg.seed, "oracle")
        for rig, view in zip(rigs, _load_views("extract", out, rigs)):
            ms = vlmio.oracle_masks(
                view, cloud, table, cfg.oracle_noise, oracle_seed,
                min_pixels=cfg.min_mask_px,
            )
            vlmio.write_maskset(ms, masks_dir / f"view_{rig.name}.ou3d")
    else:
        src = Path(cfg.masks_dir)
        for rig in rigs:
            f = _require("extract", src / f"view_{rig.name}.ou3d", "external provider output")
            ms = vlmio.read_maskset(f)  # validates format and invariants
            if ms.mask_map.shape != (rig.height, rig.width):
                raise ConfigError(
                    f"{f}: mask map {ms.mask_map.shape} does not match rig {rig.name} "
                    f"image size ({rig.height}, {rig.width})"
                )
            if ms.feature_dim != table.feature_dim:
                raise ConfigError(
                    f"{f}: feature dim {ms.feature_dim} != table dim {table.feature_dim}"
                )
            shutil.copyfile(f, masks_dir / f"view_{rig.name}.ou3d")
    return masks_dir


def stage_lift(cfg: PipelineConfig) -> Path:
    cfg = cfg.resolve()
    out = _run_dir(cfg)
    write_resolved_config(cfg)
    cloud = _load_scene("lift", out)
    rigs = _load_rigs("lift", out)
    views = _load_views("lift", out, rigs)
    masksets = [
        vlmio.read_maskset(_require("lift", out / "masks" / f"view_{r.name}.ou3d",
                                    "run extract first"))
        for r in rigs
    ]
    lib = liftfuse.build_library(
        cloud, views, rigs, masksets, cfg.sbff, cfg.eps_rel, cfg.threads
    )
    s_r, rendered = render.coverage_ratio(cloud, views, rigs, cfg.eps_rel)
    lift_dir = out / "lift"
    lift_dir.mkdir(parents=True, exist_ok=True)
    liftfuse.write_library(lib, lift_dir / "library.ou3f")
    np.save(lift_dir / "coverage.npy", rendered)
    (lift_dir / "coverage.json").write_text(
        json.dumps({"S_R": s_r, "n_points": len(cloud),
                    "n_rendered": int(rendered.sum()),
                    "n_with_features": int(lib.covered.sum())}, indent=1)
    )
    return lift_dir


def stage_distill(cfg: PipelineConfig) -> Path:
    cfg = cfg.resolve()
    out = _run_dir(cfg)
    write_resolved_config(cfg)
    cloud = _load_scene("distill", out)
    lib = liftfuse.read_library(
        _require("distill", out / "lift" / "library.ou3f", "run lift first")
    )
    fld = distill_mod.VoxelFeatureField.from_cloud(
        cloud, cfg.voxel_size, lib.feature_dim,
        seed=cfg.train.seed, init_sigma=cfg.train.init_sigma,
    )
    fld, curve = distill_mod.train(fld, cloud, lib, cfg.train)
    distill_dir = out / "distill"
    distill_dir.mkdir(parents=True, exist_ok=True)
    distill_mod.write_field(fld, distill_dir / "field.ou3v")
    distill_mod.write_loss_curve(curve, distill_dir / "loss_curve.csv")
    return distill_dir


def _load_lexicon(path: str | None, table: vlmio.TextEmbeddingTable) -> dict:
    lex = {name: [name] for name in table.class_names}
    if path:
        user = json.loads(Path(path).read_text())
        lex.update({k: list(v) for k, v in user.items()})
    return lex


def stage_segment(
    cfg: PipelineConfig, query_text: str = "", lexicon_path: str | None = None,
    heatmap_class: str | None = None,
) -> Path:
    cfg = cfg.resolve()
    out = _run_dir(cfg)
    write_resolved_config(cfg)
    cloud = _load_scene("segment", out)
    table = vlmio.read_text_table(
        _require("segment", out / "masks" / "table.ou3t", "run extract first")
    )
    lib = liftfuse.read_library(
        _require("segment", out / "lift" / "library.ou3f", "run lift first")
    )
    fld = distill_mod.read_field(
        _require("segment", out / "distill" / "field.ou3v",
                 "run distill first: fusion needs the 3D feature checkpoint")
    )
    f3d = fld.features(cloud.positions)

    classes = None
    if query_text:
        classes = query.parse_query(query_text, _load_lexicon(lexicon_path, table))
        if not classes:
            raise ConfigError(f"query {query_text!r} resolved to no known classes")
    result = query.segment(
        lib.features, f3d, lib.covered, table, cfg.fusion, classes, query_text,
        threads=cfg.threads,
    )
    seg_dir = out / "segment"
    seg_dir.mkdir(parents=True, exist_ok=True)
    np.save(seg_dir / "predictions.npy", result.predicted)
    counts = {
        name: int((result.predicted == i).sum()) for i, name in enumerate(result.classes)
    }
    (seg_dir / "result.json").write_text(
        json.dumps(
            {"query": result.query, "classes": result.classes,
             "mode": cfg.fusion.mode, "alpha": cfg.fusion.alpha,
             "n_points": len(cloud), "predicted_counts": counts},
            indent=1,
        )
    )
    if heatmap_class is not None:
        fused = query.fuse_features(lib.features, f3d, lib.covered, cfg.fusion)
        query.heatmap(
            cloud, fused, table.row(heatmap_class),
            seg_dir / f"heatmap_{heatmap_class}.ply",
        )
    return seg_dir


def stage_eval(cfg: PipelineConfig) -> dict:
    cfg = cfg.resolve()
    out = _run_dir(cfg)
    write_resolved_config(cfg)
    cloud = _load_scene("eval", out)
    if cloud.labels is None:
        raise ConfigError("eval requires a labeled cloud")
    names = _class_names(cloud)
    result_json = json.loads(
        _require("eval", out / "segment" / "result.json", "run segment first").read_text()
    )
    predicted = np.load(_require("eval", out / "segment" / "predictions.npy"))
    rendered = np.load(_require("eval", out / "lift" / "coverage.npy", "run lift first"))
    s_r = json.loads((out / "lift" / "coverage.json").read_text())["S_R"]

    # map prediction indices (over result classes) onto the cloud's label ids
    try:
        to_label = np.array([names.index(c) for c in result_json["classes"]], dtype=np.int64)
    except ValueError as e:
        raise ConfigError(f"predicted class not present in cloud classes: {e}")
    pred_labels = to_label[predicted]

    def as_dict(r: metrics.EvalResult) -> dict:
        return {
            "mIoU": r.miou,
            "mAcc": r.macc,
            "OA": r.oa,
            "per_class_iou": {
                n: (None if np.isnan(v) else float(v))
                for n, v in zip(names, r.per_class_iou)
            },
        }

    res_all = metrics.evaluate(pred_labels, cloud.labels, len(names))
    res_cov = metrics.evaluate(pred_labels, cloud.labels, len(names), mask=rendered)
    doc = {
        "mIoU": res_all.miou,
        "S_R": s_r,
        "all": as_dict(res_all),
        "covered": as_dict(res_cov),
        "query": result_json["query"],
        "mode": result_json["mode"],
        "alpha": result_json["alpha"],
    }
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / "metrics.json").write_text(json.dumps(doc, indent=1))
    return doc


def end2end(cfg: PipelineConfig, query_text: str = "") -> dict:
    """Run every stage in order through the same file interfaces."""
    t0 = time.perf_counter()
    stage_gen_scene(cfg)
    stage_render(cfg)
    stage_extract(cfg)
    stage_lift(cfg)
    stage_distill(cfg)
    stage_segment(cfg, query_text)
    doc = stage_eval(cfg)
    doc["wall_seconds"] = time.perf_counter() - t0
    (Path(cfg.out_dir) / "eval" / "metrics.json").write_text(json.dumps(doc, indent=1))
    return doc


def run_sweep_cell(cell, seed: int, workdir, base_config: PipelineConfig | None = None) -> dict:
    """Full pipeline for one ablation cell; returns the sweep CSV fields."""
    base = base_config if base_config is not None else PipelineConfig()
    cfg = dataclasses.replace(
        base,
        seed=seed,
        out_dir=str(workdir),
        views=dataclasses.replace(
            base.views, grid_k=cell.grid_k, angle_step_deg=cell.angle_step_deg,
            radius_div=cell.radius_div,
        ),
        sbff=dataclasses.replace(base.sbff, enabled=cell.sbff, k=cell.k_topk),
        fusion=dataclasses.replace(base.fusion, alpha=cell.alpha),
        splat_px=cell.splat_px,
    ).resolve()
    doc = end2end(cfg)
    return {
        "S_R": doc["S_R"],
        "mIoU": doc["all"]["mIoU"],
        "mAcc": doc["all"]["mAcc"],
        "OA": doc["all"]["OA"],
        "per_class_iou": doc["all"]["per_class_iou"],
        "wall_seconds": doc["wall_seconds"],
    }

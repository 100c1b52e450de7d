"""Command-line entry point.

One JSON config drives the whole pipeline; each stage is also exposed as a
subcommand over the same run directory, and `end2end` chains them all.
Failures exit nonzero with a machine-readable JSON error on stderr.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from functools import wraps
from pathlib import Path

import click

from . import pipeline
from .errors import PointliftError
from .metrics import SweepGrid, sweep as run_sweep

ENV_THREADS = "POINTLIFT_THREADS"


def _fail(stage: str, exc: Exception) -> None:
    doc = {"stage": stage, "error": str(exc), "type": type(exc).__name__}
    click.echo(json.dumps(doc), err=True)
    sys.exit(1)


def _load_config(config, out, seed, threads, **overrides) -> pipeline.PipelineConfig:
    if config:
        cfg = pipeline.PipelineConfig.from_dict(json.loads(Path(config).read_text()))
    else:
        cfg = pipeline.PipelineConfig()
    if out is not None:
        cfg = dataclasses.replace(cfg, out_dir=out)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if threads is None:
        threads = int(os.environ.get(ENV_THREADS, "0")) or cfg.threads
    cfg = dataclasses.replace(cfg, threads=threads)

    views = cfg.views
    if overrides.get("grid_k") is not None:
        views = dataclasses.replace(views, grid_k=overrides["grid_k"])
    if overrides.get("angle_step") is not None:
        views = dataclasses.replace(views, angle_step_deg=overrides["angle_step"])
    if overrides.get("radius_div") is not None:
        views = dataclasses.replace(views, radius_div=overrides["radius_div"])
    cfg = dataclasses.replace(cfg, views=views)
    if overrides.get("alpha") is not None:
        cfg = dataclasses.replace(
            cfg, fusion=dataclasses.replace(cfg.fusion, alpha=overrides["alpha"])
        )
    if overrides.get("sbff") is not None:
        cfg = dataclasses.replace(
            cfg, sbff=dataclasses.replace(cfg.sbff, enabled=overrides["sbff"])
        )
    if overrides.get("k_topk") is not None:
        cfg = dataclasses.replace(
            cfg, sbff=dataclasses.replace(cfg.sbff, k=overrides["k_topk"])
        )
    if overrides.get("splat") is not None:
        cfg = dataclasses.replace(cfg, splat_px=overrides["splat"])
    if overrides.get("noise") is not None:
        cfg = dataclasses.replace(cfg, oracle_noise=overrides["noise"])
    return cfg


def common_options(f):
    @click.option("--config", type=click.Path(exists=True), default=None, help="JSON pipeline config")
    @click.option("--out", default=None, help="run directory (overrides config)")
    @click.option("--seed", type=int, default=None, help="master seed (overrides config)")
    @click.option("--threads", type=int, default=None,
                  help=f"stage-internal parallelism (default ${ENV_THREADS} or config)")
    @click.option("--K", "grid_k", type=int, default=None, help="local anchor grid size")
    @click.option("--A", "angle_step", type=int, default=None, help="orbit angle step, degrees")
    @click.option("--R", "radius_div", type=float, default=None, help="local radius divisor")
    @click.option("--alpha", type=float, default=None, help="2D/3D fusion weight")
    @click.option("--sbff/--no-sbff", default=None, help="sample-balanced fusion on/off")
    @click.option("--k-topk", type=int, default=None, help="sbff top-k smallest masks")
    @click.option("--splat", type=int, default=None, help="splat size in pixels (odd)")
    @click.option("--noise", type=float, default=None, help="oracle feature noise scale")
    @wraps(f)
    def wrapper(*args, **kwargs):
        return f(*args, **kwargs)

    return wrapper


def _stage_command(name: str, runner):
    @main.command(name)
    @common_options
    def cmd(config, out, seed, threads, **overrides):
        try:
            cfg = _load_config(config, out, seed, threads, **overrides)
            result = runner(cfg)
            if isinstance(result, dict):
                click.echo(json.dumps(result, indent=1))
            else:
                click.echo(str(result))
        except PointliftError as e:
            _fail(name, e)
        except Exception as e:  # config parse errors, missing files, ...
            _fail(name, e)

    return cmd


@click.group()
def main():
    """Point cloud open-vocabulary segmentation pipeline."""


_stage_command("gen-scene", pipeline.stage_gen_scene)
_stage_command("render", pipeline.stage_render)
_stage_command("extract", pipeline.stage_extract)
_stage_command("lift", pipeline.stage_lift)
_stage_command("distill", pipeline.stage_distill)
_stage_command("eval", pipeline.stage_eval)


@main.command("segment")
@common_options
@click.option("--query", default="", help="free-text query; empty = all classes")
@click.option("--lexicon", type=click.Path(exists=True), default=None,
              help="JSON phrase -> class list map")
@click.option("--heatmap", "heatmap_class", default=None,
              help="also write a similarity heatmap PLY for this class")
def segment_cmd(config, out, seed, threads, query, lexicon, heatmap_class, **overrides):
    try:
        cfg = _load_config(config, out, seed, threads, **overrides)
        path = pipeline.stage_segment(cfg, query, lexicon, heatmap_class)
        click.echo(str(path))
    except PointliftError as e:
        _fail("segment", e)
    except Exception as e:
        _fail("segment", e)


@main.command("end2end")
@common_options
@click.option("--query", default="", help="free-text query; empty = all classes")
def end2end_cmd(config, out, seed, threads, query, **overrides):
    try:
        cfg = _load_config(config, out, seed, threads, **overrides)
        doc = pipeline.end2end(cfg, query)
        click.echo(json.dumps(doc, indent=1))
    except PointliftError as e:
        _fail("end2end", e)
    except Exception as e:
        _fail("end2end", e)


def _int_list(_ctx, _param, value):
    return [int(v) for v in value.split(",")] if value else None


def _float_list(_ctx, _param, value):
    return [float(v) for v in value.split(",")] if value else None


def _bool_list(_ctx, _param, value):
    if not value:
        return None
    return [v.strip().lower() in ("1", "true", "on") for v in value.split(",")]


@main.command("sweep")
@common_options
@click.option("--grid-K", "g_k", callback=_int_list, default=None, help="comma list of K values")
@click.option("--grid-A", "g_a", callback=_int_list, default=None, help="comma list of A values")
@click.option("--grid-R", "g_r", callback=_float_list, default=None, help="comma list of R values")
@click.option("--grid-alpha", "g_alpha", callback=_float_list, default=None)
@click.option("--grid-sbff", "g_sbff", callback=_bool_list, default=None)
@click.option("--grid-k-topk", "g_topk", callback=_int_list, default=None)
@click.option("--grid-splat", "g_splat", callback=_int_list, default=None)
@click.option("--jobs", type=int, default=1, help="concurrent sweep cells")
def sweep_cmd(config, out, seed, threads, jobs,
              g_k, g_a, g_r, g_alpha, g_sbff, g_topk, g_splat, **overrides):
    try:
        cfg = _load_config(config, out, seed, threads, **overrides)
        grid = SweepGrid(
            grid_k=g_k or [cfg.views.grid_k],
            angle_step_deg=g_a or [cfg.views.angle_step_deg],
            radius_div=g_r or [cfg.views.radius_div],
            alpha=g_alpha or [cfg.fusion.alpha],
            sbff=g_sbff or [cfg.sbff.enabled],
            k_topk=g_topk or [cfg.sbff.k],
            splat_px=g_splat or [cfg.splat_px],
        )
        rows = run_sweep(
            grid, cfg.out_dir, base_seed=cfg.seed, jobs=jobs,
            runner_kwargs={"base_config": cfg},
        )
        click.echo(f"{len(rows)} cells complete; CSV at {Path(cfg.out_dir) / 'sweep.csv'}")
    except PointliftError as e:
        _fail("sweep", e)
    except Exception as e:
        _fail("sweep", e)


if __name__ == "__main__":
    main()

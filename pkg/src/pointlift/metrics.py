"""Segmentation metrics and the ablation sweep harness.

evaluate() computes mIoU / mAcc / OA from an exact confusion matrix, with
the convention that classes absent from both truth and prediction drop out
of the means while classes present in truth but never predicted count as
zero IoU. The sweep harness runs the full pipeline over a parameter grid
with per-cell derived seeds, a resumable sorted CSV, and per-class JSON
reports.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .seeding import derive_seed


@dataclass
class ConfusionMatrix:
    """Row = ground truth class, column = predicted class."""

    counts: np.ndarray  # (C, C) int64

    @classmethod
    def from_labels(cls, pred, truth, n_classes: int) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64)
        truth = np.asarray(truth, dtype=np.int64)
        if pred.shape != truth.shape:
            raise ConfigError(f"length mismatch: {pred.shape} vs {truth.shape}")
        if len(pred) and (
            pred.min() < 0 or truth.min() < 0
            or pred.max() >= n_classes or truth.max() >= n_classes
        ):
            raise ConfigError("labels out of range")
        flat = truth * n_classes + pred
        counts = np.bincount(flat, minlength=n_classes * n_classes)
        return cls(counts.reshape(n_classes, n_classes))

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts)

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class EvalResult:
    miou: float
    macc: float
    oa: float
    per_class_iou: np.ndarray  # NaN for dropped classes
    per_class_acc: np.ndarray
    confusion: ConfusionMatrix


def evaluate(pred, truth, n_classes: int, mask=None) -> EvalResult:
    """Exact mIoU / mAcc / OA, optionally restricted to a point filter.

    Classes with TP+FP+FN == 0 are excluded from the mIoU/mAcc means (their
    per-class entries are NaN); a class that appears in truth but is never
    predicted contributes IoU 0.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ConfigError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        pred, truth = pred[mask], truth[mask]
    cm = ConfusionMatrix.from_labels(pred, truth, n_classes)
    tp, fp, fn = cm.tp.astype(np.float64), cm.fp.astype(np.float64), cm.fn.astype(np.float64)
    present = (tp + fp + fn) > 0
    iou = np.full(n_classes, np.nan)
    acc = np.full(n_classes, np.nan)
    denom = tp + fp + fn
    iou[present] = tp[present] / denom[present]
    truth_seen = (tp + fn) > 0
    acc[present & truth_seen] = tp[present & truth_seen] / (tp + fn)[present & truth_seen]
    acc[present & ~truth_seen] = 0.0  # predicted-only class: no truth points to get right
    miou = float(np.nanmean(iou)) if present.any() else float("nan")
    macc = float(np.nanmean(acc)) if present.any() else float("nan")
    oa = float(tp.sum() / cm.total) if cm.total else float("nan")
    return EvalResult(miou=miou, macc=macc, oa=oa, per_class_iou=iou, per_class_acc=acc, confusion=cm)


# --- sweep harness --------------------------------------------------------------

CSV_FIELDS = [
    "K", "A_deg", "R", "alpha", "sbff", "k_topk", "splat_px",
    "S_R", "mIoU", "mAcc", "OA", "wall_seconds",
]


@dataclass(frozen=True)
class SweepCell:
    grid_k: int
    angle_step_deg: int
    radius_div: float
    alpha: float
    sbff: bool
    k_topk: int
    splat_px: int

    def key(self) -> tuple:
        return (
            self.grid_k, self.angle_step_deg, self.radius_div, self.alpha,
            self.sbff, self.k_topk, self.splat_px,
        )

    def csv_prefix(self) -> dict:
        return {
            "K": self.grid_k,
            "A_deg": self.angle_step_deg,
            "R": f"{self.radius_div:g}",
            "alpha": f"{self.alpha:g}",
            "sbff": int(self.sbff),
            "k_topk": self.k_topk,
            "splat_px": self.splat_px,
        }

    def tag(self) -> str:
        p = self.csv_prefix()
        return (
            f"K{p['K']}_A{p['A_deg']}_R{p['R']}_a{p['alpha']}"
            f"_sbff{p['sbff']}_k{p['k_topk']}_s{p['splat_px']}"
        )


@dataclass
class SweepGrid:
    grid_k: list[int] = field(default_factory=lambda: [4])
    angle_step_deg: list[int] = field(default_factory=lambda: [90])
    radius_div: list[float] = field(default_factory=lambda: [0.5])
    alpha: list[float] = field(default_factory=lambda: [0.1])
    sbff: list[bool] = field(default_factory=lambda: [True])
    k_topk: list[int] = field(default_factory=lambda: [5])
    splat_px: list[int] = field(default_factory=lambda: [3])

    def cells(self) -> list[SweepCell]:
        combos = product(
            self.grid_k, self.angle_step_deg, self.radius_div, self.alpha,
            self.sbff, self.k_topk, self.splat_px,
        )
        return sorted((SweepCell(*c) for c in combos), key=lambda c: c.key())


def cell_seed(base_seed: int, cell: SweepCell) -> int:
    """Per-cell seed: base seed XOR a stable hash of the cell tag."""
    return (int(base_seed) ^ derive_seed(0, "sweep-cell", cell.tag())) & (2**63 - 1)


def _load_done(csv_path: Path) -> dict[str, dict]:
    done: dict[str, dict] = {}
    if csv_path.exists():
        with open(csv_path, newline="") as f:
            for row in csv.DictReader(f):
                cell = SweepCell(
                    grid_k=int(row["K"]),
                    angle_step_deg=int(row["A_deg"]),
                    radius_div=float(row["R"]),
                    alpha=float(row["alpha"]),
                    sbff=bool(int(row["sbff"])),
                    k_topk=int(row["k_topk"]),
                    splat_px=int(row["splat_px"]),
                )
                done[cell.tag()] = row
    return done


def _write_rows(csv_path: Path, rows: dict[str, dict]) -> None:
    ordered = sorted(rows.values(), key=lambda r: (
        int(r["K"]), int(r["A_deg"]), float(r["R"]), float(r["alpha"]),
        int(r["sbff"]), int(r["k_topk"]), int(r["splat_px"]),
    ))
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(ordered)


def sweep(
    grid: SweepGrid,
    out_dir,
    base_seed: int = 0,
    runner=None,
    jobs: int = 1,
    runner_kwargs: dict | None = None,
):
    """Run the pipeline over every grid cell; emit a sorted, resumable CSV.

    Completed cells found in an existing CSV are skipped. Cell failures are
    recorded in errors.json and the sweep continues. Returns the row dict
    keyed by cell tag.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    per_class_path = out / "per_class.json"
    errors_path = out / "errors.json"
    if runner is None:
        from .pipeline import run_sweep_cell  # deferred: pipeline imports metrics

        runner = run_sweep_cell
    runner_kwargs = runner_kwargs or {}

    rows = _load_done(csv_path)
    per_class: dict[str, dict] = (
        json.loads(per_class_path.read_text()) if per_class_path.exists() else {}
    )
    errors: dict[str, str] = {}
    todo = [c for c in grid.cells() if c.tag() not in rows]

    def run_one(cell: SweepCell):
        t0 = time.perf_counter()
        res = runner(cell, cell_seed(base_seed, cell), out / "cells" / cell.tag(), **runner_kwargs)
        wall = time.perf_counter() - t0
        return cell, res, wall

    def record(cell, res, wall):
        row = cell.csv_prefix()
        row.update(
            {
                "S_R": f"{res['S_R']:.6f}",
                "mIoU": f"{res['mIoU']:.6f}",
                "mAcc": f"{res['mAcc']:.6f}",
                "OA": f"{res['OA']:.6f}",
                "wall_seconds": f"{res.get('wall_seconds', wall):.3f}",
            }
        )
        rows[cell.tag()] = row
        if "per_class_iou" in res:
            per_class[cell.tag()] = {"per_class_iou": res["per_class_iou"]}
        _write_rows(csv_path, rows)
        per_class_path.write_text(json.dumps(per_class, indent=1, sort_keys=True))

    if jobs <= 1:
        for cell in todo:
            try:
                record(*run_one(cell))
            except Exception as e:  # record and continue
                errors[cell.tag()] = f"{type(e).__name__}: {e}"
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(run_one, cell): cell for cell in todo}
            for fut, cell in futures.items():
                try:
                    record(*fut.result())
                except Exception as e:
                    errors[cell.tag()] = f"{type(e).__name__}: {e}"
    if errors:
        errors_path.write_text(json.dumps(errors, indent=1, sort_keys=True))
    return rows

"""Train-and-evaluate workflows shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
import time
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig, apply_ablation
from .data import RegistrationPair
from .model import init_params, multiscale_forward
from .objectives import KeypointSet, dice_score, endpoint_error, per_label_dice, tre
from .params import ParameterSet
from .spatial import Volume3D, warp
from .train import train_stage

log = logging.getLogger(__name__)


def stage_rng(cfg: RunConfig, stage: int) -> np.random.Generator:
    """Per-stage generator, so a stage trains identically whether run alone or in a sequence."""
    return np.random.default_rng([cfg.seed, stage])


def train_model(
    cfg: RunConfig,
    pairs: Sequence[RegistrationPair],
    params: ParameterSet | None = None,
    stages: Sequence[int] | None = None,
    steps: int | None = None,
    on_stage_done: Callable[[int, ParameterSet, list[dict]], None] | None = None,
) -> tuple[ParameterSet, dict[int, list[dict]]]:
    """Train ``stages`` (default: all) coarse to fine; returns the parameters and per-stage loss traces."""
    cfg.validate()
    net = cfg.network
    if params is None:
        params = init_params(net, cfg.seed)
    stages = range(len(net.stages)) if stages is None else stages
    traces = {}
    for s in stages:
        t0 = time.perf_counter()
        traces[s] = train_stage(s, pairs, params, cfg, stage_rng(cfg, s), steps=steps)
        log.info("stage %d trained in %.0fs", s, time.perf_counter() - t0)
        if on_stage_done is not None:
            on_stage_done(s, params, traces[s])
    return params, traces


def field_metrics(
    field: np.ndarray,
    keypoints: KeypointSet | None = None,
    labels_fixed: Volume3D | np.ndarray | None = None,
    labels_moving: Volume3D | np.ndarray | None = None,
    gt_field: np.ndarray | None = None,
) -> dict:
    """TRE (mm), hard Dice of nearest-warped labels, and EPE (voxels) of one field.

    Metrics whose inputs are missing are reported as ``None``.
    """
    out: dict = {"tre_mm": None, "dice": None, "per_label": None, "epe_voxels": None}
    with T.no_grad():
        if keypoints is not None:
            out["tre_mm"] = tre(field, keypoints).item()
        if labels_fixed is not None and labels_moving is not None:
            lf = getattr(labels_fixed, "data", labels_fixed)
            lm = getattr(labels_moving, "data", labels_moving)
            warped = warp(lm, field, mode="nearest")
            ids = sorted((set(np.unique(lf).tolist()) | set(np.unique(lm).tolist())) - {0})
            out["dice"] = dice_score(warped, lf, ids)
            out["per_label"] = {str(k): v for k, v in per_label_dice(warped, lf, ids).items()}
    if gt_field is not None:
        out["epe_voxels"] = endpoint_error(field, gt_field)
    return out


def register(pair: RegistrationPair, params: ParameterSet, cfg: RunConfig) -> np.ndarray:
    return multiscale_forward(pair.fixed, pair.moving, params, cfg.network).field


def evaluate_pairs(params: ParameterSet, cfg: RunConfig, pairs: Sequence[RegistrationPair]) -> dict:
    """Mean metrics of the predicted field and of the zero field over ``pairs``."""
    rows = []
    for pair in pairs:
        field = register(pair, params, cfg)
        zero = np.zeros_like(field)
        pred = field_metrics(field, pair.keypoints, pair.labels_fixed, pair.labels_moving, pair.gt_field)
        base = field_metrics(zero, pair.keypoints, pair.labels_fixed, pair.labels_moving, pair.gt_field)
        rows.append({"name": pair.name, **pred, **{f"zero_{k}": v for k, v in base.items() if k != "per_label"}})

    def mean(key):
        vals = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    summary = {k: mean(k) for k in ("tre_mm", "dice", "epe_voxels", "zero_tre_mm", "zero_dice", "zero_epe_voxels")}
    summary["n_pairs"] = len(rows)
    summary["pairs"] = rows
    return summary


def run_variant(
    cfg: RunConfig,
    variant: str,
    train_pairs: Sequence[RegistrationPair],
    val_pairs: Sequence[RegistrationPair],
    steps: int | None = None,
) -> tuple[ParameterSet, dict]:
    """Train one architecture variant from scratch and evaluate it on ``val_pairs``."""
    vcfg = apply_ablation(cfg, variant)
    t0 = time.perf_counter()
    params, traces = train_model(vcfg, train_pairs, steps=steps)
    results = evaluate_pairs(params, vcfg, val_pairs)
    results["variant"] = variant
    results["train_seconds"] = time.perf_counter() - t0
    results["final_losses"] = {str(s): float(np.mean([r["loss"] for r in tr[-100:]])) for s, tr in traces.items()}
    return params, results


def comparison_table(results: Sequence[dict], metric: str = "epe_voxels") -> str:
    """Plain-text table of ``metric`` per variant, with the relative change against the first row."""
    ref = results[0].get(metric)
    lines = [f"{'variant':<12} {metric:>12} {'vs ' + results[0]['variant']:>12}"]
    for r in results:
        val = r.get(metric)
        if val is None:
            lines.append(f"{r['variant']:<12} {'n/a':>12} {'':>12}")
            continue
        rel = "" if not ref else f"{(val - ref) / ref:+.1%}"
        lines.append(f"{r['variant']:<12} {val:>12.4f} {rel:>12}")
    return "\n".join(lines)

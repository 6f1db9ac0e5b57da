"""Command-line entry points: synth, train, register, evaluate, ablate.

Exit status is 0 on success, 2 for usage or validation errors (bad
arguments, bad config, malformed input files, missing prerequisites) and
3 for failures during the run itself.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ABLATIONS,
    ConfigError,
    RunConfig,
    apply_ablation,
    load_run_config,
    run_config_from_dict,
    save_run_config,
    smoke_config,
    table1_config,
)
from .data import (
    build_manifest,
    generate_synthetic_pair,
    load_keypoints,
    load_manifest,
    load_pair,
    load_volume,
    save_pair,
    save_volume,
)
from .experiment import comparison_table, evaluate_pairs, field_metrics, run_variant, train_model
from .model import init_params, multiscale_forward
from .params import ParseError, load_params, save_params
from .spatial import Volume3D, warp

log = logging.getLogger("rwcnet")

BUILTIN_CONFIGS = {"smoke": smoke_config, "table1": table1_config}
LOSS_COLUMNS = ["step", "loss", "mse", "tre", "dice", "reg"]


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------


def _resolve_config(name: str) -> RunConfig:
    if name in BUILTIN_CONFIGS:
        return BUILTIN_CONFIGS[name]()
    path = Path(name)
    if not path.is_file():
        raise UsageError(f"config {name!r} is neither a file nor one of {sorted(BUILTIN_CONFIGS)}")
    return load_run_config(path)


def _write_run_info(directory: Path, cfg: RunConfig | None, command: str, **extra) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    info = {"tool": "rwcnet", "version": __version__, "command": command, **extra}
    (directory / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")
    if cfg is not None:
        save_run_config(cfg, directory / "config.json", version=__version__)


def _arg_record(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _load_split(data: Path, split: str):
    try:
        manifest = load_manifest(data)
    except FileNotFoundError:
        raise UsageError(f"no manifest.json in {data}") from None
    records = manifest.split(split)
    return [load_pair(manifest, r) for r in records]


def _check_extents(cfg: RunConfig, pairs) -> None:
    for p in pairs:
        if p.fixed.extents != tuple(cfg.network.full_extent):
            raise ConfigError(
                f"pair {p.name or '?'} has extents {p.fixed.extents} but the config expects "
                f"full_extent {tuple(cfg.network.full_extent)}"
            )


def _stage_checkpoint(out: Path, stage: int) -> Path:
    return out / f"stage{stage}.rwcp"


def _save_checkpoint(params, cfg: RunConfig, path: Path, trained_stages: int) -> None:
    save_params(params, path, extra={"config": cfg.to_dict(), "trained_stages": trained_stages, "version": __version__})


def _load_checkpoint(path: Path):
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    params, header = load_params(path)
    if "config" not in header:
        raise UsageError(f"checkpoint {path} carries no config")
    return params, run_config_from_dict(header["config"]), header


def _write_loss_csv(path: Path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow({k: row.get(k, "") for k in LOSS_COLUMNS})


def _emit(args, metrics: dict, text: str) -> None:
    if args.json:
        print(json.dumps(metrics, sort_keys=True))
    else:
        print(text)


def _metric_text(m: dict) -> str:
    lines = []
    if m.get("tre_mm") is not None:
        lines.append(f"TRE: {m['tre_mm']:.4f} mm")
    if m.get("dice") is not None:
        lines.append(f"Dice: {m['dice']:.4f}")
        for lab, v in (m.get("per_label") or {}).items():
            lines.append(f"  label {lab}: {v:.4f}")
    if m.get("epe_voxels") is not None:
        lines.append(f"EPE: {m['epe_voxels']:.4f} voxels")
    return "\n".join(lines)


def _pow2(text: str) -> int:
    n = int(text)
    if n < 16 or n & (n - 1):
        raise argparse.ArgumentTypeError(f"size must be a power of two >= 16, got {n}")
    return n


def _spacing(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"spacing must be sz,sy,sx, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"spacing must be three positive numbers, got {text!r}")
    return vals


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count)
    print(f"{'pair':<10} {'zero-field TRE (mm)':>20}")
    baselines = []
    for i, seed in enumerate(seeds):
        pair = generate_synthetic_pair(
            (args.size,) * 3,
            max_disp_voxels=args.max_disp,
            smoothness_sigma=args.sigma,
            n_keypoints=args.keypoints,
            n_labels=args.labels,
            seed=int(seed),
            spacing_mm=args.spacing,
        )
        name = f"pair_{i:03d}"
        save_pair(pair, out / name)
        base = field_metrics(np.zeros_like(pair.gt_field), pair.keypoints)["tre_mm"]
        baselines.append(base)
        print(f"{name:<10} {base:>20.4f}")
    print(f"{'mean':<10} {float(np.mean(baselines)):>20.4f}")
    build_manifest(out, args.split_ratio, args.seed).save()
    _write_run_info(out, None, "synth", args=_arg_record(args))
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args.config)
    out = Path(args.out)
    n_stages = len(cfg.network.stages)
    if args.stage == "all":
        stages = list(range(n_stages))
    else:
        k = int(args.stage)
        if not 0 <= k < n_stages:
            raise UsageError(f"--stage {k} out of range; the config has {n_stages} stages")
        stages = [k]
    params = None
    if stages[0] > 0:
        prev = _stage_checkpoint(out, stages[0] - 1)
        if not prev.is_file():
            raise UsageError(f"training stage {stages[0]} needs {prev} from the earlier stages; run those first")
        params, prev_cfg, _ = _load_checkpoint(prev)
        if prev_cfg.to_dict() != cfg.to_dict():
            raise UsageError(f"{prev} was trained with a different config")
    pairs = _load_split(Path(args.data), "train")
    if not pairs:
        raise UsageError(f"{args.data} has no training pairs")
    _check_extents(cfg, pairs)
    _write_run_info(out, cfg, "train", args=_arg_record(args))
    if params is None:
        params = init_params(cfg.network, cfg.seed)

    def done(stage, ps, trace):
        _save_checkpoint(ps, cfg, _stage_checkpoint(out, stage), stage + 1)
        _save_checkpoint(ps, cfg, out / "checkpoint.rwcp", stage + 1)
        _write_loss_csv(out / f"loss_stage{stage}.csv", trace)
        if not trace:
            print(f"stage {stage}: 0 steps (weights left at initialisation)")
            return
        head, tail = trace[:100], trace[-100:]
        print(
            f"stage {stage}: {len(trace)} steps, mean loss first 100 "
            f"{np.mean([r['loss'] for r in head]):.5f}, last 100 {np.mean([r['loss'] for r in tail]):.5f}"
        )

    train_model(cfg, pairs, params, stages, steps=args.steps, on_stage_done=done)
    return 0


def cmd_register(args) -> int:
    params, cfg, header = _load_checkpoint(Path(args.checkpoint))
    fixed = load_volume(args.fixed)
    moving = load_volume(args.moving)
    if fixed.extents != moving.extents:
        raise UsageError(f"fixed extents {fixed.extents} differ from moving extents {moving.extents}")
    try:
        cfg.network.validate(fixed.extents)
    except ConfigError as exc:
        raise UsageError(f"volume extents {fixed.extents} do not fit the checkpoint's config: {exc}") from None
    res = multiscale_forward(fixed, moving, params, cfg.network)
    out_field = Path(args.out_field)
    out_field.parent.mkdir(parents=True, exist_ok=True)
    save_volume(Volume3D(res.field, fixed.spacing_mm, "field"), out_field)
    if args.out_warped:
        save_volume(warp(moving, res.field), Path(args.out_warped))
    diag = {"stage_max_delta": res.step_max_delta, "stage_scales": res.stage_scales}
    if args.json:
        print(json.dumps(diag))
    else:
        for s, (scale, deltas) in enumerate(zip(res.stage_scales, res.step_max_delta)):
            print(f"stage {s} (scale {scale:g}) max|dD| per step: " + " ".join(f"{d:.4f}" for d in deltas))
    info = {"args": _arg_record(args), "trained_stages": header.get("trained_stages"), **diag}
    _write_run_info(out_field.parent, cfg, "register", **info)
    return 0


def cmd_evaluate(args) -> int:
    if not args.keypoints and not (args.labels_fixed and args.labels_moving):
        raise UsageError("evaluate needs --keypoints and/or both --labels-fixed and --labels-moving")
    if bool(args.labels_fixed) != bool(args.labels_moving):
        raise UsageError("--labels-fixed and --labels-moving must be given together")
    lf = load_volume(args.labels_fixed) if args.labels_fixed else None
    lm = load_volume(args.labels_moving) if args.labels_moving else None
    gt = load_volume(args.gt_field) if args.gt_field else None
    field_vol = None if args.field == "zero" else load_volume(args.field)
    spacing = args.spacing or next(
        (v.spacing_mm for v in (field_vol, lf, gt) if v is not None), (1.0, 1.0, 1.0)
    )
    kps = load_keypoints(args.keypoints, spacing) if args.keypoints else None
    if field_vol is not None:
        if field_vol.data.ndim != 4 or field_vol.data.shape[0] != 3:
            raise UsageError(f"{args.field} is not a [3,D,H,W] field")
        field = field_vol.data
    else:
        ref = next((v for v in (lf, gt) if v is not None), None)
        if ref is not None:
            ext = ref.extents
        else:
            pts = np.vstack([kps.fixed, kps.moving])
            ext = tuple(int(np.ceil(m)) + 2 for m in pts.max(axis=0))
        field = np.zeros((3, *ext), dtype=np.float32)
    for name, v in (("labels", lf), ("gt field", gt)):
        if v is not None and v.extents != tuple(field.shape[1:]):
            raise UsageError(f"{name} extents {v.extents} differ from field extents {tuple(field.shape[1:])}")
    metrics = field_metrics(field, kps, lf, lm, gt.data if gt is not None else None)
    _emit(args, metrics, _metric_text(metrics))
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args.config)
    data = Path(args.data)
    train_pairs = _load_split(data, "train")
    val_pairs = _load_split(data, "val")
    if not train_pairs or not val_pairs:
        raise UsageError(f"{data} needs both training and validation pairs")
    _check_extents(cfg, train_pairs + val_pairs)
    out = Path(args.out)
    baseline = None
    if args.baseline:
        bpath = Path(args.baseline)
        if bpath.is_dir():
            bpath = bpath / "results.json"
        if not bpath.is_file():
            raise UsageError(f"baseline results {bpath} not found")
        baseline = json.loads(bpath.read_text())
    _write_run_info(out, None, "ablate", args=_arg_record(args))
    params, results = run_variant(cfg, args.variant, train_pairs, val_pairs, steps=args.steps)
    # wall-clock time would make results.json differ between identical runs
    print(f"trained and evaluated in {results.pop('train_seconds'):.0f}s", file=sys.stderr)
    vcfg = apply_ablation(cfg, args.variant)
    save_run_config(vcfg, out / "config.json", version=__version__)
    _save_checkpoint(params, vcfg, out / "checkpoint.rwcp", len(vcfg.network.stages))
    (out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    rows = [baseline, results] if baseline else [results]
    table = comparison_table(rows, "epe_voxels") + "\n\n" + comparison_table(rows, "tre_mm")
    (out / "comparison.txt").write_text(table + "\n")
    keys = ("tre_mm", "dice", "epe_voxels", "zero_tre_mm", "zero_epe_voxels")
    summary = {"variant": args.variant, "per_label": None, **{k: results[k] for k in keys}}
    _emit(args, summary, table)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rwcnet", description="Recurrent correlation registration on 3-D volumes.")
    p.add_argument("--version", action="version", version=f"rwcnet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic registration pairs and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--size", type=_pow2, default=32)
    s.add_argument("--max-disp", type=float, default=6.0)
    s.add_argument("--sigma", type=float, default=4.0)
    s.add_argument("--keypoints", type=int, default=512)
    s.add_argument("--labels", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spacing", type=_spacing, default=(1.5, 1.5, 1.5))
    s.add_argument("--split-ratio", type=float, default=0.9)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train stages coarse to fine")
    t.add_argument("--config", required=True, help="JSON config file, or 'smoke' / 'table1'")
    t.add_argument("--data", required=True, help="directory holding manifest.json")
    t.add_argument("--out", required=True)
    t.add_argument("--stage", default="all", choices=["0", "1", "2", "all"])
    t.add_argument("--steps", type=int, default=None, help="override the configured steps per stage")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register a moving volume onto a fixed one")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--out-field", required=True)
    r.add_argument("--out-warped")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="TRE / Dice / EPE of a field (or of the zero field)")
    e.add_argument("--field", required=True, help="field .rwv, or 'zero'")
    e.add_argument("--keypoints")
    e.add_argument("--labels-fixed")
    e.add_argument("--labels-moving")
    e.add_argument("--gt-field")
    e.add_argument("--spacing", type=_spacing)
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and evaluate one architecture variant")
    a.add_argument("--variant", required=True, choices=ABLATIONS)
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--baseline", help="results.json (or its directory) of the full model, for the comparison table")
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"rwcnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report, then map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"rwcnet {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

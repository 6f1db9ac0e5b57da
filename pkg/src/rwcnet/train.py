"""Stage-by-stage training: coarse stages are frozen while finer ones learn."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import RegistrationPair
from .model import StageInputs, context_encode, prepare_stage, run_stage, subnetwork_forward
from .objectives import KeypointSet, composite_loss, one_hot
from .params import Adam, ParameterSet
from .spatial import downsample_volume, identity_grid, patch_slices, trilinear_sample
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class StageSample:
    inputs: StageInputs
    keypoints: KeypointSet | None  # in stage-grid voxels
    labels_fixed: np.ndarray | None
    labels_moving: np.ndarray | None
    label_ids: list[int]


def _stage_keypoints(kps: KeypointSet | None, factor: int, spacing) -> KeypointSet | None:
    if kps is None or len(kps) == 0:
        return None
    to_stage = lambda p: (p + 0.5) / factor - 0.5  # noqa: E731
    return KeypointSet(to_stage(kps.fixed), to_stage(kps.moving), spacing)


def prepare_stage_samples(
    pairs: Sequence[RegistrationPair], params: ParameterSet, cfg: RunConfig, stage: int
) -> list[StageSample]:
    """Run the (frozen) coarser stages once per pair and cache the inputs of ``stage``."""
    net = cfg.network
    samples = []
    for pair in pairs:
        running = hidden = scale = None
        for s in range(stage + 1):
            inputs = prepare_stage(pair.fixed, pair.moving, s, net, running, hidden, scale)
            if s == stage:
                break
            contribution, hidden = run_stage(inputs, params, s, net)
            running = inputs.prior_field + contribution
            scale = net.stages[s].scale
        factor = net.downsample_factor(stage)
        lf = lm = None
        label_ids: list[int] = []
        if pair.labels_fixed is not None:
            lf = downsample_volume(pair.labels_fixed, factor).data
            lm = downsample_volume(pair.labels_moving, factor).data
            label_ids = sorted((set(np.unique(lf).tolist()) | set(np.unique(lm).tolist())) - {0})
        samples.append(
            StageSample(inputs, _stage_keypoints(pair.keypoints, factor, inputs.spacing_mm), lf, lm, label_ids)
        )
    return samples


def _flip_permute(arr: np.ndarray, perm, flips) -> np.ndarray:
    """Apply an axis permutation and then flips to the spatial axes of a [C,D,H,W] array."""
    out = arr.transpose(0, *(1 + np.asarray(perm)))
    axes = tuple(1 + a for a in range(3) if flips[a])
    return np.ascontiguousarray(np.flip(out, axes) if axes else out)


def _flip_permute_field(field: np.ndarray, perm, flips) -> np.ndarray:
    """Same spatial transform as ``_flip_permute``; the vector components follow the axes."""
    out = _flip_permute(field[list(perm)], perm, flips)
    for a in range(3):
        if flips[a]:
            out[a] = -out[a]
    return out


def augment_sample(sample: StageSample, rng: np.random.Generator) -> StageSample:
    """Random symmetry of the voxel grid (axis flips, and permutations among equal-length axes).

    Images, fields, hidden state, labels and keypoints are transformed
    together, so the transformed sample is another valid registration
    problem whose answer is the correspondingly transformed field.
    """
    inp = sample.inputs
    ext = inp.fixed.shape[1:]
    perm = list(range(3))
    if len(set(ext)) == 1:
        perm = [int(a) for a in rng.permutation(3)]
    flips = [bool(f) for f in rng.integers(0, 2, size=3)]
    if perm == [0, 1, 2] and not any(flips):
        return sample
    img = lambda a: None if a is None else _flip_permute(a, perm, flips)  # noqa: E731
    new_ext = tuple(ext[a] for a in perm)
    patch_ext = tuple(sl.stop - sl.start for sl in inp.patches[0])
    new_inputs = StageInputs(
        fixed=img(inp.fixed),
        moving=img(inp.moving),
        moving_prewarped=img(inp.moving_prewarped),
        prior_field=_flip_permute_field(inp.prior_field, perm, flips),
        cached_hidden=img(inp.cached_hidden),
        spacing_mm=tuple(inp.spacing_mm[a] for a in perm),
        patches=patch_slices(new_ext, tuple(patch_ext[a] for a in perm)),
    )
    kps = None
    if sample.keypoints is not None:
        size = np.array(new_ext, dtype=np.float64) - 1

        def move(p):
            q = p[:, perm]
            return np.where(flips, size - q, q)

        kps = KeypointSet(move(sample.keypoints.fixed), move(sample.keypoints.moving), new_inputs.spacing_mm)
    lab = lambda a: None if a is None else _flip_permute(a, perm, flips)  # noqa: E731
    return StageSample(new_inputs, kps, lab(sample.labels_fixed), lab(sample.labels_moving), sample.label_ids)


def _patch_keypoints(kps: KeypointSet | None, sl) -> KeypointSet | None:
    if kps is None:
        return None
    lo = np.array([s.start for s in sl], dtype=np.float64)
    hi = np.array([s.stop for s in sl], dtype=np.float64)
    inside = ((kps.fixed >= lo - 0.5) & (kps.fixed < hi - 0.5)).all(axis=1)
    if not inside.any():
        return None
    return KeypointSet(kps.fixed[inside] - lo, kps.moving[inside] - lo, kps.spacing_mm)


def stage_loss(
    sample: StageSample,
    patch: int,
    params: ParameterSet,
    cfg: RunConfig,
    stage: int,
    rng: np.random.Generator,
    training: bool = True,
):
    """Composite loss of one patch, with the stage's output added to the frozen prior field."""
    net = cfg.network
    inp = sample.inputs
    sl = inp.patches[patch]
    full_sl = (slice(None), *sl)
    prefix = f"stage{stage}"
    fixed_p = Tensor(inp.fixed[full_sl])
    moving_p = Tensor(inp.moving_prewarped[full_sl])
    cached = None if inp.cached_hidden is None else Tensor(inp.cached_hidden[full_sl])
    h0 = context_encode(moving_p, params, prefix, cached, net.hidden_merge)
    d0 = T.zeros((3, *moving_p.shape[1:]))
    d, _ = subnetwork_forward(fixed_p, moving_p, h0, d0, params, stage, net, training=training, rng=rng)
    total = Tensor(inp.prior_field[full_sl]) + d

    origin = np.array([s.start for s in sl], dtype=T.default_dtype())[:, None, None, None]
    coords = Tensor(identity_grid(moving_p.shape[1:]) + origin) + total
    warped = trilinear_sample(inp.moving, coords)

    weights = cfg.loss_weights
    onehots = None
    if weights.w_dice > 0 and sample.label_ids:
        moving_oh = one_hot(sample.labels_moving, sample.label_ids)
        fixed_oh = one_hot(sample.labels_fixed[full_sl], sample.label_ids)
        onehots = (trilinear_sample(moving_oh, coords), fixed_oh)
    kps = _patch_keypoints(sample.keypoints, sl)
    if (weights.w_dice > 0 and onehots is None) or (weights.w_tre > 0 and kps is None):
        weights = replace(
            weights,
            w_dice=weights.w_dice if onehots is not None else 0.0,
            w_tre=weights.w_tre if kps is not None else 0.0,
        )
    return composite_loss(fixed_p, warped, total, weights, onehots=onehots, keypoints=kps)


def train_stage(
    stage: int,
    pairs: Sequence[RegistrationPair],
    params: ParameterSet,
    cfg: RunConfig,
    rng: np.random.Generator,
    steps: int | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> list[dict]:
    """Optimise the weights of ``stage`` with all coarser stages frozen.

    Each step draws one pair and one patch uniformly. Returns the loss
    trace as one dict per step (``step``, ``loss`` and the term breakdown).
    """
    if not pairs:
        raise ValueError("training needs at least one pair")
    net = cfg.network
    for s in range(stage):
        params.freeze(f"stage{s}.")
    params.unfreeze(f"stage{stage}.")
    own = params.subset(f"stage{stage}.")
    opt = Adam(cfg.optimizer.lr, cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps)
    samples = prepare_stage_samples(pairs, params, cfg, stage)
    n_steps = net.stages[stage].training_steps if steps is None else steps
    n_patches = net.stages[stage].patches_per_image
    trace = []
    t0 = time.perf_counter()
    for step in range(n_steps):
        i = int(rng.integers(len(samples)))
        p = int(rng.integers(n_patches))
        sample = augment_sample(samples[i], rng) if cfg.augment else samples[i]
        terms = stage_loss(sample, p, params, cfg, stage, rng)
        terms.total.backward()
        opt.step(own)
        row = {"step": step, "loss": terms.total.item(), **terms.parts}
        trace.append(row)
        if callback is not None:
            callback(step, row)
        if step % 100 == 0 or step == n_steps - 1:
            log.info("stage %d step %d/%d loss %.5f (%.1fs)", stage, step, n_steps, row["loss"], time.perf_counter() - t0)
    params.freeze(f"stage{stage}.")
    return trace

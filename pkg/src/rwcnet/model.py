"""The recurrent correlation registration network.

One sub-network per resolution: a feature encoder shared by the fixed and
moving patch, a context encoder that seeds the hidden state, and a
convolutional GRU that repeatedly reads a local cost volume and emits a
displacement increment. :func:`multiscale_forward` chains the stages
coarse to fine, pre-warping the moving image by the running field and
handing the final hidden state of each stage to the next.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import NetworkConfig
from .correlation import local_cost_volume
from .params import ParameterSet
from .spatial import (
    Volume3D,
    assemble_patches,
    downsample_volume,
    patch_slices,
    resize,
    upsample_field,
    warp,
)
from .tensor import Tensor


def _conv_param(params: ParameterSet, name: str, c_out: int, c_in: int, k: int, rng, gain: float, zero=False):
    fan_in = c_in * k**3
    if zero:
        w = np.zeros((c_out, c_in, k, k, k))
    else:
        w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(c_out, c_in, k, k, k))
    params.add(f"{name}.weight", T.Tensor(w, requires_grad=True))
    params.add(f"{name}.bias", T.Tensor(np.zeros(c_out), requires_grad=True))


def init_stage_params(params: ParameterSet, stage: int, cfg: NetworkConfig, rng: np.random.Generator) -> None:
    """Add the weights of sub-network ``stage`` under the prefix ``stage{stage}.``."""
    cf, h = cfg.feature_channels, cfg.hidden_channels
    x = cfg.gru_input_channels
    p = f"stage{stage}"
    lrelu_gain = np.sqrt(2.0 / (1 + 0.1**2))
    for i, (ci, co) in enumerate([(1, cf), (cf, cf), (cf, cf)], 1):
        _conv_param(params, f"{p}.feat.conv{i}", co, ci, 3, rng, lrelu_gain)
    for i, (ci, co) in enumerate([(1, h), (h, h), (h, h)], 1):
        _conv_param(params, f"{p}.ctx.conv{i}", co, ci, 3, rng, lrelu_gain if i < 3 else 1.0)
    for gate in ("z", "r", "q"):
        _conv_param(params, f"{p}.gru.conv{gate}", h, h + x, 3, rng, 1.0)
    _conv_param(params, f"{p}.head.conv1", h // 2, h, 3, rng, lrelu_gain)
    _conv_param(params, f"{p}.head.conv2", 3, h // 2, 3, rng, 0.0, zero=True)
    if cfg.hidden_merge == "concat" and stage > 0:
        _conv_param(params, f"{p}.merge", h, 2 * h, 1, rng, 1.0)


def init_params(cfg: NetworkConfig, seed: int = 0) -> ParameterSet:
    params = ParameterSet()
    rng = np.random.default_rng(seed)
    for s in range(len(cfg.stages)):
        init_stage_params(params, s, cfg, rng)
    return params


def _conv(x: Tensor, params: ParameterSet, name: str) -> Tensor:
    return T.conv3d(x, params[f"{name}.weight"], params[f"{name}.bias"])


def feature_encode(img, params: ParameterSet, prefix: str, dropout_p: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Three conv+leaky-ReLU layers at full patch resolution, then dropout in training mode.

    The patch is first shifted and scaled to zero mean and unit variance.
    The statistics are treated as constants, so gradients still reach the
    image through the affine map.
    """
    out = T.as_tensor(img)
    mu, sd = float(out.data.mean()), float(out.data.std())
    out = T.scale(T.add_scalar(out, -mu), 1.0 / (sd + 1e-6))
    for i in (1, 2, 3):
        out = T.leaky_relu(_conv(out, params, f"{prefix}.feat.conv{i}"), 0.1)
    return T.dropout(out, dropout_p, training, rng)


def context_encode(moving, params: ParameterSet, prefix: str, cached: Tensor | None = None, merge: str = "add") -> Tensor:
    """Initial hidden state from the moving patch, bounded by a final tanh.

    A cached hidden state from the coarser stage is added to (or, with
    ``merge="concat"``, concatenated and projected into) the last
    pre-activation, so the result stays inside (-1, 1).
    """
    out = T.as_tensor(moving)
    for i in (1, 2):
        out = T.leaky_relu(_conv(out, params, f"{prefix}.ctx.conv{i}"), 0.1)
    pre = _conv(out, params, f"{prefix}.ctx.conv3")
    if cached is not None:
        if merge == "add":
            pre = pre + cached
        else:
            pre = _conv(T.concat([pre, cached]), params, f"{prefix}.merge")
    return T.tanh(pre)


def gru_step(h: Tensor, x: Tensor, params: ParameterSet, prefix: str) -> tuple[Tensor, Tensor]:
    """One convolutional GRU update followed by the flow head.

    Returns the new hidden state and the displacement increment.
    """
    wz = params[f"{prefix}.gru.convz.weight"]
    expected = wz.shape[1]
    if h.shape[0] + x.shape[0] != expected:
        raise ValueError(
            f"gru_step: hidden ({h.shape[0]}) + input ({x.shape[0]}) channels != {expected} expected by the gates"
        )
    if h.shape[1:] != x.shape[1:]:
        raise ValueError(f"gru_step: hidden extents {h.shape[1:]} differ from input extents {x.shape[1:]}")
    cx = T.im2col(x.data, 3)
    ch = T.im2col(h.data, 3)

    def gate(name, inputs, cols):
        w = params[f"{prefix}.gru.conv{name}.weight"]
        return T.conv3d_multi(inputs, w, params[f"{prefix}.gru.conv{name}.bias"], cols)

    z = T.sigmoid(gate("z", [h, x], [ch, cx]))
    r = T.sigmoid(gate("r", [h, x], [ch, cx]))
    rh = r * h
    q = T.tanh(gate("q", [rh, x], [T.im2col(rh.data, 3), cx]))
    h_new = h + z * (q - h)
    delta = _conv(T.leaky_relu(_conv(h_new, params, f"{prefix}.head.conv1"), 0.1), params, f"{prefix}.head.conv2")
    return h_new, delta


def subnetwork_forward(
    fixed_patch,
    moving_patch,
    h_init: Tensor,
    d_init,
    params: ParameterSet,
    stage: int,
    cfg: NetworkConfig,
    steps: int | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> tuple[Tensor, Tensor]:
    """Run the recurrent refinement for one patch; returns (final field, final hidden state).

    Every step re-warps the original moving features by the aggregate
    field, correlates them with the fixed features, and adds the GRU's
    increment to the aggregate field. ``trace`` receives max|ΔD| per step.
    """
    n = cfg.stages[stage].rnn_steps if steps is None else steps
    if n < 1:
        raise ValueError(f"need at least one recurrent step, got {n}")
    prefix = f"stage{stage}"
    fixed_patch, moving_patch = T.as_tensor(fixed_patch), T.as_tensor(moving_patch)
    f_fixed = feature_encode(fixed_patch, params, prefix, cfg.dropout_p, training, rng)
    f_moving = feature_encode(moving_patch, params, prefix, cfg.dropout_p, training, rng)
    d = T.as_tensor(d_init)
    h = h_init
    for _ in range(n):
        if d.requires_grad or d.data.any():
            f_warped = warp(f_moving, d)
        else:
            f_warped = f_moving
        if cfg.correlation:
            motion = local_cost_volume(f_fixed, f_warped, cfg.radius)
        else:
            motion = T.concat([f_fixed, f_warped])
        x = T.concat([motion, d, moving_patch])
        h, delta = gru_step(h, x, params, prefix)
        d = d + delta
        if trace is not None:
            trace.append(float(np.abs(delta.data).max()))
    return d, h


@dataclass
class StageInputs:
    """Everything one stage consumes, on that stage's grid."""

    fixed: np.ndarray  # [1,D,H,W]
    moving: np.ndarray  # [1,D,H,W], not pre-warped
    moving_prewarped: np.ndarray
    prior_field: np.ndarray  # running field from coarser stages, [3,D,H,W]
    cached_hidden: np.ndarray | None  # [H,D,H,W]
    spacing_mm: tuple[float, float, float]
    patches: list


@dataclass
class RegistrationResult:
    field: np.ndarray  # [3,D,H,W] at full resolution
    stage_fields: list[np.ndarray] = field(default_factory=list)  # per-stage contribution on its own grid
    stage_scales: list[float] = field(default_factory=list)
    step_max_delta: list[list[float]] = field(default_factory=list)


def _check_geometry(cfg: NetworkConfig, extents) -> None:
    try:
        cfg.validate(extents)
    except ValueError as exc:
        raise ValueError(f"volume extents {tuple(extents)} incompatible with config: {exc}") from None


def prepare_stage(
    fixed: Volume3D,
    moving: Volume3D,
    stage: int,
    cfg: NetworkConfig,
    prior_field: np.ndarray | None,
    prior_hidden: np.ndarray | None,
    prior_scale: float | None,
) -> StageInputs:
    """Downsample inputs to the stage grid and pre-warp the moving image by the running field."""
    full = fixed.extents
    factor = cfg.downsample_factor(stage)
    fixed_s = downsample_volume(fixed, factor)
    moving_s = downsample_volume(moving, factor)
    ext = fixed_s.extents
    dt = T.default_dtype()
    if prior_field is None:
        prior = np.zeros((3, *ext), dtype=dt)
        pre = moving_s.data.astype(dt)
        hidden = None
    else:
        ratio = int(round(cfg.stages[stage].scale / prior_scale))
        with T.no_grad():
            prior = upsample_field(Tensor(prior_field), ratio).data
            pre = warp(moving_s.data.astype(dt), prior).data
            hidden = resize(Tensor(prior_hidden), ext).data if prior_hidden is not None else None
    return StageInputs(
        fixed=fixed_s.data.astype(dt),
        moving=moving_s.data.astype(dt),
        moving_prewarped=pre,
        prior_field=prior,
        cached_hidden=hidden,
        spacing_mm=fixed_s.spacing_mm,
        patches=patch_slices(ext, cfg.patch_extent(stage, full)),
    )


def run_stage(inputs: StageInputs, params: ParameterSet, stage: int, cfg: NetworkConfig, order=None, trace=None):
    """Inference for every patch of one stage; returns (stage field, final hidden), both assembled."""
    h_ch = cfg.hidden_channels
    ext = inputs.fixed.shape[1:]
    fields = [None] * len(inputs.patches)
    hiddens = [None] * len(inputs.patches)
    idx = range(len(inputs.patches)) if order is None else order
    prefix = f"stage{stage}"
    with T.no_grad():
        for i in idx:
            sl = (slice(None), *inputs.patches[i])
            mov = Tensor(inputs.moving_prewarped[sl])
            cached = None if inputs.cached_hidden is None else Tensor(inputs.cached_hidden[sl])
            h0 = context_encode(mov, params, prefix, cached, cfg.hidden_merge)
            d0 = T.zeros((3, *mov.shape[1:]))
            step_trace = [] if trace is not None else None
            d, h = subnetwork_forward(Tensor(inputs.fixed[sl]), mov, h0, d0, params, stage, cfg, trace=step_trace)
            if trace is not None:
                trace.append(step_trace)
            fields[i], hiddens[i] = d.data, h.data
    field_s = assemble_patches(fields, ext)
    hidden_s = assemble_patches(hiddens, ext)
    assert hidden_s.shape[0] == h_ch
    return field_s, hidden_s


def multiscale_forward(fixed: Volume3D, moving: Volume3D, params: ParameterSet, cfg: NetworkConfig, stages=None) -> RegistrationResult:
    """Coarse-to-fine registration of ``moving`` onto ``fixed``.

    ``stages`` limits the run to the first k stages (default: all).
    The running field is upsampled between stages and the per-stage
    contributions are summed; the result is returned at full resolution.
    """
    if fixed.extents != moving.extents:
        raise ValueError(f"fixed extents {fixed.extents} differ from moving extents {moving.extents}")
    _check_geometry(cfg, fixed.extents)
    n_stages = len(cfg.stages) if stages is None else stages
    result = RegistrationResult(field=np.zeros(0))
    running = hidden = None
    scale = None
    for s in range(n_stages):
        inputs = prepare_stage(fixed, moving, s, cfg, running, hidden, scale)
        trace: list = []
        contribution, hidden = run_stage(inputs, params, s, cfg, trace=trace)
        running = inputs.prior_field + contribution
        scale = cfg.stages[s].scale
        result.stage_fields.append(contribution)
        result.stage_scales.append(scale)
        steps = max(len(t) for t in trace)
        result.step_max_delta.append([max(t[k] for t in trace) for k in range(steps)])
    with T.no_grad():
        result.field = upsample_field(Tensor(running), int(round(1 / scale))).data
    return result

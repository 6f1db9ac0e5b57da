"""Local cost volumes between fixed and moving feature maps."""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def offsets(radius: int) -> list[tuple[int, int, int]]:
    """All offsets with components in [-r, r], oz-major (the cost-volume channel order)."""
    rng = range(-radius, radius + 1)
    return list(itertools.product(rng, rng, rng))


def _check(f_fixed, f_moving, radius: int) -> None:
    if f_fixed.shape != f_moving.shape:
        raise ValueError(f"feature maps differ in shape: {f_fixed.shape} vs {f_moving.shape}")
    if len(f_fixed.shape) != 4:
        raise ValueError(f"feature maps must be [C,D,H,W], got {f_fixed.shape}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")


def local_cost_volume(f_fixed: Tensor, f_moving: Tensor, radius: int = 2) -> Tensor:
    """Correlate every fixed voxel with moving voxels inside a (2r+1)^3 window.

    Returns [(2r+1)^3, D, H, W] where channel ``o`` holds
    ``sum_c F_f(c, x) * F_m(c, x + o) / sqrt(C)``; offsets that leave the
    map contribute exactly zero.
    """
    f_fixed, f_moving = T.as_tensor(f_fixed), T.as_tensor(f_moving)
    _check(f_fixed, f_moving, radius)
    c, d, h, w = f_fixed.shape
    r = radius
    norm = f_fixed.dtype.type(1.0 / math.sqrt(c))
    a = f_fixed.data
    padded = np.pad(f_moving.data, ((0, 0), (r, r), (r, r), (r, r)))
    offs = offsets(r)
    out = np.empty((len(offs), d, h, w), dtype=a.dtype)
    for i, (oz, oy, ox) in enumerate(offs):
        win = padded[:, r + oz : r + oz + d, r + oy : r + oy + h, r + ox : r + ox + w]
        np.einsum("cdhw,cdhw->dhw", a, win, out=out[i])
    out *= norm

    def back(g):
        ga = gb = None
        if f_fixed.requires_grad:
            ga = np.zeros_like(a)
            for i, (oz, oy, ox) in enumerate(offs):
                ga += g[i] * padded[:, r + oz : r + oz + d, r + oy : r + oy + h, r + ox : r + ox + w]
            ga *= norm
        if f_moving.requires_grad:
            gp = np.zeros_like(padded)
            for i, (oz, oy, ox) in enumerate(offs):
                gp[:, r + oz : r + oz + d, r + oy : r + oy + h, r + ox : r + ox + w] += g[i] * a
            gb = np.ascontiguousarray(gp[:, r : r + d, r : r + h, r : r + w]) * norm
        return ga, gb

    return T._make(out, (f_fixed, f_moving), back, "local_cost_volume")


def cost_volume_oracle(f_fixed, f_moving, radius: int = 2) -> np.ndarray:
    """Plain nested-loop cost volume, used only to check :func:`local_cost_volume`."""
    a = np.asarray(getattr(f_fixed, "data", f_fixed), dtype=np.float64)
    b = np.asarray(getattr(f_moving, "data", f_moving), dtype=np.float64)
    _check(a, b, radius)
    c, d, h, w = a.shape
    offs = offsets(radius)
    out = np.zeros((len(offs), d, h, w))
    for i, (oz, oy, ox) in enumerate(offs):
        for z in range(d):
            for y in range(h):
                for x in range(w):
                    mz, my, mx = z + oz, y + oy, x + ox
                    if not (0 <= mz < d and 0 <= my < h and 0 <= mx < w):
                        continue
                    acc = 0.0
                    for ch in range(c):
                        acc += a[ch, z, y, x] * b[ch, mz, my, mx]
                    out[i, z, y, x] = acc / math.sqrt(c)
    return out

"""Trilinear sampling, warping, cross-resolution resampling and patching.

Conventions: arrays are [C, D, H, W]; a displacement field is a [3, D, H, W]
array in voxel units of its own grid with channels ordered (dz, dy, dx).
Voxel centres follow the half-voxel convention, so voxel ``i`` of a grid
downsampled by ``f`` covers fine voxels ``f*i .. f*i + f - 1`` and maps to
fine coordinate ``f*i + (f - 1)/2``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .tensor import Tensor

KINDS = ("image", "mask", "label", "field")


@dataclass
class Volume3D:
    """A [C,D,H,W] grid with physical voxel spacing (mm) and intensity semantics."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "image"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be [C,D,H,W], got shape {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


def _data(x):
    return x.data if isinstance(x, Volume3D) else x


@lru_cache(maxsize=32)
def _identity_grid(shape: tuple[int, int, int], dtype: str) -> np.ndarray:
    grid = np.indices(shape, dtype=dtype)
    grid.setflags(write=False)
    return grid


def identity_grid(shape: Sequence[int]) -> np.ndarray:
    """Absolute voxel coordinates [3, D, H, W] of every voxel of ``shape``."""
    return _identity_grid(tuple(int(s) for s in shape), T.default_dtype().str)


def _corner_setup(coords: np.ndarray, dims: Sequence[int]):
    """Flat corner indices and per-axis (lower, upper) weights for clamped trilinear lookup."""
    per_axis = []
    inside = []
    for a, n in enumerate(dims):
        c = coords[a]
        inside.append((c >= 0) & (c <= n - 1))
        cc = np.clip(c, 0, n - 1)
        i0 = np.minimum(np.floor(cc).astype(np.int64), max(n - 2, 0))
        i1 = np.minimum(i0 + 1, n - 1)
        t = (cc - i0).astype(coords.dtype)
        per_axis.append((i0, i1, t))
    return per_axis, inside


def _sparse(idx: np.ndarray, vals: np.ndarray, m: int, n_vox: int) -> sp.csr_matrix:
    indptr = np.arange(0, 8 * m + 1, 8)
    return sp.csr_matrix((vals.T.reshape(-1), idx.T.reshape(-1), indptr), shape=(m, n_vox))


def trilinear_sample(vol, coords) -> Tensor:
    """Sample ``vol`` [C,D,H,W] at absolute voxel coordinates ``coords`` [3, ...].

    Coordinates are clamped per axis to [0, extent-1] (clamp-to-edge). The
    result has shape [C, ...] and is differentiable w.r.t. both inputs;
    the coordinate gradient is zero where a coordinate was clamped.
    """
    vol = T.as_tensor(_data(vol))
    if not isinstance(coords, Tensor) and not np.isfinite(coords).all():
        raise ValueError("trilinear_sample: non-finite coordinates")
    coords = T.as_tensor(coords)
    if vol.ndim != 4:
        raise ValueError(f"trilinear_sample: volume must be [C,D,H,W], got {vol.shape}")
    if coords.shape[0] != 3:
        raise ValueError(f"trilinear_sample: axis 0 of coords must be 3, got {coords.shape[0]}")
    if not np.isfinite(coords.data).all():
        raise ValueError("trilinear_sample: non-finite coordinates")
    c_ch, dims = vol.shape[0], vol.shape[1:]
    out_shape = coords.shape[1:]
    flat = coords.data.reshape(3, -1)
    m = flat.shape[1]
    per_axis, inside = _corner_setup(flat, dims)
    (z0, z1, tz), (y0, y1, ty), (x0, x1, tx) = per_axis
    h, w = dims[1], dims[2]
    zs, ys, xs = (z0, z1), (y0, y1), (x0, x1)
    wz, wy, wx = (1 - tz, tz), (1 - ty, ty), (1 - tx, tx)
    idx = np.empty((8, m), dtype=np.int64)
    wts = np.empty((8, m), dtype=vol.dtype)
    k = 0
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                idx[k] = (zs[a] * h + ys[b]) * w + xs[c]
                wts[k] = wz[a] * wy[b] * wx[c]
                k += 1
    n_vox = int(np.prod(dims))
    S = _sparse(idx, wts, m, n_vox)
    V = vol.data.reshape(c_ch, n_vox)
    out = np.ascontiguousarray((S @ V.T).T, dtype=vol.dtype).reshape((c_ch, *out_shape))

    def back(g):
        g2 = g.reshape(c_ch, m)
        gvol = np.ascontiguousarray((S.T @ g2.T).T, dtype=vol.dtype).reshape(vol.shape) if vol.requires_grad else None
        gcoords = None
        if coords.requires_grad:
            sign = (-1, 1)
            dz = np.empty((8, m), dtype=vol.dtype)
            dy = np.empty_like(dz)
            dx = np.empty_like(dz)
            k = 0
            for a in (0, 1):
                for b in (0, 1):
                    for c in (0, 1):
                        dz[k] = sign[a] * wy[b] * wx[c]
                        dy[k] = wz[a] * sign[b] * wx[c]
                        dx[k] = wz[a] * wy[b] * sign[c]
                        k += 1
            gcoords = np.empty((3, m), dtype=coords.dtype)
            for axis, dw in enumerate((dz, dy, dx)):
                deriv = (_sparse(idx, dw, m, n_vox) @ V.T).T  # [C, M]
                gcoords[axis] = (deriv * g2).sum(axis=0) * inside[axis]
            gcoords = gcoords.reshape(coords.shape)
        return gvol, gcoords

    return T._make(out, (vol, coords), back, "trilinear_sample")


def _nearest_sample(vol: np.ndarray, coords: np.ndarray) -> np.ndarray:
    dims = vol.shape[1:]
    idx = [np.clip(np.rint(coords[a]), 0, n - 1).astype(np.int64) for a, n in enumerate(dims)]
    return vol[:, idx[0], idx[1], idx[2]]


def warp(moving, field, mode: str = "linear"):
    """Resample ``moving`` at x + D(x): the moving image pulled onto the fixed grid.

    ``moving`` is a Volume3D, Tensor, or array [C,D,H,W]; ``field`` is
    [3,D,H,W] on the same grid. Linear mode is differentiable; nearest mode
    (for label maps) returns plain data with no gradient.
    """
    src = _data(moving)
    fld = field.data if isinstance(field, Volume3D) else field
    fshape = fld.shape
    if len(fshape) != 4 or fshape[0] != 3:
        raise ValueError(f"warp: field must be [3,D,H,W], got {fshape}")
    if tuple(src.shape[1:]) != tuple(fshape[1:]):
        raise ValueError(f"warp: moving extents {tuple(src.shape[1:])} differ from field extents {tuple(fshape[1:])}")
    if mode == "nearest":
        f = fld.data if isinstance(fld, Tensor) else np.asarray(fld)
        s = src.data if isinstance(src, Tensor) else np.asarray(src)
        out = _nearest_sample(s, identity_grid(fshape[1:]) + f)
        if isinstance(moving, Volume3D):
            return replace(moving, data=out)
        return out
    if mode != "linear":
        raise ValueError(f"warp: unknown mode {mode!r}")
    grid = Tensor._wrap(identity_grid(fshape[1:]).astype(T.default_dtype()), False)
    out = trilinear_sample(src, grid + T.as_tensor(fld))
    if isinstance(moving, Volume3D):
        return replace(moving, data=out.data)
    return out


def resize(x, out_extents: Sequence[int]) -> Tensor:
    """Trilinear resize of a [C,D,H,W] tensor to ``out_extents`` (half-voxel aligned)."""
    x = T.as_tensor(_data(x))
    in_ext = x.shape[1:]
    axes = [
        ((np.arange(o) + 0.5) * (i / o) - 0.5).astype(T.default_dtype())
        for i, o in zip(in_ext, out_extents)
    ]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return trilinear_sample(x, Tensor._wrap(coords, False))


def resample_field(field, factor: float) -> Tensor:
    """Resample a displacement field to a grid ``factor`` times finer (2) or coarser (1/2).

    Values are multiplied by ``factor`` because displacements are measured
    in voxels of the grid they live on.
    """
    field = T.as_tensor(field)
    if field.ndim != 4 or field.shape[0] != 3:
        raise ValueError(f"resample_field: field must be [3,D,H,W], got {field.shape}")
    ext = field.shape[1:]
    if factor == 2:
        out_ext = tuple(2 * e for e in ext)
    elif factor == 0.5:
        odd = [a for a, e in enumerate(ext) if e % 2]
        if odd:
            raise ValueError(f"resample_field: cannot halve odd extents {ext} (axes {odd})")
        out_ext = tuple(e // 2 for e in ext)
    else:
        raise ValueError(f"resample_field: factor must be 2 or 1/2, got {factor}")
    return T.scale(resize(field, out_ext), factor)


def upsample_field(field, times: int) -> Tensor:
    """Apply ``resample_field(·, 2)`` ``log2(times)`` times."""
    out = T.as_tensor(field)
    while times > 1:
        out = resample_field(out, 2)
        times //= 2
    return out


def downsample_volume(vol: Volume3D, factor: int) -> Volume3D:
    """Block-average images (stride-sample masks and labels) by ``factor`` on every axis."""
    if factor == 1:
        return vol
    if factor not in (2, 4):
        raise ValueError(f"downsample factor must be 2 or 4, got {factor}")
    c, d, h, w = vol.data.shape
    bad = [a for a, e in enumerate((d, h, w)) if e % factor]
    if bad:
        raise ValueError(f"extents {(d, h, w)} are not divisible by {factor} on axes {bad}")
    if vol.kind in ("mask", "label"):
        data = vol.data[:, ::factor, ::factor, ::factor].copy()
    else:
        data = vol.data.reshape(c, d // factor, factor, h // factor, factor, w // factor, factor).mean(axis=(2, 4, 6))
        data = data.astype(vol.data.dtype)
    spacing = tuple(s * factor for s in vol.spacing_mm)
    return Volume3D(data, spacing, vol.kind)


def patch_slices(full_extents: Sequence[int], patch_extents: Sequence[int]) -> list[tuple[slice, slice, slice]]:
    """Spatial slices of the non-overlapping patches, z-major order."""
    full = tuple(int(e) for e in full_extents)
    patch = tuple(int(e) for e in patch_extents)
    if len(full) != 3 or len(patch) != 3:
        raise ValueError("extents must have three entries")
    if any(p <= 0 or f % p for f, p in zip(full, patch)):
        raise ValueError(
            f"patch extents {patch} must divide volume extents {full}; "
            f"each patch extent must be one of the divisors of {full}"
        )
    out = []
    for z in range(0, full[0], patch[0]):
        for y in range(0, full[1], patch[1]):
            for x in range(0, full[2], patch[2]):
                out.append((slice(z, z + patch[0]), slice(y, y + patch[1]), slice(x, x + patch[2])))
    return out


def extract_patches(vol, patch_extents: Sequence[int]) -> list:
    """Split a Volume3D, array, or Tensor [C,D,H,W] into non-overlapping patches."""
    data = _data(vol)
    slices = patch_slices(data.shape[1:], patch_extents)
    if isinstance(vol, Volume3D):
        return [replace(vol, data=vol.data[(slice(None), *s)].copy()) for s in slices]
    if isinstance(data, Tensor):
        return [data[(slice(None), *s)] for s in slices]
    return [np.ascontiguousarray(data[(slice(None), *s)]) for s in slices]


def assemble_patches(patches: Sequence, full_extents: Sequence[int]):
    """Inverse of :func:`extract_patches`."""
    if not patches:
        raise ValueError("no patches to assemble")
    first = patches[0]
    pdata = _data(first)
    patch_ext = pdata.shape[1:]
    slices = patch_slices(full_extents, patch_ext)
    if len(slices) != len(patches):
        raise ValueError(f"expected {len(slices)} patches for extents {tuple(full_extents)}, got {len(patches)}")
    if isinstance(pdata, Tensor):
        grid = [int(f) // int(p) for f, p in zip(full_extents, patch_ext)]
        it = iter(patches)
        planes = []
        for _ in range(grid[0]):
            rows = []
            for _ in range(grid[1]):
                rows.append(T.concat([next(it) for _ in range(grid[2])], axis=3))
            planes.append(T.concat(rows, axis=2))
        return T.concat(planes, axis=1)
    out = np.empty((pdata.shape[0], *(int(e) for e in full_extents)), dtype=pdata.dtype)
    for s, p in zip(slices, patches):
        out[(slice(None), *s)] = _data(p)
    if isinstance(first, Volume3D):
        return replace(first, data=out)
    return out

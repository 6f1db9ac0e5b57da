"""Synthetic registration pairs, file formats, and dataset manifests."""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .objectives import KeypointSet
from .params import ParseError
from .spatial import Volume3D, trilinear_sample, warp

VOLUME_MAGIC = b"RWCVOL1\0"
KEYPOINT_HEADER = ["fz", "fy", "fx", "mz", "my", "mx"]
_DTYPES = {"f32le": "<f4", "u16le": "<u2"}


@dataclass
class RegistrationPair:
    fixed: Volume3D
    moving: Volume3D
    keypoints: KeypointSet | None = None
    labels_fixed: Volume3D | None = None
    labels_moving: Volume3D | None = None
    gt_field: np.ndarray | None = None
    name: str = ""


@dataclass
class SyntheticPair(RegistrationPair):
    seed: int = 0


BLOBS_PER_32CUBE = 24
BLOB_SIGMA = (1.5, 4.0)
BLOB_AMP = (0.3, 1.0)


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def generate_synthetic_pair(
    extents=(32, 32, 32),
    max_disp_voxels: float = 6.0,
    smoothness_sigma: float = 4.0,
    n_keypoints: int = 512,
    n_labels: int = 4,
    seed: int = 0,
    spacing_mm=(1.5, 1.5, 1.5),
) -> SyntheticPair:
    """Random blob volume, a smooth random field, and keypoints consistent with it.

    ``moving`` is the base volume and ``fixed`` is the base pulled through
    the ground-truth field, so ``warp(moving, gt_field)`` reproduces
    ``fixed`` and the field lives on the fixed grid.
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or not all(_is_pow2(e) and e >= 16 for e in extents):
        raise ValueError(f"extents must be powers of two >= 16, got {extents}")
    if max_disp_voxels < 0:
        raise ValueError("max_disp_voxels must be >= 0")
    rng = np.random.default_rng(seed)
    grid = np.indices(extents, dtype=np.float64)
    unit = min(extents) / 32.0

    base = np.zeros(extents)
    n_blobs = int(BLOBS_PER_32CUBE * np.prod(extents) / 32**3)
    for _ in range(n_blobs):
        centre = rng.uniform(0, extents)
        sigma = rng.uniform(*BLOB_SIGMA) * unit
        amp = rng.uniform(*BLOB_AMP)
        r2 = sum((grid[a] - centre[a]) ** 2 for a in range(3))
        base += amp * np.exp(-r2 / (2 * sigma**2))
    labels = np.zeros(extents, dtype=np.uint16)
    for lab in range(1, n_labels + 1):
        radius = rng.uniform(3.0, 6.0) * unit
        centre = rng.uniform(radius + 1, np.asarray(extents) - radius - 1)
        r2 = sum((grid[a] - centre[a]) ** 2 for a in range(3))
        inside = r2 <= radius**2
        labels[inside] = lab
        base[inside] += rng.uniform(0.3, 0.8)
    base = ((base - base.min()) / (base.max() - base.min())).astype(np.float32)

    if max_disp_voxels > 0:
        noise = rng.normal(size=(3, *extents))
        smooth = np.stack([gaussian_filter(noise[c], smoothness_sigma, mode="wrap") for c in range(3)])
        gt = smooth * (max_disp_voxels / np.abs(smooth).max())
    else:
        gt = np.zeros((3, *extents))
    gt = gt.astype(np.float32)

    with T.precision(np.float32), T.no_grad():
        fixed = warp(base[None], gt).data
        labels_fixed = warp(labels[None], gt, mode="nearest")

    kps = _make_keypoints(gt, n_keypoints, rng, spacing_mm)
    return SyntheticPair(
        fixed=Volume3D(fixed, spacing_mm, "image"),
        moving=Volume3D(base[None].copy(), spacing_mm, "image"),
        keypoints=kps,
        labels_fixed=Volume3D(labels_fixed, spacing_mm, "label"),
        labels_moving=Volume3D(labels[None].copy(), spacing_mm, "label"),
        gt_field=gt,
        seed=seed,
    )


def _make_keypoints(gt: np.ndarray, n: int, rng: np.random.Generator, spacing_mm) -> KeypointSet:
    ext = np.asarray(gt.shape[1:])
    margin = 2.0
    fixed_pts, moving_pts = [], []
    while len(fixed_pts) < n:
        cand = rng.uniform(margin, ext - 1 - margin, size=(n, 3))
        with T.precision(np.float64), T.no_grad():
            disp = trilinear_sample(gt.astype(np.float64), cand.T).data.T
        moved = cand + disp
        ok = ((moved >= 0) & (moved <= ext - 1)).all(axis=1)
        fixed_pts.extend(cand[ok])
        moving_pts.extend(moved[ok])
    return KeypointSet(np.array(fixed_pts[:n]), np.array(moving_pts[:n]), spacing_mm)


# -- volume files ----------------------------------------------------------


def save_volume(vol: Volume3D, path: str | Path) -> None:
    """Write ``vol`` as magic, u32 header length, JSON header, raw little-endian payload."""
    dtype = "u16le" if vol.kind == "label" else "f32le"
    payload = np.ascontiguousarray(vol.data, dtype=_DTYPES[dtype])
    if dtype == "u16le" and not np.array_equal(payload, vol.data):
        raise ValueError("label volume holds values that do not fit in u16")
    header = {
        "shape": [int(s) for s in vol.data.shape],
        "spacing_mm": [float(s) for s in vol.spacing_mm],
        "dtype": dtype,
        "kind": vol.kind,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())


def load_volume(path: str | Path) -> Volume3D:
    raw = Path(path).read_bytes()
    if raw[:8] != VOLUME_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:8]!r}", 0)
    if len(raw) < 12:
        raise ParseError(f"{path}: truncated header length", len(raw))
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise ParseError(f"{path}: header length {hlen} exceeds file size", 8)
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        dtype = header["dtype"]
        kind = header["kind"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed header: {exc}", 12) from None
    if dtype not in _DTYPES:
        raise ParseError(f"{path}: unsupported dtype {dtype!r}", 12)
    if len(shape) != 4 or min(shape) < 1 or max(shape) > 2**20:
        raise ParseError(f"{path}: implausible shape {shape}", 12)
    itemsize = np.dtype(_DTYPES[dtype]).itemsize
    expected = int(np.prod(shape)) * itemsize
    start = 12 + hlen
    if len(raw) - start != expected:
        raise ParseError(f"{path}: header declares {expected} payload bytes, file holds {len(raw) - start}", start)
    data = np.frombuffer(raw, dtype=_DTYPES[dtype], offset=start).reshape(shape).copy()
    if dtype == "f32le":
        data = data.astype(np.float32)
    try:
        return Volume3D(data, spacing, kind)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}", 12) from None


# -- keypoints -------------------------------------------------------------


def save_keypoints(kps: KeypointSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(KEYPOINT_HEADER)
        for f, m in zip(kps.fixed, kps.moving):
            w.writerow([repr(float(v)) for v in (*f, *m)])


def load_keypoints(path: str | Path, spacing_mm=(1.0, 1.0, 1.0)) -> KeypointSet:
    fixed, moving = [], []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or [h.strip() for h in header] != KEYPOINT_HEADER:
            raise ParseError(f"{path}: line 1: header must be {','.join(KEYPOINT_HEADER)}", 0)
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ParseError(f"{path}: line {lineno}: expected 6 columns, got {len(row)}", lineno)
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric value", lineno) from None
            fixed.append(vals[:3])
            moving.append(vals[3:])
    return KeypointSet(np.array(fixed).reshape(-1, 3), np.array(moving).reshape(-1, 3), spacing_mm)


# -- pairs and manifests ---------------------------------------------------

PAIR_FILES = {
    "fixed": "fixed.rwv",
    "moving": "moving.rwv",
    "labels_fixed": "labels_fixed.rwv",
    "labels_moving": "labels_moving.rwv",
    "keypoints": "keypoints.csv",
    "gt_field": "gt_field.rwv",
}


def save_pair(pair: RegistrationPair, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(pair.fixed, d / PAIR_FILES["fixed"])
    save_volume(pair.moving, d / PAIR_FILES["moving"])
    if pair.labels_fixed is not None:
        save_volume(pair.labels_fixed, d / PAIR_FILES["labels_fixed"])
        save_volume(pair.labels_moving, d / PAIR_FILES["labels_moving"])
    if pair.keypoints is not None:
        save_keypoints(pair.keypoints, d / PAIR_FILES["keypoints"])
    if pair.gt_field is not None:
        save_volume(Volume3D(pair.gt_field, pair.fixed.spacing_mm, "field"), d / PAIR_FILES["gt_field"])


@dataclass
class DatasetManifest:
    root: Path
    records: list[dict] = field(default_factory=list)

    def split(self, tag: str) -> list[dict]:
        return [r for r in self.records if r["split"] == tag]

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(json.dumps(self.records, indent=2) + "\n")
        return path


def build_manifest(directory: str | Path, split_ratio: float = 0.9, seed: int = 0) -> DatasetManifest:
    """Deterministically shuffle the pair sub-directories of ``directory`` into train/val."""
    root = Path(directory)
    if not 0 < split_ratio <= 1:
        raise ValueError(f"split_ratio must lie in (0, 1], got {split_ratio}")
    pairs = sorted(p for p in root.iterdir() if p.is_dir() and (p / PAIR_FILES["fixed"]).exists())
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = int(round(split_ratio * len(pairs)))
    if n_train == len(pairs):
        warnings.warn("split leaves the validation set empty", stacklevel=2)
    records = []
    for rank, i in enumerate(order):
        p = pairs[i]
        rec = {}
        for key, fname in PAIR_FILES.items():
            rec[key] = f"{p.name}/{fname}" if (p / fname).exists() else None
        rec["split"] = "train" if rank < n_train else "val"
        records.append(rec)
    return DatasetManifest(root, records)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}", exc.pos) from None
    if not isinstance(records, list) or any("fixed" not in r or "split" not in r for r in records):
        raise ParseError(f"{path}: manifest must be a list of records with 'fixed' and 'split'", 0)
    return DatasetManifest(path.parent, records)


def load_pair(manifest: DatasetManifest, record: dict) -> RegistrationPair:
    def opt(key):
        rel = record.get(key)
        return manifest.root / rel if rel else None

    fixed = load_volume(opt("fixed"))
    moving = load_volume(opt("moving"))
    kp_path = opt("keypoints")
    kps = load_keypoints(kp_path, fixed.spacing_mm) if kp_path else None
    lf, lm, gt = opt("labels_fixed"), opt("labels_moving"), opt("gt_field")
    return RegistrationPair(
        fixed=fixed,
        moving=moving,
        keypoints=kps,
        labels_fixed=load_volume(lf) if lf else None,
        labels_moving=load_volume(lm) if lm else None,
        gt_field=load_volume(gt).data if gt else None,
        name=Path(record["fixed"]).parent.name,
    )

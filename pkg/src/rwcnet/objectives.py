"""Registration losses and evaluation metrics.

Training losses (``mse_loss``, ``soft_dice_loss``, ``smoothness_loss``,
``tre``) operate on tensors and are differentiable. Evaluation metrics
(``dice_score``, ``endpoint_error``) work on plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .spatial import Volume3D, trilinear_sample
from .tensor import Tensor

DICE_EPS = 1e-5


@dataclass
class KeypointSet:
    """Paired landmarks, each row (z, y, x) in voxels of its full-resolution grid."""

    fixed: np.ndarray
    moving: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.fixed = np.asarray(self.fixed, dtype=np.float64).reshape(-1, 3)
        self.moving = np.asarray(self.moving, dtype=np.float64).reshape(-1, 3)
        if self.fixed.shape != self.moving.shape:
            raise ValueError(f"{len(self.fixed)} fixed keypoints but {len(self.moving)} moving keypoints")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    def __len__(self) -> int:
        return len(self.fixed)


@dataclass(frozen=True)
class LossWeights:
    w_mse: float = 1.0
    w_dice: float = 0.0
    w_tre: float = 0.0
    w_reg: float = 0.1

    def __post_init__(self):
        vals = (self.w_mse, self.w_dice, self.w_tre, self.w_reg)
        if min(vals) < 0:
            raise ValueError(f"loss weights must be non-negative, got {vals}")
        if max(self.w_mse, self.w_dice, self.w_tre) <= 0:
            raise ValueError("at least one similarity weight (mse, dice, tre) must be positive")


PROFILES = {
    "mse": LossWeights(w_mse=1.0, w_reg=0.1),
    "mse+tre": LossWeights(w_mse=1.0, w_tre=0.1, w_reg=0.1),
    "mse+dice": LossWeights(w_mse=1.0, w_dice=1.0, w_reg=0.1),
}


def mse_loss(a, b) -> Tensor:
    a, b = T.as_tensor(a), T.as_tensor(b)
    return T.mean(T.square(a - b))


def soft_dice_loss(warped_onehot, fixed_onehot, eps: float = DICE_EPS) -> Tensor:
    """1 - mean per-label soft Dice over [L, ...] probability maps (background excluded)."""
    p, q = T.as_tensor(warped_onehot), T.as_tensor(fixed_onehot)
    if p.shape != q.shape:
        raise ValueError(f"one-hot shapes differ: {p.shape} vs {q.shape}")
    n_labels = p.shape[0]
    if n_labels == 0:
        raise ValueError("soft Dice needs at least one label channel")
    pf = T.reshape(p, (n_labels, -1))
    qf = T.reshape(q, (n_labels, -1))
    inter = T.sum(pf * qf, axis=1)
    denom = T.sum(pf, axis=1) + T.sum(qf, axis=1)
    ratio = T.div(T.scale(inter, 2.0) + eps, denom + eps)
    return 1.0 - T.mean(ratio)


def smoothness_loss(field) -> Tensor:
    """Mean squared forward difference over channels, axes and valid voxels."""
    field = T.as_tensor(field)
    if field.ndim != 4 or field.shape[0] != 3:
        raise ValueError(f"smoothness_loss expects a [3,D,H,W] field, got {field.shape}")
    if min(field.shape[1:]) < 2:
        raise ValueError(f"smoothness_loss needs extents >= 2, got {field.shape[1:]}")
    terms = []
    for axis in (1, 2, 3):
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        terms.append(T.mean(T.square(field[tuple(hi)] - field[tuple(lo)])))
    return (terms[0] + terms[1] + terms[2]) / 3.0


def tre(field, kps: KeypointSet) -> Tensor:
    """Mean target registration error in mm.

    Each fixed keypoint is moved by the field sampled (trilinearly) at its
    location and compared with its moving counterpart.
    """
    if len(kps) == 0:
        raise ValueError("TRE needs at least one keypoint pair")
    field = T.as_tensor(field)
    dt = field.dtype
    fixed = kps.fixed.T.astype(dt)  # [3, K]
    disp = trilinear_sample(field, Tensor._wrap(np.ascontiguousarray(fixed), False))
    spacing = np.broadcast_to(np.asarray(kps.spacing_mm, dtype=dt)[:, None], fixed.shape).copy()
    residual = disp + Tensor._wrap(np.ascontiguousarray(fixed - kps.moving.T.astype(dt)), False)
    scaled = residual * Tensor._wrap(spacing, False)
    return T.mean(T.sqrt(T.sum(T.square(scaled), axis=0)))


def dice_score(warped_labels, fixed_labels, label_ids=None) -> float:
    """Mean hard Dice over ``label_ids``; labels absent from both volumes are skipped."""
    a = np.asarray(warped_labels.data if isinstance(warped_labels, Volume3D) else warped_labels)
    b = np.asarray(fixed_labels.data if isinstance(fixed_labels, Volume3D) else fixed_labels)
    if a.shape != b.shape:
        raise ValueError(f"label volumes differ in shape: {a.shape} vs {b.shape}")
    if label_ids is None:
        label_ids = sorted((set(np.unique(a).tolist()) | set(np.unique(b).tolist())) - {0})
    scores = per_label_dice(a, b, label_ids)
    return float(np.mean(list(scores.values()))) if scores else float("nan")


def per_label_dice(a: np.ndarray, b: np.ndarray, label_ids) -> dict[int, float]:
    scores = {}
    for lab in label_ids:
        ma, mb = a == lab, b == lab
        total = int(ma.sum()) + int(mb.sum())
        if total == 0:
            continue
        scores[int(lab)] = 2.0 * int((ma & mb).sum()) / total
    return scores


def endpoint_error(pred, gt) -> float:
    """Mean voxel-space Euclidean distance between two [3,D,H,W] fields."""
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"field shapes differ: {p.shape} vs {g.shape}")
    return float(np.sqrt(((p - g) ** 2).sum(axis=0)).mean())


def one_hot(labels: np.ndarray, label_ids) -> np.ndarray:
    """[L, D, H, W] float one-hot encoding of a [1,D,H,W] (or [D,H,W]) label map."""
    lab = np.asarray(labels)
    if lab.ndim == 4:
        lab = lab[0]
    return np.stack([(lab == i) for i in label_ids]).astype(T.default_dtype())


def normalize_intensity(vol: Volume3D, lo: float = -4000.0, hi: float = 16000.0) -> Volume3D:
    """Clamp to [lo, hi] and map linearly onto [0, 1]."""
    if hi <= lo:
        raise ValueError(f"need hi > lo, got lo={lo}, hi={hi}")
    data = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return Volume3D(data.astype(np.float32), vol.spacing_mm, vol.kind)


@dataclass
class LossTerms:
    total: Tensor
    parts: dict[str, float] = field(default_factory=dict)


def composite_loss(
    fixed,
    warped,
    field,
    weights: LossWeights,
    onehots: tuple | None = None,
    keypoints: KeypointSet | None = None,
) -> LossTerms:
    """Weighted similarity plus smoothness: w_mse·MSE + w_dice·soft Dice + w_tre·TRE + w_reg·R(D).

    ``onehots`` is (warped_onehot, fixed_onehot). A term whose weight is
    zero is skipped; a nonzero weight without its inputs is an error.
    """
    fixed, warped, field = T.as_tensor(fixed), T.as_tensor(warped), T.as_tensor(field)
    terms: list[Tensor] = []
    parts: dict[str, float] = {}

    def use(name: str, w: float, value: Tensor) -> None:
        parts[name] = value.item()
        terms.append(T.scale(value, w))

    if weights.w_mse > 0:
        use("mse", weights.w_mse, mse_loss(warped, fixed))
    if weights.w_dice > 0:
        if onehots is None:
            raise ValueError("w_dice > 0 but no label one-hots were supplied")
        use("dice", weights.w_dice, soft_dice_loss(*onehots))
    if weights.w_tre > 0:
        if keypoints is None:
            raise ValueError("w_tre > 0 but no keypoints were supplied")
        use("tre", weights.w_tre, tre(field, keypoints))
    if weights.w_reg > 0:
        use("reg", weights.w_reg, smoothness_loss(field))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LossTerms(total, parts)

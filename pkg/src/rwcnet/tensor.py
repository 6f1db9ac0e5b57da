"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Every operation in this
module records its parents and a closure that maps the output gradient to
parent gradients; :meth:`Tensor.backward` walks that tape in reverse
topological order and then discards it.

Binary operations never broadcast: operands must share a shape, or one of
them must be a Python scalar.
"""

from __future__ import annotations

import builtins
import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (e.g. float64 for gradient checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable taping; results of operations never require grad inside the block."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=_DEFAULT_DTYPE)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t._parents = ()
        t._backward = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff ------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

        if not retain_graph:
            for node in order:
                node._parents = ()
                node._backward = None

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, what: str, check: bool = True) -> Tensor:
    if check:
        _check_finite(data, what)
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# -- elementwise ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _make(a.data + s, (a,), lambda g: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def sqrt(a: Tensor) -> Tensor:
    """Square root with the subgradient 0 at 0 (used for Euclidean norms)."""
    if (a.data < 0).any():
        raise ValueError("sqrt of negative values")
    out = np.sqrt(a.data)

    def back(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, 0.5 * g / safe, 0).astype(out.dtype),)

    return _make(out, (a,), back, "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    factor = np.where(a.data > 0, 1, slope).astype(a.data.dtype)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


# -- reductions and shape ops -------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def back(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), back, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ref = tensors[0].shape
    for i, t in enumerate(tensors[1:], 1):
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise ValueError(f"concat: tensor {i} has shape {t.shape}, incompatible with {ref} off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(lo, hi), axis=axis))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(out, tensors, back, "concat", check=False)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape", check=False)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; the gradient scatters back into a zero buffer."""
    out = np.ascontiguousarray(a.data[index])

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(out, (a,), back, "getitem", check=False)


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so evaluation is the identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) * a.dtype.type(1.0 / (1.0 - p))
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- convolution ---------------------------------------------------------


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded k×k×k neighbourhoods of a [C,D,H,W] array as a [C·k³, D·H·W] matrix."""
    c, d, h, w = x.shape
    p = k // 2
    xp = np.zeros((c, d + 2 * p, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, p : p + d, p : p + h, p : p + w] = x
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * k**3, d * h * w)


def conv3d_multi(
    inputs: Sequence[Tensor],
    weight: Tensor,
    bias: Tensor | None = None,
    cols: Sequence[np.ndarray] | None = None,
) -> Tensor:
    """Convolution of the channel-concatenation of ``inputs`` without building the concatenation.

    ``cols`` may carry precomputed :func:`im2col` matrices of the inputs so
    that several convolutions over the same input share one unfolding.
    The input gradient is a convolution of the output gradient with the
    flipped, channel-transposed kernel.
    """
    inputs = list(inputs)
    c_out, c_in, k = weight.shape[0], weight.shape[1], weight.shape[2]
    spatial = inputs[0].shape[1:]
    for i, x in enumerate(inputs):
        if x.ndim != 4:
            raise ValueError(f"conv3d: input {i} must be [C,D,H,W], got shape {x.shape}")
        if x.shape[1:] != spatial:
            raise ValueError(f"conv3d: input {i} spatial extents {x.shape[1:]} differ from {spatial}")
    widths = [x.shape[0] for x in inputs]
    if builtins.sum(widths) != c_in:
        raise ValueError(
            f"conv3d: axis 1 of weight (in channels) is {c_in} but the input provides {builtins.sum(widths)} channels"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv3d: axis 0 of bias is {bias.shape}, expected ({c_out},)")
    if cols is None:
        cols = [im2col(x.data, k) for x in inputs]
    n = int(np.prod(spatial))
    k3 = k**3
    edges = np.cumsum([0] + widths)
    w2 = weight.data.reshape(c_out, c_in * k3)
    acc = w2[:, edges[0] * k3 : edges[1] * k3] @ cols[0]
    for col, lo, hi in zip(cols[1:], edges[1:-1], edges[2:]):
        acc += w2[:, lo * k3 : hi * k3] @ col
    if bias is not None:
        acc += bias.data[:, None]
    out = acc.reshape((c_out, *spatial))

    def back(g):
        g2 = g.reshape(c_out, n)
        grads = []
        if any(x.requires_grad for x in inputs):
            gcols = im2col(g, k)
            flipped = weight.data[:, :, ::-1, ::-1, ::-1]
            for x, lo, hi in zip(inputs, edges[:-1], edges[1:]):
                if not x.requires_grad:
                    grads.append(None)
                    continue
                wt = np.ascontiguousarray(flipped[:, lo:hi].transpose(1, 0, 2, 3, 4)).reshape(hi - lo, c_out * k3)
                grads.append((wt @ gcols).reshape(x.shape))
        else:
            grads.extend([None] * len(inputs))
        if weight.requires_grad:
            dw = np.empty_like(w2)
            for col, lo, hi in zip(cols, edges[:-1], edges[1:]):
                dw[:, lo * k3 : hi * k3] = g2 @ col.T
            grads.append(dw.reshape(weight.shape))
        else:
            grads.append(None)
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    parents = inputs + [weight] + ([bias] if bias is not None else [])
    return _make(out, parents, back, "conv3d")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 3-D convolution (cross-correlation) with zero 'same' padding.

    ``x`` is [C_in,D,H,W], ``weight`` is [C_out,C_in,k,k,k] with k odd.
    """
    if x.ndim != 4:
        raise ValueError(f"conv3d: input must be [C,D,H,W], got shape {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d: weight must be [C_out,C_in,k,k,k], got shape {weight.shape}")
    k = weight.shape[2]
    for axis in (3, 4):
        if weight.shape[axis] != k:
            raise ValueError(f"conv3d: axis {axis} of weight is {weight.shape[axis]}, kernel must be cubic ({k})")
    if k % 2 != 1:
        raise ValueError(f"conv3d: axis 2 of weight is {k}; kernel size must be odd")
    if weight.shape[1] != x.shape[0]:
        raise ValueError(
            f"conv3d: axis 1 of weight (in channels) is {weight.shape[1]} but axis 0 of input is {x.shape[0]}"
        )
    return conv3d_multi([x], weight, bias)

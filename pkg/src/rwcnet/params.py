"""Named parameter collections, Adam, and the binary checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"RWCPARM1"


class ParseError(ValueError):
    """A malformed checkpoint or volume file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ParameterSet:
    """Mapping of dot-separated names to trainable tensors, with per-name freezing.

    Iteration is always in lexicographic name order.
    """

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        self._frozen: set[str] = set()
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = name not in self._frozen
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self:
            yield name, self._tensors[name]

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self if n.startswith(prefix)]

    def subset(self, prefix: str) -> "ParameterSet":
        """A view sharing the same tensors for every name starting with ``prefix``."""
        sub = ParameterSet()
        for name in self.names(prefix):
            sub._tensors[name] = self._tensors[name]
            if name in self._frozen:
                sub._frozen.add(name)
        return sub

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def freeze(self, prefix: str = "") -> None:
        for name in self.names(prefix):
            self._frozen.add(name)
            self._tensors[name].requires_grad = False
            self._tensors[name].grad = None

    def unfreeze(self, prefix: str = "") -> None:
        for name in self.names(prefix):
            self._frozen.discard(name)
            self._tensors[name].requires_grad = True

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())


@dataclass
class Adam:
    """Adam with bias correction. Frozen parameters are skipped and keep no moment buffers."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ParameterSet) -> None:
        active = [(n, p) for n, p in params.items() if not params.is_frozen(n)]
        for name, p in active:
            if p.grad is None:
                raise RuntimeError(f"parameter {name!r} is trainable but has no gradient; run backward() first")
        for name in list(self.m):
            if params.is_frozen(name):
                del self.m[name], self.v[name]
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, p in active:
            g = p.grad.astype(np.float64)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)
            p.grad = None


def save_params(params: ParameterSet, path: str | Path, extra: dict | None = None) -> None:
    """Write ``params`` as a checkpoint: magic, u32 header length, JSON header, f32le payload.

    ``extra`` keys (e.g. the network config) are merged into the header.
    """
    entries = []
    offset = 0
    chunks = []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4").reshape(-1)
        entries.append(
            {"name": name, "shape": list(t.shape), "offset": offset, "len": int(arr.size), "frozen": params.is_frozen(name)}
        )
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {"params": entries, "dtype": "f32le"}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_checkpoint_header(raw: bytes) -> tuple[dict, int]:
    """Parse magic and header; return (header, byte offset of the payload)."""
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"bad magic {raw[:8]!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    if len(raw) < 12:
        raise ParseError("file ends inside the header-length field", len(raw))
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise ParseError(f"header declares {hlen} bytes but only {len(raw) - 12} remain", 12)
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"header is not valid UTF-8 JSON: {exc}", 12) from None
    if header.get("dtype") != "f32le" or not isinstance(header.get("params"), list):
        raise ParseError("header must carry dtype 'f32le' and a 'params' list", 12)
    return header, 12 + hlen


def load_params(path: str | Path) -> tuple[ParameterSet, dict]:
    """Read a checkpoint written by :func:`save_params`; returns the parameters and the full header."""
    raw = Path(path).read_bytes()
    header, start = read_checkpoint_header(raw)
    declared = sum(int(e["len"]) for e in header["params"])
    available = (len(raw) - start) // 4
    if (len(raw) - start) % 4 or available != declared:
        raise ParseError(f"payload holds {len(raw) - start} bytes, header declares {declared} f32 values", start)
    payload = np.frombuffer(raw, dtype="<f4", offset=start)
    params = ParameterSet()
    for e in header["params"]:
        lo, n = int(e["offset"]), int(e["len"])
        shape = tuple(e["shape"])
        if lo + n > declared or int(np.prod(shape)) != n:
            raise ParseError(f"entry {e['name']!r} has inconsistent offset/len/shape", start + 4 * lo)
        t = Tensor._wrap(payload[lo : lo + n].astype(np.float32).reshape(shape), True)
        params.add(e["name"], t)
        if e.get("frozen"):
            params.freeze(e["name"])
    return params, header

"""Multi-scale signature matrices and their anchor sequences.

For a window length ``w`` ending at step ``t`` the signature entry for
series i, j is ``sum_{d=0..w} x_i[t-d] x_j[t-d] / w``: the window holds
``w + 1`` points and the rescale factor is ``w``, so an all-ones window
gives ``(w + 1) / w`` rather than 1.

Steps are absolute indices into the full series. Anchors in valid/test
ranges may read history from earlier ranges.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _accel
from .errors import ContextError, DataError, ShapeError
from .io_utils import atomic_write_bytes
from .timeseries import MultivariateSeries

PAPER_SCALES = (10, 30, 60)


def pair_correlation(xi_window, xj_window, kappa: float) -> float:
    xi = np.asarray(xi_window, dtype=np.float64)
    xj = np.asarray(xj_window, dtype=np.float64)
    if xi.shape != xj.shape or xi.ndim != 1:
        raise ShapeError(f"window shapes differ: {xi.shape} vs {xj.shape}")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return float(np.dot(xi, xj) / kappa)


@dataclass(frozen=True, eq=False)
class SignatureTensor:
    data: np.ndarray  # (n, n, s)
    anchor: int
    scales: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class SignatureSequence:
    tensors: tuple[SignatureTensor, ...]
    gap: int

    @property
    def h(self) -> int:
        return len(self.tensors)

    @property
    def anchors(self) -> list[int]:
        return [t.anchor for t in self.tensors]

    def as_array(self) -> np.ndarray:
        """Stacked data, shape ``(h, n, n, s)``."""
        return np.stack([t.data for t in self.tensors])


def _values(series) -> np.ndarray:
    if isinstance(series, MultivariateSeries):
        if series.offset:
            raise DataError("signature functions need the full series (offset 0), not a split view")
        return series.values
    return np.asarray(series, dtype=np.float64)


def _check_context(steps, max_scale: int, T: int) -> None:
    steps = np.asarray(steps)
    if steps.size and steps.min() < max_scale:
        raise ContextError(f"step {int(steps.min())} lacks {max_scale} steps of history", max_scale)
    if steps.size and steps.max() >= T:
        raise DataError(f"step {int(steps.max())} beyond series length {T}")


def signature_stack(series, steps: Sequence[int], scales: Sequence[int] = PAPER_SCALES) -> np.ndarray:
    """Signature tensors at many steps at once, shape ``(len(steps), n, n, s)``."""
    x = _values(series)
    scales = tuple(int(w) for w in scales)
    _check_context(steps, max(scales), x.shape[1])
    return _accel.signature_stack(x, np.asarray(steps, dtype=np.int64), np.asarray(scales, dtype=np.int64))


def signature_tensor(series, t: int, scales: Sequence[int] = PAPER_SCALES) -> SignatureTensor:
    scales = tuple(int(w) for w in scales)
    return SignatureTensor(signature_stack(series, [t], scales)[0], int(t), scales)


def sequence_anchors(t: int, h: int, g: int) -> list[int]:
    return [t - (h - 1 - i) * g for i in range(h)]


def signature_sequence(series, t: int, scales: Sequence[int] = PAPER_SCALES, h: int = 5, g: int = 10) -> SignatureSequence:
    scales = tuple(int(w) for w in scales)
    anchors = sequence_anchors(t, h, g)
    if anchors[0] < max(scales):
        raise ContextError(f"sequence ending at {t} starts at {anchors[0]}", max(scales) + (h - 1) * g)
    data = signature_stack(series, anchors, scales)
    return SignatureSequence(tuple(SignatureTensor(d, a, scales) for d, a in zip(data, anchors)), g)


def anchor_schedule(split_range: tuple[int, int], scales: Sequence[int], h: int, g: int) -> list[int]:
    """Anchors ``lo + k*g`` inside ``[lo, hi)`` whose whole sequence has full context."""
    lo, hi = split_range
    need = max(scales) + (h - 1) * g
    first = lo if lo >= need else lo + -(-(need - lo) // g) * g
    return list(range(first, hi, g))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, series: MultivariateSeries, train_range: tuple[int, int]) -> "Standardizer":
        lo, hi = train_range
        seg = series.values[:, lo - series.offset : hi - series.offset]
        std = seg.std(axis=1)
        std = np.where(std > 0, std, 1.0)
        return cls(seg.mean(axis=1), std)

    @classmethod
    def identity(cls, n: int) -> "Standardizer":
        return cls(np.zeros(n), np.ones(n))

    def apply(self, series: MultivariateSeries) -> MultivariateSeries:
        return series.with_values((series.values - self.mean[:, None]) / self.std[:, None])


# ---------------------------------------------------------------------------
# datasets of sequences
# ---------------------------------------------------------------------------


class SequenceDataset:
    """Signature sequences for a list of anchors, built once and shared.

    Tensors are computed for the union of all anchor steps, so overlapping
    sequences reuse work.
    """

    def __init__(self, series, anchors: Sequence[int], scales: Sequence[int] = PAPER_SCALES, h: int = 5, g: int = 10):
        self.scales = tuple(int(w) for w in scales)
        self.h, self.g = int(h), int(g)
        self.anchors = np.asarray(list(anchors), dtype=np.int64)
        if self.anchors.size and self.anchors.min() - (self.h - 1) * self.g < max(self.scales):
            raise ContextError("anchor lacks history", max(self.scales) + (self.h - 1) * self.g)
        offsets = np.arange(-(self.h - 1), 1) * self.g
        all_steps = (self.anchors[:, None] + offsets[None, :]).ravel()
        self.steps, inverse = np.unique(all_steps, return_inverse=True)
        self._index = inverse.reshape(len(self.anchors), self.h)
        self.tensors = signature_stack(series, self.steps, self.scales) if self.steps.size else np.zeros((0,))

    @classmethod
    def from_arrays(cls, anchors, steps, tensors, scales, h, g) -> "SequenceDataset":
        self = cls.__new__(cls)
        self.scales, self.h, self.g = tuple(scales), int(h), int(g)
        self.anchors = np.asarray(anchors, dtype=np.int64)
        self.steps = np.asarray(steps, dtype=np.int64)
        self.tensors = tensors
        pos = {int(s): k for k, s in enumerate(self.steps)}
        offsets = np.arange(-(self.h - 1), 1) * self.g
        self._index = np.array([[pos[int(a + o)] for o in offsets] for a in self.anchors], dtype=np.int64).reshape(
            len(self.anchors), self.h
        )
        return self

    def __len__(self) -> int:
        return len(self.anchors)

    def batch(self, idx) -> np.ndarray:
        """Sequences for anchor positions ``idx``: shape ``(B, h, n, n, s)``."""
        return self.tensors[self._index[np.asarray(idx)]]

    def targets(self, idx=None) -> np.ndarray:
        """Last tensor of each sequence: shape ``(B, n, n, s)``."""
        last = self._index[:, -1] if idx is None else self._index[np.asarray(idx), -1]
        return self.tensors[last]

    def sequence(self, pos: int) -> SignatureSequence:
        a = int(self.anchors[pos])
        data = self.batch([pos])[0]
        return SignatureSequence(
            tuple(SignatureTensor(d, t, self.scales) for d, t in zip(data, sequence_anchors(a, self.h, self.g))), self.g
        )


# ---------------------------------------------------------------------------
# on-disk cache
#
# little-endian layout:
#   magic b"MSIG", version u32, n u32, s u32, h u32, g u32, count u64,
#   s x u32 scale lengths,
#   count records of: anchor i64, then h*n*n*s f64 (row-major, (h, n, n, s))
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"MSIG"
CACHE_VERSION = 1


def write_cache(dataset: SequenceDataset, path) -> None:
    n = dataset.tensors.shape[1] if len(dataset) else 0
    s = len(dataset.scales)
    parts = [
        CACHE_MAGIC,
        struct.pack("<IIIIIQ", CACHE_VERSION, n, s, dataset.h, dataset.g, len(dataset)),
        struct.pack(f"<{s}I", *dataset.scales),
    ]
    for pos, anchor in enumerate(dataset.anchors):
        parts.append(struct.pack("<q", int(anchor)))
        parts.append(np.ascontiguousarray(dataset.batch([pos])[0], dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_cache(path) -> SequenceDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = 4 + struct.calcsize("<IIIIIQ")
    if raw[:4] != CACHE_MAGIC or len(raw) < head:
        raise DataError(f"{path}: not a signature cache")
    version, n, s, h, g, count = struct.unpack_from("<IIIIIQ", raw, 4)
    if version != CACHE_VERSION:
        raise DataError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    per = h * n * n * s
    if len(raw) != head + 4 * s + count * (8 + 8 * per):
        raise DataError(f"{path}: truncated or corrupt cache ({len(raw)} bytes)")
    off = head
    scales = struct.unpack_from(f"<{s}I", raw, off)
    off += 4 * s
    anchors, blocks = [], []
    for _ in range(count):
        (anchor,) = struct.unpack_from("<q", raw, off)
        off += 8
        blocks.append(np.frombuffer(raw, dtype="<f8", count=per, offset=off).reshape(h, n, n, s))
        off += 8 * per
        anchors.append(anchor)
    offsets = np.arange(-(h - 1), 1) * g
    step_to_tensor = {}
    for a, blk in zip(anchors, blocks):
        for o, tensor in zip(offsets, blk):
            step_to_tensor.setdefault(int(a + o), tensor)
    steps = np.array(sorted(step_to_tensor), dtype=np.int64)
    tensors = np.stack([step_to_tensor[int(t)] for t in steps]) if len(steps) else np.zeros((0, n, n, s))
    return SequenceDataset.from_arrays(anchors, steps, tensors.astype(np.float64), scales, h, g)

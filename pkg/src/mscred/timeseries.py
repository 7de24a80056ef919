"""Multivariate series container, CSV I/O, splits, synthetic data and anomaly injection.

Random draws use ``numpy.random.Generator(PCG64(seed))``. Draw order is part
of the data contract (see ``generate_synthetic`` and ``inject_anomalies``),
so a given seed produces the same arrays on every platform numpy supports.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, CSVFormatError, DataError, PlacementError, ShapeError
from .io_utils import atomic_write_text


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True, eq=False)
class MultivariateSeries:
    """``n`` named series of equal length; ``values[i]`` is series i.

    ``offset`` is the absolute step index of column 0, non-zero for split views.
    """

    values: np.ndarray
    names: tuple[str, ...] = ()
    offset: int = 0

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"values must be 2-D (n, T), got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise ShapeError(f"need at least 2 series, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise DataError("series values must be finite")
        view = arr.view()
        view.flags.writeable = False
        object.__setattr__(self, "values", view)
        names = tuple(self.names) if self.names else tuple(f"s{i}" for i in range(arr.shape[0]))
        if len(names) != arr.shape[0]:
            raise ShapeError(f"{len(names)} names for {arr.shape[0]} series")
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def steps(self) -> range:
        return range(self.offset, self.offset + self.T)

    def with_values(self, values: np.ndarray) -> "MultivariateSeries":
        return MultivariateSeries(values, self.names, self.offset)


@dataclass(frozen=True)
class AnomalyLabel:
    start: int
    duration: int
    root_causes: tuple[int, ...]

    @property
    def end(self) -> int:
        """Exclusive end step."""
        return self.start + self.duration

    def validate(self, n: int, T: int) -> None:
        if self.start < 0 or self.duration <= 0 or self.end > T:
            raise DataError(f"label span [{self.start}, {self.end}) outside [0, {T})")
        if not self.root_causes or any(not 0 <= c < n for c in self.root_causes):
            raise DataError(f"root causes {self.root_causes} not a non-empty subset of 0..{n - 1}")

    def to_dict(self) -> dict:
        return {"start": self.start, "duration": self.duration, "root_causes": list(self.root_causes)}

    @classmethod
    def from_dict(cls, d: dict) -> "AnomalyLabel":
        return cls(int(d["start"]), int(d["duration"]), tuple(int(c) for c in d["root_causes"]))


def save_labels(labels: Sequence[AnomalyLabel], path) -> None:
    atomic_write_text(path, json.dumps([lab.to_dict() for lab in labels], indent=2) + "\n")


def load_labels(path) -> list[AnomalyLabel]:
    with open(path) as fh:
        return [AnomalyLabel.from_dict(d) for d in json.load(fh)]


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def load_csv(path, header: bool = True, delimiter: str = ",") -> MultivariateSeries:
    """Read a CSV whose columns are series and rows are time steps."""
    names: list[str] = []
    rows: list[list[float]] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if header and not names and not rows:
                names = [cell.strip() for cell in row]
                width = len(names)
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ShapeError(f"line {lineno}: expected {width} columns, got {len(row)}")
            try:
                rows.append([float(cell) for cell in row])
            except ValueError as exc:
                raise CSVFormatError(str(exc), lineno) from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.array(rows, dtype=np.float64).T
    return MultivariateSeries(values, tuple(names))


def write_csv(series: MultivariateSeries, path, header: bool = True, delimiter: str = ",") -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    if header:
        writer.writerow(series.names)
    for row in series.values.T:
        writer.writerow([repr(float(v)) for v in row])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Half-open step ranges ``[lo, hi)`` for train, valid and test."""

    train: tuple[int, int]
    valid: tuple[int, int]
    test: tuple[int, int]

    @classmethod
    def standard(cls, T: int = 20000) -> "SplitSpec":
        return cls((0, int(0.4 * T)), (int(0.4 * T), int(0.5 * T)), (int(0.5 * T), T))

    def validate(self, T: int) -> None:
        prev = 0
        for name, (lo, hi) in zip(("train", "valid", "test"), (self.train, self.valid, self.test)):
            if hi <= lo:
                raise DataError(f"{name} split [{lo}, {hi}) is empty")
            if lo < prev or hi > T:
                raise DataError(f"{name} split [{lo}, {hi}) out of order or outside [0, {T})")
            prev = hi

    def to_dict(self) -> dict:
        return {"train": list(self.train), "valid": list(self.valid), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(tuple(d["train"]), tuple(d["valid"]), tuple(d["test"]))


def split(series: MultivariateSeries, spec: SplitSpec):
    """Return (train, valid, test) views; nothing is copied."""
    spec.validate(series.T)
    return tuple(
        MultivariateSeries(series.values[:, lo:hi], series.names, series.offset + lo)
        for lo, hi in (spec.train, spec.valid, spec.test)
    )


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n: int = 30
    T: int = 20000
    t0_min: float = 50.0
    t0_max: float = 100.0
    omega_min: float = 40.0
    omega_max: float = 50.0
    noise: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.n < 2 or self.T < 1:
            raise ConfigError(f"need n >= 2 and T >= 1, got n={self.n}, T={self.T}")
        if not (self.t0_min < self.t0_max and 0 < self.omega_min < self.omega_max):
            raise ConfigError("t0 and omega ranges must be non-degenerate (min < max, omega > 0)")
        if self.noise < 0:
            raise ConfigError("lambda must be >= 0")

    # config files use the key "lambda" for the noise factor
    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("noise")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "lambda" in d:
            d["noise"] = d.pop("lambda")
        return cls(**d)


def generate_synthetic(cfg: SynthConfig, kinds=None, t0=None, omega=None) -> MultivariateSeries:
    """Sinusoidal series with random phase, period and Gaussian noise.

    Draw order from ``make_rng(cfg.seed)``: per series i in order, one
    ``integers(0, 2)`` for the sin/cos choice, one ``uniform(t0_min, t0_max)``,
    one ``uniform(omega_min, omega_max)``; then one ``standard_normal((n, T))``
    block. ``kinds``/``t0``/``omega`` override the drawn values (the draws
    still happen, so the noise block is unchanged).
    """
    cfg.validate()
    rng = make_rng(cfg.seed)
    params = np.empty((cfg.n, 3))
    for i in range(cfg.n):
        params[i, 0] = rng.integers(0, 2)
        params[i, 1] = rng.uniform(cfg.t0_min, cfg.t0_max)
        params[i, 2] = rng.uniform(cfg.omega_min, cfg.omega_max)
    eps = rng.standard_normal((cfg.n, cfg.T))
    if kinds is not None:
        params[:, 0] = np.broadcast_to(kinds, cfg.n)
    if t0 is not None:
        params[:, 1] = np.broadcast_to(t0, cfg.n)
    if omega is not None:
        params[:, 2] = np.broadcast_to(omega, cfg.n)

    t = np.arange(cfg.T, dtype=np.float64)
    phase = (t[None, :] - params[:, 1:2]) / params[:, 2:3]
    clean = np.where(params[:, 0:1] == 0, np.sin(phase), np.cos(phase))
    values = clean + cfg.noise * eps if cfg.noise else clean
    return MultivariateSeries(values)


# ---------------------------------------------------------------------------
# anomaly injection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InjectConfig:
    count: int = 5
    durations: tuple[int, ...] = (30, 60, 90)
    causes_per_event: int = 3
    amplitude: float = 1.5
    min_gap: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["durations"] = list(self.durations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InjectConfig":
        d = dict(d)
        if "durations" in d:
            d["durations"] = tuple(d["durations"])
        return cls(**d)


def pulse_shape(duration: int) -> np.ndarray:
    """Half-sine bump of unit height; every sample is strictly positive."""
    return np.sin(np.pi * (np.arange(duration) + 0.5) / duration)


def inject_anomalies(
    series: MultivariateSeries,
    count: int,
    durations: Sequence[int],
    causes_per_event: int,
    region: tuple[int, int],
    seed: int,
    amplitude: float = 1.5,
    reference: tuple[int, int] | None = None,
    min_gap: int = 0,
    max_tries: int = 10000,
):
    """Add ``count`` half-sine shock pulses to random series inside ``region``.

    Pulse height is ``amplitude`` times each cause series' standard deviation
    over ``reference`` (absolute steps, default: the whole series), with a
    random sign. Events are kept at least ``min_gap`` steps apart.

    Draw order from ``make_rng(seed)``: per event, ``choice(durations)`` and
    ``integers(lo, hi - duration + 1)`` (repeated until the span is clear),
    then ``choice(n, causes_per_event, replace=False)`` and one
    ``choice([-1, 1])`` per cause. Events are returned sorted by start.
    """
    lo, hi = region
    if not (series.offset <= lo < hi <= series.offset + series.T):
        raise PlacementError(f"region [{lo}, {hi}) not inside series steps {series.steps}")
    if causes_per_event > series.n or causes_per_event < 1:
        raise ConfigError(f"causes_per_event must be in 1..{series.n}")
    if count == 0:
        return series, []

    ref_lo, ref_hi = reference if reference is not None else (series.offset, series.offset + series.T)
    ref = series.values[:, ref_lo - series.offset : ref_hi - series.offset]
    std = ref.std(axis=1)

    rng = make_rng(seed)
    values = np.array(series.values)
    spans: list[tuple[int, int]] = []
    labels = []
    for _ in range(count):
        for _attempt in range(max_tries):
            d = int(rng.choice(list(durations)))
            if hi - d < lo:
                raise PlacementError(f"region [{lo}, {hi}) shorter than duration {d}")
            start = int(rng.integers(lo, hi - d + 1))
            if all(start + d + min_gap <= a or b + min_gap <= start for a, b in spans):
                break
        else:
            raise PlacementError(f"could not place {count} non-overlapping events in [{lo}, {hi})")
        spans.append((start, start + d))
        causes = tuple(sorted(int(c) for c in rng.choice(series.n, causes_per_event, replace=False)))
        shape = pulse_shape(d)
        for c in causes:
            sign = rng.choice([-1.0, 1.0])
            values[c, start - series.offset : start - series.offset + d] += sign * amplitude * std[c] * shape
        labels.append(AnomalyLabel(start, d, causes))
    labels.sort(key=lambda lab: lab.start)
    return series.with_values(values), labels

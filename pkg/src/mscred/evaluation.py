"""Event-level precision/recall/F1, root-cause recall@k and the noise sweep."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .io_utils import atomic_write_text

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("lambda", "precision", "recall", "f1", "wall_seconds")


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    matches: tuple = ()  # (label index, event index) pairs

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, matches=()) -> "Metrics":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        return cls(p, r, f1_score(p, r), tp, fp, fn, tuple(matches))

    def as_row(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


def label_window(label, gap: int) -> tuple[int, int]:
    """Closed step interval a prediction must touch to match ``label``."""
    return label.start - gap, label.start + label.duration - 1 + gap


def match_events(events: Sequence, labels: Sequence, gap: int) -> list[tuple[int, int]]:
    """Maximum one-to-one matching of labels to overlapping events."""
    cand = [[j for j, ev in enumerate(events) if ev.overlaps(*label_window(lab, gap))] for lab in labels]
    owner: dict[int, int] = {}

    def augment(i, seen):
        for j in cand[i]:
            if j in seen:
                continue
            seen.add(j)
            if j not in owner or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    for i in range(len(labels)):
        augment(i, set())
    return sorted((i, j) for j, i in owner.items())


def event_metrics(events: Sequence, labels: Sequence, gap: int = 10) -> Metrics:
    """Precision/recall/F1 with overlap matching; precision is 0 when nothing is predicted."""
    matches = match_events(list(events), list(labels), gap)
    tp = len(matches)
    return Metrics.from_counts(tp, len(events) - tp, len(labels) - tp, matches)


def recall_at_k(rankings: Sequence[Sequence[int]], causes: Sequence[Sequence[int]], k: int = 3) -> float:
    """Mean over events of ``|top-k ∩ causes| / |causes|``; nan for no events."""
    if k < 1:
        raise ValueError("k must be >= 1")
    vals = [len(set(list(r)[:k]) & set(c)) / len(set(c)) for r, c in zip(rankings, causes)]
    return float(np.mean(vals)) if vals else float("nan")


def write_metrics_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else SWEEP_COLUMNS))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def write_score_traces(path, anchors, scores: np.ndarray, tau) -> None:
    """Plot data: one row per (anchor, channel) with the score and its cut-off."""
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (scores.shape[1],))
    buf = io.StringIO()
    buf.write("anchor,channel,score,tau\n")
    for a, row in zip(anchors, scores):
        for c, v in enumerate(row):
            buf.write(f"{int(a)},{c},{int(v)},{float(tau[c])!r}\n")
    atomic_write_text(path, buf.getvalue())


def noise_sweep(lambdas: Sequence[float], config, out_csv=None, trace_dir=None) -> list[dict]:
    """Regenerate, retrain, detect and score once per noise factor.

    A failing point is logged and reported with nan metrics; the sweep continues.
    """
    from .pipeline import run_experiment

    if not lambdas:
        raise ValueError("need at least one lambda")
    rows = []
    for lam in lambdas:
        start = time.perf_counter()
        cfg = replace(config, synth=replace(config.synth, noise=float(lam)))
        try:
            result = run_experiment(cfg)
            m = result.metrics
            row = {"lambda": float(lam), "precision": m.precision, "recall": m.recall, "f1": m.f1}
            if trace_dir is not None:
                from pathlib import Path

                write_score_traces(Path(trace_dir) / f"scores_lambda_{lam:g}.csv", result.test_anchors, result.detection.scores, result.detection.tau)
        except Exception as exc:  # one bad point must not sink the sweep
            log.error("noise sweep point lambda=%g failed: %s", lam, exc)
            row = {"lambda": float(lam), "precision": math.nan, "recall": math.nan, "f1": math.nan}
        row["wall_seconds"] = time.perf_counter() - start
        rows.append(row)
        if out_csv is not None:
            write_metrics_csv(out_csv, rows, SWEEP_COLUMNS)
    return rows

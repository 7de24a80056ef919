"""Residual matrices, broken-cell scores, thresholds, events, root causes and severity."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CalibrationError
from .io_utils import atomic_write_text

SEVERITY_BY_CHANNELS = {
    frozenset({0}): "short",
    frozenset({0, 1}): "medium",
    frozenset({0, 1, 2}): "long",
}
SEVERITY_NAMES = ("short", "medium", "long")


def residuals(targets: np.ndarray, recon: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(targets) - np.asarray(recon))


def broken_score(residual: np.ndarray, theta: float) -> int:
    """Number of cells whose residual exceeds ``theta``."""
    if theta < 0:
        raise ValueError("theta must be >= 0")
    return int(np.count_nonzero(np.asarray(residual) > theta))


def broken_scores(res: np.ndarray, theta) -> np.ndarray:
    """Scores for a stack ``(m, n, n, s)`` against per-channel ``theta`` ``(s,)``: shape ``(m, s)``."""
    theta = np.asarray(theta, dtype=np.float64)
    return np.count_nonzero(res > theta, axis=(1, 2))


def calibrate_theta(valid_residuals: np.ndarray, q: float = 0.995) -> np.ndarray:
    """Per-channel q-quantile of every validation residual entry (linear interpolation)."""
    if not 0 < q < 1:
        raise CalibrationError(f"quantile must be in (0, 1), got {q}")
    res = np.asarray(valid_residuals)
    if res.size == 0:
        raise CalibrationError("no validation residuals to calibrate on")
    if res.ndim == 2:
        return np.array([np.quantile(res, q)])
    return np.quantile(res.reshape(-1, res.shape[-1]), q, axis=0)


def calibrate_tau(valid_scores, beta: float = 1.0):
    """``beta`` times the largest validation score (per channel for 2-D input)."""
    if not 1.0 <= beta <= 2.0:
        raise CalibrationError(f"beta must be in [1, 2], got {beta}")
    scores = np.asarray(valid_scores, dtype=np.float64)
    if scores.size == 0:
        raise CalibrationError("no validation scores")
    top = scores.max(axis=0)
    return float(beta * top) if np.ndim(top) == 0 else beta * top


@dataclass(frozen=True)
class Event:
    start: int
    end: int
    peak: int
    peak_score: float
    channels: frozenset = frozenset()

    def overlaps(self, lo: int, hi: int) -> bool:
        """Whether the anchor span meets the closed interval ``[lo, hi]``."""
        return self.start <= hi and lo <= self.end


def detect_events(anchors: Sequence[int], scores: Sequence[float], tau: float, gap_merge: int = 1, channel=None) -> list[Event]:
    """Flag anchors scoring above ``tau`` and merge runs separated by at most ``gap_merge`` unflagged anchors."""
    anchors = np.asarray(anchors)
    scores = np.asarray(scores, dtype=np.float64)
    flagged = np.flatnonzero(scores > tau)
    events = []
    chans = frozenset() if channel is None else frozenset({channel})
    run = []
    for pos in flagged:
        if run and pos - run[-1] - 1 > gap_merge:
            events.append(_make_event(anchors, scores, run, chans))
            run = []
        run.append(pos)
    if run:
        events.append(_make_event(anchors, scores, run, chans))
    return events


def _make_event(anchors, scores, run, chans) -> Event:
    run = np.asarray(run)
    best = run[np.argmax(scores[run])]
    return Event(int(anchors[run[0]]), int(anchors[run[-1]]), int(anchors[best]), float(scores[best]), chans)


def root_cause_ranking(residual: np.ndarray, theta: float) -> list[tuple[int, int]]:
    """Series ranked by broken cells in their row plus column (diagonal counted once).

    Ties go to the lower series index.
    """
    broken = np.asarray(residual) > theta
    per_series = broken.sum(axis=0) + broken.sum(axis=1) - np.diagonal(broken)
    order = sorted(range(len(per_series)), key=lambda i: (-per_series[i], i))
    return [(i, int(per_series[i])) for i in order]


def severity(channels) -> tuple[str, bool]:
    """Severity label and a consistency flag for the set of detecting channels (0=S, 1=M, 2=L)."""
    chans = frozenset(int(c) for c in channels)
    if not chans:
        raise ValueError("severity needs at least one detecting channel")
    if chans in SEVERITY_BY_CHANNELS:
        return SEVERITY_BY_CHANNELS[chans], True
    return SEVERITY_NAMES[min(max(chans), 2)], False


def merge_channel_events(per_channel: dict, gap: int) -> list[Event]:
    """Union of per-channel events; spans within ``gap`` steps are merged and channels collected.

    The merged peak is the detection-channel peak when channel 0 took part.
    """
    items = sorted((ev for evs in per_channel.values() for ev in evs), key=lambda e: (e.start, e.end))
    merged: list[list[Event]] = []
    for ev in items:
        if merged and ev.start <= max(e.end for e in merged[-1]) + gap:
            merged[-1].append(ev)
        else:
            merged.append([ev])
    out = []
    for group in merged:
        chans = frozenset().union(*(e.channels for e in group))
        s_events = [e for e in group if 0 in e.channels] or group
        peak = max(s_events, key=lambda e: e.peak_score)
        out.append(Event(min(e.start for e in group), max(e.end for e in group), peak.peak, peak.peak_score, chans))
    return out


@dataclass
class DetectionResult:
    anchors: np.ndarray
    theta: np.ndarray
    tau: np.ndarray
    scores: np.ndarray  # (m, s)
    channel_events: dict  # channel -> list[Event]
    events: list  # merged across channels
    rankings: list  # per merged event: list[(series, score)]
    severities: list  # per merged event: (label, consistent)
    detection_rankings: list  # per detection-channel event
    detection_channel: int = 0

    def detection_events(self) -> list[Event]:
        return self.channel_events.get(self.detection_channel, [])


def diagnose(
    anchors,
    res: np.ndarray,
    theta,
    tau,
    gap_merge: int = 1,
    gap: int = 10,
    detection_channel: int = 0,
) -> DetectionResult:
    """Scores, per-channel events, merged events with root-cause rankings and severities."""
    anchors = np.asarray(anchors)
    theta = np.asarray(theta, dtype=np.float64)
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), theta.shape).copy()
    scores = broken_scores(res, theta)
    per_channel = {c: detect_events(anchors, scores[:, c], tau[c], gap_merge, channel=c) for c in range(res.shape[-1])}
    events = merge_channel_events(per_channel, gap * (gap_merge + 1))
    pos = {int(a): i for i, a in enumerate(anchors)}
    rankings = [root_cause_ranking(res[pos[ev.peak], :, :, detection_channel], theta[detection_channel]) for ev in events]
    severities = [severity(ev.channels) for ev in events]
    det_rankings = [
        root_cause_ranking(res[pos[ev.peak], :, :, detection_channel], theta[detection_channel])
        for ev in per_channel[detection_channel]
    ]
    return DetectionResult(
        anchors, theta, tau, scores, per_channel, events, rankings, severities, det_rankings, detection_channel
    )


def search_beta(valid_scores, calib_anchors, calib_scores, labels, gap: int, grid=None, gap_merge: int = 1) -> tuple[float, float]:
    """Grid-search beta on a labeled calibration split; returns ``(beta, f1)``.

    The first beta reaching the best F1 wins.
    """
    from .evaluation import event_metrics

    grid = np.round(np.arange(1.0, 2.0 + 1e-9, 0.05), 10) if grid is None else grid
    best = (float(grid[0]), -1.0)
    for beta in grid:
        tau = calibrate_tau(valid_scores, float(beta))
        events = detect_events(calib_anchors, calib_scores, tau, gap_merge)
        f1 = event_metrics(events, labels, gap).f1
        if f1 > best[1]:
            best = (float(beta), f1)
    return best


# ---------------------------------------------------------------------------
# JSON-lines reports
# ---------------------------------------------------------------------------


def write_residual_report(path, anchors, res: np.ndarray, theta, scores: np.ndarray) -> None:
    """One record per anchor: per-channel scores and per-series broken counts."""
    theta = np.asarray(theta)
    lines = []
    for a, r, sc in zip(anchors, res, scores):
        per_series = []
        for c in range(r.shape[-1]):
            b = r[:, :, c] > theta[c]
            per_series.append((b.sum(axis=0) + b.sum(axis=1) - np.diagonal(b)).astype(int).tolist())
        rec = {
            "anchor": int(a),
            "scores": [int(v) for v in sc],
            "series_broken": per_series,
            "max_residual": [float(v) for v in r.max(axis=(0, 1))],
        }
        lines.append(json.dumps(rec))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def event_record(ev: Event, ranking=None, sev=None, k: int = 3) -> dict:
    rec = {
        "start": ev.start,
        "end": ev.end,
        "peak": ev.peak,
        "peak_score": ev.peak_score,
        "channels": sorted(ev.channels),
    }
    if ranking is not None:
        rec["root_causes"] = [i for i, _ in ranking[:k]]
        rec["ranking"] = [[i, s] for i, s in ranking]
    if sev is not None:
        rec["severity"], rec["consistent"] = sev
    return rec


def write_detection_report(path, result: DetectionResult, k: int = 3) -> None:
    """One record per merged event, preceded by a header record with thresholds."""
    header = {"type": "thresholds", "theta": result.theta.tolist(), "tau": result.tau.tolist()}
    lines = [json.dumps(header)]
    for ev, rk, sv in zip(result.events, result.rankings, result.severities):
        lines.append(json.dumps({"type": "event", **event_record(ev, rk, sv, k)}))
    for c, evs in sorted(result.channel_events.items()):
        for i, ev in enumerate(evs):
            rk = result.detection_rankings[i] if c == result.detection_channel else None
            lines.append(json.dumps({"type": "channel_event", "channel": c, **event_record(ev, rk, None, k)}))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_detection_report(path) -> dict:
    out = {"events": [], "channel_events": {}, "detection_rankings": []}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "thresholds":
                out["theta"], out["tau"] = rec["theta"], rec["tau"]
            elif kind == "event":
                out["events"].append(rec)
            else:
                ch = rec.pop("channel")
                if "ranking" in rec:
                    out["detection_rankings"].append([i for i, _ in rec["ranking"]])
                ev = Event(rec["start"], rec["end"], rec["peak"], rec["peak_score"], frozenset(rec["channels"]))
                out["channel_events"].setdefault(ch, []).append(ev)
    return out

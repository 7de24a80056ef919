"""End-to-end wiring shared by the CLI, the noise sweep and the acceptance tests."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import detect as det
from .config import RunConfig
from .evaluation import Metrics, event_metrics, label_window, recall_at_k
from .model import Architecture, ModelParams, TrainResult, checkpoint_bytes, fit, reconstruct
from .signature import SequenceDataset, Standardizer, anchor_schedule
from .timeseries import AnomalyLabel, MultivariateSeries, generate_synthetic, inject_anomalies, load_csv

log = logging.getLogger(__name__)


def prepare_data(cfg: RunConfig, data_path=None) -> tuple[MultivariateSeries, list[AnomalyLabel]]:
    """Synthetic series with injected test anomalies, or a CSV (no labels)."""
    if cfg.source == "csv":
        return load_csv(data_path or cfg.paths.data, header=cfg.csv_header), []
    series = generate_synthetic(cfg.synth)
    cfg.splits.validate(series.T)
    inj = cfg.inject
    return inject_anomalies(
        series,
        inj.count,
        inj.durations,
        inj.causes_per_event,
        cfg.splits.test,
        inj.seed,
        amplitude=inj.amplitude,
        reference=cfg.splits.train,
        min_gap=inj.min_gap,
    )


def fit_standardizer(cfg: RunConfig, series: MultivariateSeries) -> Standardizer:
    if cfg.signature.standardize:
        return Standardizer.fit(series, cfg.splits.train)
    return Standardizer.identity(series.n)


def build_datasets(cfg: RunConfig, normalized: MultivariateSeries, parts=("train", "valid", "test")) -> dict:
    sig, h = cfg.signature, cfg.train.h
    out = {}
    for part in parts:
        anchors = anchor_schedule(getattr(cfg.splits, part), sig.scales, h, sig.gap)
        out[part] = SequenceDataset(normalized, anchors, sig.scales, h, sig.gap)
    return out


def initial_params(cfg: RunConfig, n: int, std: Standardizer) -> ModelParams:
    arch = Architecture(n, len(cfg.signature.scales), cfg.model.channels, cfg.model.kernels, cfg.model.strides)
    t = cfg.train
    return ModelParams.initialize(
        arch, t.ablation, t.h, t.chi, cfg.signature.scales, cfg.signature.gap, seed=t.seed, mean=std.mean, std=std.std
    )


def train(cfg: RunConfig, datasets: dict, n: int, std: Standardizer, progress=None) -> TrainResult:
    params = initial_params(cfg, n, std)
    return fit(params, datasets["train"], datasets.get("valid"), cfg.train, progress)


@dataclass
class Calibration:
    theta: np.ndarray
    tau: np.ndarray
    valid_scores: np.ndarray


def calibrate(cfg: RunConfig, params: ModelParams, valid: SequenceDataset) -> Calibration:
    recon = reconstruct(params, valid, cfg.detect.batch_size)
    res = det.residuals(valid.targets(), recon)
    theta = det.calibrate_theta(res, cfg.detect.quantile)
    scores = det.broken_scores(res, theta)
    tau = np.asarray(det.calibrate_tau(scores, cfg.detect.beta), dtype=np.float64)
    return Calibration(theta, tau, scores)


def run_detection(cfg: RunConfig, params: ModelParams, test: SequenceDataset, calib: Calibration):
    recon = reconstruct(params, test, cfg.detect.batch_size)
    res = det.residuals(test.targets(), recon)
    result = det.diagnose(
        test.anchors, res, calib.theta, calib.tau, cfg.detect.gap_merge, cfg.signature.gap, cfg.detect.detection_channel
    )
    return result, res


def label_channels(result: det.DetectionResult, labels, gap: int) -> list[frozenset]:
    """For each label, the set of channels with an event touching it."""
    out = []
    for lab in labels:
        lo, hi = label_window(lab, gap)
        out.append(frozenset(c for c, evs in result.channel_events.items() if any(ev.overlaps(lo, hi) for ev in evs)))
    return out


@dataclass
class ExperimentResult:
    config: RunConfig
    labels: list
    train: TrainResult
    calibration: Calibration
    detection: det.DetectionResult
    residuals: np.ndarray
    test_anchors: np.ndarray
    metrics: Metrics
    recall_at_k: float
    label_channels: list
    checkpoint_sha256: str
    wall_seconds: float
    timings: dict = field(default_factory=dict)

    def report_digest(self) -> str:
        """Hash of the detection outputs, for determinism checks."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.detection.scores).tobytes())
        h.update(np.ascontiguousarray(self.calibration.theta).tobytes())
        h.update(np.ascontiguousarray(self.calibration.tau).tobytes())
        for ev, rk in zip(self.detection.events, self.detection.rankings):
            h.update(repr((ev.start, ev.end, ev.peak, sorted(ev.channels), rk)).encode())
        return h.hexdigest()

    def severity_pattern(self) -> dict:
        return severity_pattern(self.labels, self.label_channels, len(self.calibration.tau))

    def summary(self) -> dict:
        return {
            **self.metrics.as_row(),
            "recall_at_k": self.recall_at_k,
            "epochs": len(self.train.history),
            "best_epoch": self.train.best_epoch,
            "initial_loss": self.train.initial_loss,
            "final_train_loss": self.train.history[-1].train_loss if self.train.history else None,
            "labels": [
                {**lab.to_dict(), "channels": sorted(ch)} for lab, ch in zip(self.labels, self.label_channels)
            ],
            **self.severity_pattern(),
            "checkpoint_sha256": self.checkpoint_sha256,
            "report_digest": self.report_digest(),
            "wall_seconds": self.wall_seconds,
            "timings": self.timings,
        }


def severity_pattern(labels, channels, n_channels: int) -> dict:
    """Which labels the shortest and longest channels caught.

    ``long_consistent`` is False when some longest-duration label caught in
    channel 0 is missed by another channel; ``short_only`` counts
    shortest-duration labels caught in channel 0 but not in the last channel.
    """
    longest = max((lab.duration for lab in labels), default=0)
    shortest = min((lab.duration for lab in labels), default=0)
    long_consistent, short_only = True, 0
    for lab, ch in zip(labels, channels):
        if lab.duration == longest and 0 in ch and len(ch) < n_channels:
            long_consistent = False
        if lab.duration == shortest and 0 in ch and (n_channels - 1) not in ch:
            short_only += 1
    return {"long_consistent": long_consistent, "short_only": short_only}


def evaluate_detection(result: det.DetectionResult, labels, gap: int, k: int):
    events = result.detection_events()
    metrics = event_metrics(events, labels, gap)
    rankings = [[i for i, _ in result.detection_rankings[j]] for _, j in metrics.matches]
    causes = [labels[i].root_causes for i, _ in metrics.matches]
    return metrics, recall_at_k(rankings, causes, k)


def run_experiment(cfg: RunConfig, progress=None) -> ExperimentResult:
    start = time.perf_counter()
    timings = {}
    series, labels = prepare_data(cfg)
    std = fit_standardizer(cfg, series)
    t0 = time.perf_counter()
    datasets = build_datasets(cfg, std.apply(series))
    timings["signatures"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    trained = train(cfg, datasets, series.n, std, progress)
    timings["train"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    calib = calibrate(cfg, trained.params, datasets["valid"])
    result, res = run_detection(cfg, trained.params, datasets["test"], calib)
    timings["detect"] = time.perf_counter() - t0
    metrics, rk = evaluate_detection(result, labels, cfg.signature.gap, cfg.detect.top_k)
    return ExperimentResult(
        cfg,
        labels,
        trained,
        calib,
        result,
        res,
        datasets["test"].anchors,
        metrics,
        rk,
        label_channels(result, labels, cfg.signature.gap),
        hashlib.sha256(checkpoint_bytes(trained.params)).hexdigest(),
        time.perf_counter() - start,
        timings,
    )

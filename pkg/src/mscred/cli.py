"""Command-line front end.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
``MSCRED_NUM_THREADS`` caps BLAS and numba threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, RunConfig, apply_overrides, preset
from .errors import ConfigError, DataError, MissingArtifactError, MscredError, NumericError

log = logging.getLogger("mscred")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _limit_threads() -> None:
    raw = os.environ.get("MSCRED_NUM_THREADS")
    if not raw:
        return
    count = int(raw)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(count)
    except ImportError:
        pass
    from . import _accel

    if _accel.USE_NUMBA:
        import numba

        numba.set_num_threads(min(count, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# config resolution and paths
# ---------------------------------------------------------------------------


class Workspace:
    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.root / p

    @property
    def data(self):
        return self.path(self.cfg.paths.data)

    @property
    def labels(self):
        return self.path(self.cfg.paths.labels)

    @property
    def checkpoint(self):
        return self.path(self.cfg.paths.checkpoint)

    @property
    def reports(self):
        return self.path(self.cfg.paths.reports_dir)

    def cache(self, part: str) -> Path:
        return self.path(self.cfg.paths.cache_dir) / f"{part}.sig"


def resolve_config(args) -> RunConfig:
    workdir = Path(args.workdir)
    if args.preset:
        cfg = preset(args.preset)
    elif args.config:
        cfg = RunConfig.load(args.config)
    elif (workdir / "config.json").exists():
        cfg = RunConfig.load(workdir / "config.json")
    else:
        cfg = preset("paper-synthetic")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _load_series(ws: Workspace):
    from .timeseries import load_csv

    if not ws.data.exists():
        raise MissingArtifactError(f"{ws.data} not found; run `mscred generate` or point paths.data at a CSV")
    return load_csv(ws.data, header=ws.cfg.csv_header)


def _datasets(ws: Workspace, series, mean, std, parts, h=None):
    """Sequence datasets for ``parts``, read from the cache when it matches."""
    from .signature import SequenceDataset, Standardizer, anchor_schedule, read_cache

    cfg = ws.cfg
    h = cfg.train.h if h is None else h
    normalized = Standardizer(mean, std).apply(series)
    out = {}
    for part in parts:
        anchors = anchor_schedule(getattr(cfg.splits, part), cfg.signature.scales, h, cfg.signature.gap)
        cached = ws.cache(part)
        if cached.exists():
            ds = read_cache(cached)
            if ds.scales == tuple(cfg.signature.scales) and ds.h == h and ds.g == cfg.signature.gap and list(ds.anchors) == anchors:
                out[part] = ds
                continue
            log.warning("ignoring stale signature cache %s", cached)
        out[part] = SequenceDataset(normalized, anchors, cfg.signature.scales, h, cfg.signature.gap)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args, ws: Workspace) -> int:
    from .pipeline import prepare_data
    from .timeseries import save_labels, write_csv

    cfg = ws.cfg
    if cfg.source != "synthetic":
        raise ConfigError("generate needs source = synthetic")
    series, labels = prepare_data(cfg)
    write_csv(series, ws.data)
    save_labels(labels, ws.labels)
    cfg.save(ws.root / "config.json")
    print(f"wrote {series.n}x{series.T} series to {ws.data} and {len(labels)} labels to {ws.labels}")
    return 0


def cmd_build_signatures(args, ws: Workspace) -> int:
    from .pipeline import fit_standardizer
    from .signature import write_cache

    series = _load_series(ws)
    std = fit_standardizer(ws.cfg, series)
    for part in ("train", "valid", "test"):
        path = ws.cache(part)
        if path.exists():
            path.unlink()
    datasets = _datasets(ws, series, std.mean, std.std, ("train", "valid", "test"))
    for part, ds in datasets.items():
        write_cache(ds, ws.cache(part))
        print(f"{part}: {len(ds)} sequences -> {ws.cache(part)}")
    return 0


def cmd_train(args, ws: Workspace) -> int:
    from .model import save
    from .pipeline import fit_standardizer, train

    series = _load_series(ws)
    std = fit_standardizer(ws.cfg, series)
    datasets = _datasets(ws, series, std.mean, std.std, ("train", "valid"))
    progress = lambda e: print(f"epoch {e.epoch}: train {e.train_loss:.6g} valid {e.valid_loss:.6g} ({e.wall_seconds:.1f}s)")
    result = train(ws.cfg, datasets, series.n, std, progress if not args.quiet else None)
    save(result.params, ws.checkpoint)
    result.write_log(ws.path(ws.cfg.paths.train_log))
    print(f"saved checkpoint {ws.checkpoint} (best epoch {result.best_epoch}, sha256 {result.params.checksum()[:16]})")
    return 0


def _require_checkpoint(ws: Workspace):
    from .model import load

    if not ws.checkpoint.exists():
        raise MissingArtifactError(f"no checkpoint at {ws.checkpoint}; train first (`mscred train`)")
    return load(ws.checkpoint)


def cmd_detect(args, ws: Workspace) -> int:
    from . import detect as det
    from .evaluation import write_score_traces
    from .pipeline import calibrate, run_detection

    params = _require_checkpoint(ws)
    series = _load_series(ws)
    if series.n != params.arch.n:
        raise DataError(f"checkpoint expects {params.arch.n} series, data has {series.n}")
    datasets = _datasets(ws, series, params.mean, params.std, ("valid", "test"), h=params.h)
    calib = calibrate(ws.cfg, params, datasets["valid"])
    result, res = run_detection(ws.cfg, params, datasets["test"], calib)
    ws.reports.mkdir(parents=True, exist_ok=True)
    det.write_residual_report(ws.reports / "residuals.jsonl", result.anchors, res, result.theta, result.scores)
    det.write_detection_report(ws.reports / "detection.jsonl", result, ws.cfg.detect.top_k)
    write_score_traces(ws.reports / "scores.csv", result.anchors, result.scores, result.tau)
    print(f"{len(result.events)} events ({len(result.detection_events())} in detection channel); reports in {ws.reports}")
    return 0


def _require_detection(ws: Workspace) -> dict:
    from . import detect as det

    path = ws.reports / "detection.jsonl"
    if not path.exists():
        raise MissingArtifactError(f"no detection report at {path}; run `mscred detect` first")
    return det.read_detection_report(path)


def cmd_diagnose(args, ws: Workspace) -> int:
    from .io_utils import atomic_write_text

    report = _require_detection(ws)
    k = ws.cfg.detect.top_k
    rows = []
    for ev in report["events"]:
        rows.append(
            {
                "start": ev["start"],
                "end": ev["end"],
                "peak": ev["peak"],
                "channels": ev["channels"],
                "severity": ev["severity"],
                "consistent": ev["consistent"],
                "root_causes": ev["root_causes"][:k],
            }
        )
        flag = "" if ev["consistent"] else " (inconsistent channel set)"
        print(f"[{ev['start']}, {ev['end']}] severity={ev['severity']}{flag} root causes={ev['root_causes'][:k]}")
    atomic_write_text(ws.reports / "diagnosis.json", json.dumps(rows, indent=2) + "\n")
    return 0


def cmd_eval(args, ws: Workspace) -> int:
    from .detect import Event
    from .evaluation import event_metrics, recall_at_k, write_metrics_csv
    from .timeseries import load_labels

    report = _require_detection(ws)
    if not ws.labels.exists():
        raise MissingArtifactError(f"no labels at {ws.labels}")
    labels = load_labels(ws.labels)
    channel = ws.cfg.detect.detection_channel
    events = report["channel_events"].get(channel, [])
    metrics = event_metrics(events, labels, ws.cfg.signature.gap)
    rankings = [report["detection_rankings"][j] for _, j in metrics.matches]
    causes = [labels[i].root_causes for i, _ in metrics.matches]
    rk = recall_at_k(rankings, causes, ws.cfg.detect.top_k)
    row = {**metrics.as_row(), f"recall_at_{ws.cfg.detect.top_k}": rk}
    write_metrics_csv(ws.reports / "metrics.csv", [row])
    print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_noise_sweep(args, ws: Workspace) -> int:
    from .evaluation import noise_sweep

    lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    out = ws.reports / "noise_sweep.csv"
    rows = noise_sweep(lambdas, ws.cfg, out, ws.reports / "traces")
    for row in rows:
        print(f"lambda={row['lambda']:g} precision={row['precision']:.3f} recall={row['recall']:.3f} f1={row['f1']:.3f}")
    return 0


def cmd_grad_check(args, ws: Workspace) -> int:
    from . import autodiff as ad
    from .model import Architecture, ModelParams, forward, reconstruction_loss, trainable_weights

    cfg = ws.cfg if args.use_config else preset("toy")
    rng = np.random.Generator(np.random.PCG64(args.seed))
    arch = Architecture(cfg.synth.n, len(cfg.signature.scales), cfg.model.channels, cfg.model.kernels, cfg.model.strides)
    params = ModelParams.initialize(arch, cfg.train.ablation, args.h, cfg.train.chi, cfg.signature.scales, seed=args.seed)
    x = rng.normal(size=(args.batch, args.h, arch.n, arch.n, arch.s))
    weights = trainable_weights(params)
    loss_fn = lambda: reconstruction_loss(x[:, -1], forward(weights, x, arch, params.ablation, params.chi)[0])
    report = ad.grad_check(loss_fn, weights, eps=1e-5, max_entries=args.max_entries, seed=args.seed)
    ok = report.passed(args.tol)
    print(f"grad-check {'PASS' if ok else 'FAIL'}: max rel. error {report.max_rel_error:.3e} over {report.checked} entries (tol {args.tol:g})")
    if args.verbose:
        for name, err in sorted(report.per_param.items(), key=lambda kv: -kv[1]):
            print(f"  {name:16s} {err:.3e}")
    return 0 if ok else 3


COMMANDS = {
    "generate": cmd_generate,
    "build-signatures": cmd_build_signatures,
    "train": cmd_train,
    "detect": cmd_detect,
    "diagnose": cmd_diagnose,
    "eval": cmd_eval,
    "noise-sweep": cmd_noise_sweep,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--workdir", default=".", help="directory holding data, checkpoint and reports")
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--preset", choices=PRESETS, help="start from a shipped preset")
    common.add_argument("--seed", type=int, help="global seed (derives data, injection and training seeds)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = _Parser(prog="mscred", description="Multi-scale signature-matrix anomaly detection and diagnosis.")
    parser.add_argument("--version", action="version", version=f"mscred {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="synthetic data and injected anomaly labels")
    sub.add_parser("build-signatures", parents=[common], help="precompute signature sequence caches")
    sub.add_parser("train", parents=[common], help="fit the model and write a checkpoint")
    sub.add_parser("detect", parents=[common], help="residual and detection reports from a checkpoint")
    sub.add_parser("diagnose", parents=[common], help="root causes and severity per detected event")
    sub.add_parser("eval", parents=[common], help="precision/recall/F1 and recall@k against labels")
    sweep = sub.add_parser("noise-sweep", parents=[common], help="retrain and evaluate per noise factor")
    sweep.add_argument("--lambdas", default="0.2,0.25,0.3,0.35,0.4,0.45")
    gc = sub.add_parser("grad-check", parents=[common], help="finite-difference check of model gradients")
    gc.add_argument("--h", type=int, default=2)
    gc.add_argument("--batch", type=int, default=2)
    gc.add_argument("--max-entries", type=int, default=20, help="entries sampled per parameter array")
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.add_argument("--use-config", action="store_true", help="check the resolved config's architecture instead of the toy preset")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mscred: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        cfg = resolve_config(args)
        ws = Workspace(args.workdir, cfg)
        if args.seed is None and args.command == "grad-check":
            args.seed = 0
        return COMMANDS[args.command](args, ws)
    except MscredError as exc:
        print(f"mscred: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"mscred: numeric failure: {exc}", file=sys.stderr)
        return NumericError.exit_code


if __name__ == "__main__":
    sys.exit(main())

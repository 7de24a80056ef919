"""Full-size synthetic runs: one JSON summary per seed.

    python3 scripts/full_scale.py --seeds 0 1 2 --out runs/full
"""

import argparse
import json
import time
from pathlib import Path

from mscred.config import preset
from mscred.pipeline import run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="paper-synthetic")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/full")
    ap.add_argument("--ablation", default="full")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in args.seeds:
        cfg = preset(args.preset).with_seed(seed)
        if args.ablation != "full":
            from dataclasses import replace

            cfg = replace(cfg, train=replace(cfg.train, ablation=args.ablation))
        t0 = time.perf_counter()

        def progress(e):
            print(f"seed {seed} epoch {e.epoch}: train {e.train_loss:.4g} valid {e.valid_loss:.4g} "
                  f"({time.perf_counter() - t0:.0f}s)", flush=True)

        res = run_experiment(cfg, progress)
        summary = res.summary()
        (out / f"seed{seed}.json").write_text(json.dumps(summary, indent=2) + "\n")
        print(json.dumps({k: summary[k] for k in ("precision", "recall", "f1", "recall_at_k", "wall_seconds")}), flush=True)


if __name__ == "__main__":
    main()

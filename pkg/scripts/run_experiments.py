"""Desk-scale comparison runs: AGC minibatch/learning-rate pairs, AGC vs BN vs
no normalisation. Each run writes metrics.csv and final.agcn under --out.

    python scripts/run_experiments.py --out runs --epochs 30
"""

import argparse
import logging
from pathlib import Path

from agcnet.optim import TrainConfig
from agcnet.trainer import load_data, run

RUNS = {
    "agc_mb1": dict(norm_mode="agc", minibatch_size=1),
    "agc_mb4": dict(norm_mode="agc", minibatch_size=4),
    "bn_mb4": dict(norm_mode="bn", minibatch_size=4),
    "none_mb4": dict(norm_mode="none", minibatch_size=4),
    "agc_mb8": dict(norm_mode="agc", minibatch_size=8),
    "bn_mb8": dict(norm_mode="bn", minibatch_size=8),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--only", nargs="*", default=["agc_mb1", "agc_mb4", "bn_mb4", "none_mb4"],
                    choices=sorted(RUNS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = TrainConfig(base_lr=0.02, epochs=args.epochs, seed=args.seed)
    data = load_data(base)
    for name in args.only:
        cfg = TrainConfig(**{**base.__dict__, **RUNS[name]})
        logging.info("run %s lr=%.3f", name, cfg.base_lr * cfg.minibatch_size)
        _, records = run(cfg, Path(args.out) / name, data=data)
        last = records[-1]
        print(f"{name}: final val pixel error {last.val_pixel_error:.4f} val loss {last.val_loss:.4f}",
              flush=True)


if __name__ == "__main__":
    main()

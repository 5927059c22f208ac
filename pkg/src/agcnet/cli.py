"""Command-line entry point: ``agcnet {gen-data,train,gradcheck,bench,lambda-report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from agcnet.optim import TrainConfig, config_from_mapping, format_config, load_config


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--norm", choices=("agc", "bn", "none"))
    p.add_argument("--minibatch", type=int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--lr-scale", choices=("on", "off"))
    p.add_argument("--gems", choices=("on", "off"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="out")


def _config(args) -> TrainConfig:
    base = load_config(args.config) if args.config else TrainConfig()
    overrides = {
        "norm_mode": args.norm, "minibatch_size": args.minibatch, "base_lr": args.base_lr,
        "lr_scale": args.lr_scale, "gems_enabled": args.gems, "seed": args.seed,
        "epochs": args.epochs,
    }
    return config_from_mapping({k: str(v) for k, v in overrides.items() if v is not None}, base)


def cmd_gen_data(args) -> int:
    from agcnet.data import generate, save_split
    from agcnet.trainer import dataset_spec

    cfg = _config(args)
    spec = dataset_spec(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = generate(spec)
    save_split(out / "train.agcd", train_set)
    save_split(out / "val.agcd", val_set)
    print(f"wrote {len(train_set)} train / {len(val_set)} val samples ({spec.H}x{spec.W}, K={spec.K}) to {out}")
    return 0


def cmd_train(args) -> int:
    from agcnet.trainer import run

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    _, records = run(cfg, out)
    last = records[-1]
    print(f"epoch={last.epoch} val_pixel_error={last.val_pixel_error:.4f} val_loss={last.val_loss:.4f}")
    print(f"metrics={out / 'metrics.csv'} checkpoint={out / 'final.agcn'}")
    return 0


def cmd_gradcheck(args) -> int:
    from agcnet.gradcheck import run_all, tolerance

    worst = run_all(range(args.fixtures))
    ok = True
    for suite, err in worst.items():
        tol = tolerance(suite)
        passed = err < tol
        ok &= passed
        print(f"{suite:14s} max_rel_err={err:.3e} tol={tol:.0e} {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    from agcnet.bench import BenchReport, bench_pair
    from agcnet.trainer import NetworkSpec

    cfg = _config(args)
    spec = NetworkSpec.segnet(cfg.widths)
    reports = bench_pair(spec, cfg.minibatch_size if args.minibatch else 8, args.steps,
                         warmup=args.warmup, seed=cfg.seed, image_size=cfg.image_size)
    for r in reports:
        print(r.as_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(BenchReport.csv_header() + "\n"
                                   + "".join(r.csv_row() + "\n" for r in reports))
    return 0


def cmd_lambda_report(args) -> int:
    from agcnet.trainer import read_metrics_csv

    rows = read_metrics_csv(args.metrics)
    layers = [k[len("lambda_"):-len("_mean")] for k in rows[0] if k.startswith("lambda_") and k.endswith("_mean")] if rows else []
    if not layers:
        print("no lambda columns (not an AGC run?)", file=sys.stderr)
        return 1
    lo, hi = args.range
    print("epoch," + ",".join(layers))
    for row in rows:
        print(f"{int(row['epoch'])}," + ",".join(f"{row[f'lambda_{n}_mean']:.4f}" for n in layers))
    last = rows[-1]
    inside = sum(lo <= last[f"lambda_{n}_min"] and last[f"lambda_{n}_max"] <= hi for n in layers)
    overall_lo = min(last[f"lambda_{n}_min"] for n in layers)
    overall_hi = max(last[f"lambda_{n}_max"] for n in layers)
    print(f"final lambda range [{overall_lo:.4f}, {overall_hi:.4f}]; "
          f"{inside}/{len(layers)} layers entirely within [{lo:g}, {hi:g}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="agcnet", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/val files")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write metrics.csv + checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--fixtures", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="paired AGC/BN step time and memory")
    _add_config_flags(p)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("lambda-report", help="lambda trajectories from a metrics CSV")
    p.add_argument("metrics")
    p.add_argument("--range", type=float, nargs=2, default=(0.0, 2.0), metavar=("LO", "HI"))
    p.set_defaults(func=cmd_lambda_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"agcnet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Paired AGC / batch-norm training-step benchmark.

Both modes share the network spec, seed, data and optimiser settings; only
``norm_mode`` differs. Timed steps alternate between the two modes so slow
drift of the machine affects both equally. Memory is the peak of bytes held
by tensors, tape buffers and gradients during a step, above the live level
at step start.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from agcnet.data import DatasetSpec, generate
from agcnet.optim import SgdState, TrainConfig, effective_lr, make_rng
from agcnet.trainer import NetworkSpec, build_network, class_weights_for, train_step

MIN_STEPS = 30


@dataclass
class BenchReport:
    mode: str
    minibatch_size: int
    steps: int
    mean_step_ms: float
    peak_bytes: int
    time_ratio: float = float("nan")  # this mode / paired mode
    memory_ratio: float = float("nan")
    oom: bool = False

    def as_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @staticmethod
    def csv_header() -> str:
        return ",".join(f.name for f in dataclasses.fields(BenchReport))

    def csv_row(self) -> str:
        return ",".join(_fmt(getattr(self, f.name)) for f in dataclasses.fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def bench_pair(network_spec: NetworkSpec, minibatch: int, steps: int, warmup: int = 3,
               seed: int = 0, image_size: int = 64,
               modes: tuple[str, str] = ("agc", "bn")) -> tuple[BenchReport, BenchReport]:
    """Time ``steps`` training steps per mode after ``warmup`` untimed ones."""
    if steps < MIN_STEPS:
        raise ValueError(f"need at least {MIN_STEPS} timed steps, got {steps}")
    if minibatch < 1:
        raise ValueError("minibatch must be positive")
    network_spec.validate()
    network_spec.check_input(image_size, image_size)

    n = minibatch * 4
    data, _ = generate(DatasetSpec(H=image_size, W=image_size, K=network_spec.num_classes,
                                   n_train=n, n_val=0, seed=seed,
                                   pool_depth=network_spec.pool_depth))
    weights = class_weights_for(data)
    base = TrainConfig(minibatch_size=minibatch, seed=seed)
    configs = [dataclasses.replace(base, norm_mode=m) for m in modes]
    for a in configs[1:]:
        if dataclasses.replace(a, norm_mode=configs[0].norm_mode) != configs[0]:
            raise AssertionError("paired configs differ beyond norm_mode")

    runs = []
    for cfg in configs:
        net = build_network(network_spec, cfg.norm_mode, make_rng(cfg.seed, "init"))
        runs.append({"net": net, "sgd": SgdState(effective_lr(cfg), cfg.momentum),
                     "times": [], "peak": 0, "oom": False})
    batches = [(data.images[i:i + minibatch], data.labels[i:i + minibatch])
               for i in range(0, n, minibatch)]

    def step(run, k):
        x, y = batches[k % len(batches)]
        t0 = time.perf_counter()
        _, peak = train_step(run["net"], x, y, weights, run["sgd"])
        return time.perf_counter() - t0, peak

    with threadpool_limits(limits=1):
        for k in range(warmup + steps):
            for run in runs:
                if run["oom"]:
                    continue
                try:
                    dt, peak = step(run, k)
                except MemoryError:
                    run["oom"] = True
                    continue
                if k >= warmup:
                    run["times"].append(dt)
                    run["peak"] = max(run["peak"], peak)

    reports = []
    for cfg, run in zip(configs, runs):
        mean_ms = 1e3 * float(np.mean(run["times"])) if run["times"] and not run["oom"] else float("nan")
        reports.append(BenchReport(cfg.norm_mode, minibatch, len(run["times"]), mean_ms,
                                   run["peak"], oom=run["oom"]))
    a, b = reports
    a.time_ratio = b.time_ratio = float("nan")
    if not (a.oom or b.oom):
        a.time_ratio, b.time_ratio = a.mean_step_ms / b.mean_step_ms, b.mean_step_ms / a.mean_step_ms
        a.memory_ratio, b.memory_ratio = a.peak_bytes / b.peak_bytes, b.peak_bytes / a.peak_bytes
    return a, b

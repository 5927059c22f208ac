"""One test per acceptance criterion; each prints a PASS/FAIL line in the
terminal summary. Criteria 5, 6 and 9 share four full-scale training runs
(default task, 30 epochs) and take roughly an hour on a single core."""

import dataclasses
import math

import numpy as np
import pytest

from agcnet import gradcheck
from agcnet.bench import bench_pair
from agcnet.layers import BatchNormState, agc_forward, batchnorm_forward
from agcnet.optim import SgdState, TrainConfig, effective_lr, gems_normalize, make_rng, sgd_momentum_step
from agcnet.tensor import Tensor
from agcnet.trainer import NetworkSpec, load_data, network_for, read_metrics_csv, run

FIXTURES = 50
FULL = TrainConfig()  # default task, 30 epochs, base lr 0.02 scaled by minibatch
FULL_RUNS = {
    "agc_mb1": dict(norm_mode="agc", minibatch_size=1),
    "agc_mb4": dict(norm_mode="agc", minibatch_size=4),
    "bn_mb4": dict(norm_mode="bn", minibatch_size=4),
    "none_mb4": dict(norm_mode="none", minibatch_size=4),
}
SMALL = TrainConfig(widths=(4, 8), image_size=16, n_train=16, n_val=8, epochs=3,
                    minibatch_size=4, record_timing=False)


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("full")
    data = load_data(FULL)
    out = {}
    for name, overrides in FULL_RUNS.items():
        cfg = dataclasses.replace(FULL, **overrides)
        _, records = run(cfg, root / name, data=data)
        out[name] = (cfg, records, root / name)
    return out


@pytest.mark.criterion(1, "gradient correctness")
def test_gradient_correctness(criterion):
    for name, fn in gradcheck.OP_CHECKS.items():
        worst = max(max(fn(np.random.default_rng(seed)).values()) for seed in range(FIXTURES))
        criterion.check(worst < gradcheck.OP_TOL, f"{name} {worst:.1e}<{gradcheck.OP_TOL:.0e} x{FIXTURES}")
    for mode in ("agc", "bn", "none"):
        worst = max(max(gradcheck.check_network(np.random.default_rng(seed), mode).values())
                    for seed in range(3))
        criterion.check(worst < gradcheck.NET_TOL, f"net_{mode} {worst:.1e}<{gradcheck.NET_TOL:.0e}")


@pytest.mark.criterion(2, "per-sample transform invariants")
def test_transform_invariants(criterion):
    rng = np.random.default_rng(0)
    worst_id, worst_mean, permuted_equal = 0.0, 0.0, True
    for _ in range(FIXTURES):
        n, c = rng.integers(1, 6), rng.integers(1, 5)
        z = rng.standard_normal((n, c, 6, 5)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
        worst_id = max(worst_id, np.abs(agc_forward(z, np.zeros(c), np.ones(c), np.zeros(c)) - z).max())
        out = agc_forward(z, np.ones(c), rng.uniform(-3, 3, c), np.zeros(c))
        worst_mean = max(worst_mean, np.abs(out.mean(axis=(2, 3))).max())
        lam, gamma, beta = (rng.standard_normal(c) for _ in range(3))
        perm = rng.permutation(n)
        permuted_equal &= np.array_equal(agc_forward(z[perm], lam, gamma, beta),
                                         agc_forward(z, lam, gamma, beta)[perm])
    criterion.check(worst_id <= 1e-15, f"identity err {worst_id:.1e}<=1e-15")
    criterion.check(worst_mean <= 1e-6, f"|mean| {worst_mean:.1e}<=1e-6")
    criterion.check(bool(permuted_equal), "permutation exact")
    z = np.array([0.0, 0, 0, 8]).reshape(1, 1, 2, 2)
    criterion.check(np.array_equal(agc_forward(z, [1.0], [1.0], [0.0]).ravel(), [-2, -2, -2, 6]),
                    "no std division")


@pytest.mark.criterion(3, "batch norm at minibatch 1")
def test_batchnorm_minibatch_one(criterion):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(FIXTURES):
        c = int(rng.integers(1, 5))
        z = rng.standard_normal((1, c, 7, 6)) * rng.uniform(0.1, 5) + rng.uniform(-3, 3)
        scale, shift = rng.standard_normal(c), rng.standard_normal(c)
        out, _ = batchnorm_forward(z, scale, shift, BatchNormState.fresh(c, dtype=np.float64), "train")
        for ch in range(c):
            m = z[0, ch]
            ref = (m - m.mean()) / math.sqrt(((m - m.mean()) ** 2).mean() + 1e-5) * scale[ch] + shift[ch]
            worst = max(worst, np.abs(out[0, ch] - ref).max())
    criterion.check(worst <= 1e-12, f"max err {worst:.1e}<=1e-12")


@pytest.mark.criterion(4, "momentum recursion vs unrolled sum")
def test_momentum_identity(criterion):
    rng = np.random.default_rng(2)
    lr, m = 0.08, 0.9
    state = SgdState(lr, m)
    params = {"p": Tensor(np.zeros(10))}
    grads, worst = [], 0.0
    for i in range(20):
        grads.append(rng.standard_normal(10))
        params = sgd_momentum_step(params, {"p": grads[-1]}, state)
        unrolled = lr * sum(m ** (i - k) * g for k, g in enumerate(grads))
        worst = max(worst, np.abs(state.velocity["p"] - unrolled).max())
    criterion.check(worst <= 1e-12, f"20 steps max err {worst:.1e}<=1e-12")


def _final_error(records) -> float:
    return records[-1].val_pixel_error


@pytest.mark.slow
@pytest.mark.criterion(5, "learning rate x minibatch scaling")
def test_lr_minibatch_scaling(criterion, full_runs):
    (c1, r1, _), (c4, r4, _) = full_runs["agc_mb1"], full_runs["agc_mb4"]
    criterion.note(f"effective lr {effective_lr(c1):g}/{effective_lr(c4):g}")
    assert effective_lr(c1) == pytest.approx(0.02) and effective_lr(c4) == pytest.approx(0.08)
    e1, e4 = _final_error(r1), _final_error(r4)
    gap = abs(e1 - e4) * 100
    criterion.check(gap <= 2.0, f"mb1 {e1:.2%} vs mb4 {e4:.2%}, gap {gap:.2f}pp<=2")


@pytest.mark.slow
@pytest.mark.criterion(6, "AGC vs BN parity")
def test_agc_bn_parity(criterion, full_runs):
    agc, bn, none = (_final_error(full_runs[k][1]) for k in ("agc_mb4", "bn_mb4", "none_mb4"))
    gap = abs(agc - bn) * 100
    criterion.check(gap <= 1.0, f"agc {agc:.2%} vs bn {bn:.2%}, gap {gap:.2f}pp<=1")
    criterion.check(agc < none and bn < none, f"none {none:.2%} worse than both")


@pytest.mark.criterion(7, "resource direction at minibatch 8")
def test_resource_direction(criterion):
    agc, bn = bench_pair(NetworkSpec.segnet(FULL.widths), minibatch=8, steps=30)
    criterion.note(f"time ratio {agc.time_ratio:.3f}, memory ratio {agc.memory_ratio:.3f}")
    criterion.check(agc.mean_step_ms <= bn.mean_step_ms,
                    f"step {agc.mean_step_ms:.0f}ms<={bn.mean_step_ms:.0f}ms")
    criterion.check(agc.peak_bytes < bn.peak_bytes, f"peak {agc.peak_bytes}<{bn.peak_bytes}")


@pytest.mark.criterion(8, "GEMS consistency")
def test_gems(criterion):
    rng = np.random.default_rng(3)
    g = rng.standard_normal((6, 4, 3, 3))
    criterion.check(np.array_equal(gems_normalize(g, np.full(6, 50), 50), g / 50), "dense == standard")
    criterion.check(not gems_normalize(g, np.zeros(6, int), 50).any(), "zero active -> zero")
    cfg = dataclasses.replace(SMALL, gems_enabled=True)
    _, records = run(cfg)
    criterion.check(all(math.isfinite(r.train_loss) for r in records[1:]),
                    f"smoke run final loss {records[-1].train_loss:.4f}")


@pytest.mark.slow
@pytest.mark.criterion(9, "lambda telemetry")
def test_lambda_telemetry(criterion, full_runs):
    _, records, out = full_runs["agc_mb4"]
    rows = read_metrics_csv(out / "metrics.csv")
    criterion.check(len(rows) == FULL.epochs + 1, f"{len(rows)} trajectory rows")
    lam_cols = [k for k in rows[0] if k.startswith("lambda_")]
    criterion.check(bool(lam_cols) and all(math.isfinite(r[k]) for r in rows for k in lam_cols),
                    f"{len(lam_cols)} lambda columns finite")
    lo = min(v for _, v, _, _ in records[-1].lambdas)
    hi = max(v for _, _, _, v in records[-1].lambdas)
    inside = sum(0 <= a and b <= 2 for _, a, _, b in records[-1].lambdas)
    criterion.note(f"final range [{lo:.3f}, {hi:.3f}], {inside}/{len(records[-1].lambdas)} layers in [0, 2]")


@pytest.mark.criterion(10, "determinism and persistence")
def test_determinism(criterion, tmp_path):
    run(SMALL, tmp_path / "a")
    run(SMALL, tmp_path / "b")
    criterion.check((tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes(),
                    "metrics CSV byte-identical")
    for mode in ("agc", "bn"):
        cfg = dataclasses.replace(SMALL, norm_mode=mode)
        net, _ = run(cfg, tmp_path / mode)
        fresh = network_for(dataclasses.replace(cfg, seed=7))
        fresh.load(tmp_path / mode / "final.agcn")
        x = make_rng(0, "bench").uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
        same = net.forward(x, training=False)[0].data.tobytes() == fresh.forward(x, training=False)[0].data.tobytes()
        criterion.check(same, f"{mode} checkpoint forward bit-exact")

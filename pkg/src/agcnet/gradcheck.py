"""Central finite-difference checks of tape gradients (float64).

Every check returns ``{input_name: max_relative_error}``. Relative error is
``|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`` elementwise.
Central differences at ``STEP`` carry roundoff near ``1e-16 * |loss| / STEP``
(about 1e-11), so components smaller than ``FLOOR`` are measured against
``FLOOR`` rather than their own size.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from agcnet.layers import BatchNormState, agc, batchnorm, conv2d, maxpool2x2, relu, softmax_xent, unpool2x2
from agcnet.tensor import Tape, Tensor, mul, reduce_mean, reduce_sum, sub

STEP = 1e-5
FLOOR = 1e-6
OP_TOL = 1e-4
NET_TOL = 1e-3


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def tape_gradients(build: Callable[[dict[str, Tensor]], Tensor],
                   values: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    tensors = {k: Tensor(np.asarray(v, np.float64)) for k, v in values.items()}
    with Tape() as tape:
        tape.watch(*tensors.values())
        loss = build(tensors)
    grads = tape.backward(loss)
    return {k: grads[t] for k, t in tensors.items()}


def numeric_gradients(build: Callable[[dict[str, Tensor]], Tensor],
                      values: Mapping[str, np.ndarray], step: float = STEP) -> dict[str, np.ndarray]:
    base = {k: np.array(v, dtype=np.float64) for k, v in values.items()}

    def f():
        return float(build({k: Tensor(v) for k, v in base.items()}).data)

    out = {}
    for k, arr in base.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out[k] = g
    return out


def check(build, values, step: float = STEP) -> dict[str, float]:
    analytic = tape_gradients(build, values)
    numeric = numeric_gradients(build, values, step)
    return {k: rel_error(analytic[k], numeric[k]) for k in values}


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    return reduce_sum(mul(out, Tensor(proj)))


# --------------------------------------------------------------------------
# per-op fixtures

def check_tensor_ops(rng: np.random.Generator, shape=(2, 3, 4, 2)) -> dict[str, float]:
    proj = rng.standard_normal(shape)

    def build(t):
        a, b = t["a"], t["b"]
        centred = sub(a, reduce_mean(a, axes=(2, 3)))
        return _projected(mul(centred, b) + a * 0.5, proj)

    return check(build, {"a": rng.standard_normal(shape), "b": rng.standard_normal(shape)})


def check_agc(rng: np.random.Generator, shape=(2, 3, 4, 5)) -> dict[str, float]:
    c = shape[1]
    proj = rng.standard_normal(shape)
    values = {"z": rng.standard_normal(shape) + rng.standard_normal((1, c, 1, 1)),
              "lambda": rng.uniform(-0.5, 2.0, c), "gamma": rng.uniform(0.2, 2.0, c),
              "beta": rng.standard_normal(c)}
    return check(lambda t: _projected(agc(t["z"], t["lambda"], t["gamma"], t["beta"]), proj), values)


def check_batchnorm(rng: np.random.Generator, shape=(3, 2, 4, 4)) -> dict[str, float]:
    c = shape[1]
    proj = rng.standard_normal(shape)
    state = BatchNormState.fresh(c, dtype=np.float64)
    values = {"z": rng.standard_normal(shape) * rng.uniform(0.5, 2.0, (1, c, 1, 1)),
              "scale": rng.uniform(0.5, 2.0, c), "shift": rng.standard_normal(c)}
    return check(lambda t: _projected(batchnorm(t["z"], t["scale"], t["shift"], state, True), proj),
                 values)


def check_conv(rng: np.random.Generator, shape=(2, 3, 5, 6), out_ch: int = 4,
               kernel: int = 3) -> dict[str, float]:
    n, c, h, w = shape
    proj = rng.standard_normal((n, out_ch, h, w))
    values = {"x": rng.standard_normal(shape), "W": rng.standard_normal((out_ch, c, kernel, kernel))}
    return check(lambda t: _projected(conv2d(t["x"], t["W"]), proj), values)


def _separated(rng, shape, gap=1e-2) -> np.ndarray:
    """Values whose pairwise gaps exceed ``gap``, so no max or sign flips
    under finite-difference perturbation."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n // 2 + 0.5) * gap
    return vals.reshape(shape)


def check_relu(rng: np.random.Generator, shape=(2, 2, 3, 3)) -> dict[str, float]:
    proj = rng.standard_normal(shape)
    return check(lambda t: _projected(relu(t["z"]), proj), {"z": _separated(rng, shape)})


def check_pool(rng: np.random.Generator, shape=(2, 2, 4, 6)) -> dict[str, float]:
    proj_pool = rng.standard_normal((shape[0], shape[1], shape[2] // 2, shape[3] // 2))
    proj_full = rng.standard_normal(shape)

    def build(t):
        y, idx = maxpool2x2(t["x"])
        up = unpool2x2(mul(y, Tensor(proj_pool)), idx)
        return _projected(up, proj_full) + reduce_sum(mul(y, Tensor(proj_pool)))

    return check(build, {"x": _separated(rng, shape)})


def check_xent(rng: np.random.Generator, shape=(2, 4, 3, 3)) -> dict[str, float]:
    n, k, h, w = shape
    labels = rng.integers(0, k, size=(n, h, w))
    labels.reshape(-1)[0] = 255  # one ignored pixel
    weights = rng.uniform(0.5, 1.5, k)
    weights *= k / weights.sum()
    return check(lambda t: softmax_xent(t["logits"], labels, weights),
                 {"logits": rng.standard_normal(shape) * 2})


OP_CHECKS = {
    "tensor_ops": check_tensor_ops,
    "conv2d": check_conv,
    "agc": check_agc,
    "batchnorm": check_batchnorm,
    "relu": check_relu,
    "pool_unpool": check_pool,
    "softmax_xent": check_xent,
}


def check_network(rng: np.random.Generator, norm_mode: str, batch: int = 2) -> dict[str, float]:
    """End-to-end check of every parameter of a 2-level 8x8 network."""
    from agcnet.trainer import NetworkSpec, build_network

    spec = NetworkSpec.segnet(widths=(2, 3), num_classes=3)
    net = build_network(spec, norm_mode, rng, dtype=np.float64)
    # move lambda/gamma/beta off their initial values so every term is exercised
    for name, t in list(net.params.items()):
        if not name.endswith("/W"):
            net.params[name] = Tensor(t.data + rng.uniform(-0.3, 0.3, t.shape))
    x = rng.uniform(0, 1, (batch, 3, 8, 8))
    labels = rng.integers(0, 3, (batch, 8, 8))
    weights = np.ones(3)

    def build(t):
        net.params = dict(t)
        logits, _ = net.forward(x, training=True)
        return softmax_xent(logits, labels, weights)

    values = {k: v.data for k, v in net.params.items()}
    return check(build, values)


def run_all(seeds=range(3)) -> dict[str, float]:
    """Max error per suite over fixed fixtures (used by the CLI)."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, fn in OP_CHECKS.items():
            err = max(fn(rng).values())
            worst[name] = max(worst.get(name, 0.0), err)
        for mode in ("agc", "bn", "none"):
            err = max(check_network(rng, mode).values())
            key = f"network_{mode}"
            worst[key] = max(worst.get(key, 0.0), err)
    return worst


def tolerance(suite: str) -> float:
    return NET_TOL if suite.startswith("network") else OP_TOL

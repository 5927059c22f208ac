"""Network assembly, the training loop, validation metrics, lambda telemetry
and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from agcnet import checkpoint
from agcnet.data import DatasetSpec, SegmentationSet, class_frequencies, enet_class_weights, generate, load_split
from agcnet.layers import BatchNormState, agc, batchnorm, conv2d, maxpool2x2, relu, softmax_xent, unpool2x2, weighted_softmax_xent
from agcnet.optim import NORM_MODES, SgdState, TrainConfig, effective_lr, gems_normalize, he_fan_in_init, make_rng, sgd_momentum_step
from agcnet.tensor import TRACKER, Tape, Tensor

log = logging.getLogger(__name__)

EVAL_BATCH = 8


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | unpool
    name: str = ""
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 3
    norm: bool = True
    relu: bool = True


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    num_classes: int
    layers: tuple[LayerSpec, ...]

    @classmethod
    def segnet(cls, widths=(16, 32, 64, 64), in_channels: int = 3, num_classes: int = 5,
               convs_per_level: int = 2) -> "NetworkSpec":
        """Encoder/decoder with index unpooling and no skip connections."""
        widths = tuple(widths)
        if not widths or convs_per_level < 1:
            raise ValueError("need at least one level and one conv per level")
        layers: list[LayerSpec] = []
        ch = in_channels
        for lvl, w in enumerate(widths, 1):
            for k in range(1, convs_per_level + 1):
                layers.append(LayerSpec("conv", f"enc{lvl}_{k}", ch, w))
                ch = w
            layers.append(LayerSpec("pool", f"pool{lvl}"))
        for lvl in range(len(widths), 0, -1):
            layers.append(LayerSpec("unpool", f"unpool{lvl}"))
            w = widths[lvl - 1]
            out_last = widths[lvl - 2] if lvl > 1 else widths[0]
            for k in range(1, convs_per_level + 1):
                out = out_last if k == convs_per_level else w
                layers.append(LayerSpec("conv", f"dec{lvl}_{k}", ch, out))
                ch = out
        layers.append(LayerSpec("conv", "classifier", ch, num_classes, kernel=1, norm=False, relu=False))
        spec = cls(in_channels, num_classes, tuple(layers))
        spec.validate()
        return spec

    @property
    def pool_depth(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == "pool")

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == "conv"]

    def validate(self) -> None:
        depth, ch, names = 0, self.in_channels, set()
        for layer in self.layers:
            if layer.kind == "pool":
                depth += 1
            elif layer.kind == "unpool":
                depth -= 1
                if depth < 0:
                    raise ValueError(f"{layer.name}: unpool without a matching pool")
            elif layer.kind == "conv":
                if layer.in_ch != ch:
                    raise ValueError(f"{layer.name}: expects {layer.in_ch} channels, receives {ch}")
                if layer.out_ch < 1 or layer.kernel < 1 or layer.kernel % 2 == 0:
                    raise ValueError(f"{layer.name}: bad width or kernel")
                if layer.name in names:
                    raise ValueError(f"duplicate layer name {layer.name}")
                names.add(layer.name)
                ch = layer.out_ch
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        if depth != 0:
            raise ValueError("encoder and decoder pooling depths differ")
        if ch != self.num_classes:
            raise ValueError(f"network ends with {ch} channels, expected {self.num_classes}")

    def check_input(self, h: int, w: int) -> None:
        f = 2 ** self.pool_depth
        if h % f or w % f:
            raise ValueError(f"spatial size {h}x{w} not divisible by {f}")


class Network:
    """Parameters plus batch-norm running statistics for a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, norm_mode: str, params: dict[str, Tensor],
                 bn_state: dict[str, BatchNormState] | None = None):
        self.spec = spec
        self.norm_mode = norm_mode
        self.params = params
        self.bn_state = bn_state or {}

    @property
    def norm_layers(self) -> list[str]:
        if self.norm_mode == "none":
            return []
        return [layer.name for layer in self.spec.conv_layers if layer.norm]

    def forward(self, x, training: bool = True, collect_activity: bool = False):
        """Logits for a batch ``x`` of shape (s, c, h, w).

        Returns ``(logits, activity)`` where ``activity`` maps each gated
        layer to ``(active_count_per_filter, total_positions)`` when
        ``collect_activity`` is set.
        """
        h = x if isinstance(x, Tensor) else Tensor(x)
        self.spec.check_input(h.shape[2], h.shape[3])
        p = self.params
        indices = []
        activity = {}
        for layer in self.spec.layers:
            if layer.kind == "pool":
                h, idx = maxpool2x2(h)
                indices.append(idx)
            elif layer.kind == "unpool":
                h = unpool2x2(h, indices.pop())
            else:
                name = layer.name
                h = conv2d(h, p[f"{name}/W"])
                if layer.norm and self.norm_mode == "agc":
                    h = agc(h, p[f"{name}/lambda"], p[f"{name}/gamma"], p[f"{name}/beta"])
                elif layer.norm and self.norm_mode == "bn":
                    h = batchnorm(h, p[f"{name}/scale"], p[f"{name}/shift"], self.bn_state[name], training)
                if layer.relu:
                    h = relu(h)
                    if collect_activity:
                        s, _, hh, ww = h.shape
                        activity[name] = ((h.data > 0).sum(axis=(0, 2, 3)), s * hh * ww)
        return h, activity

    def predict(self, x) -> np.ndarray:
        logits, _ = self.forward(x, training=False)
        return logits.data.argmax(axis=1)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        for name, st in self.bn_state.items():
            out[f"{name}/running_mean"] = st.running_mean
            out[f"{name}/running_var"] = st.running_var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ValueError(f"checkpoint mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            self.params[name] = Tensor(np.asarray(state[name], dtype=t.dtype), name=name)
        for name, st in self.bn_state.items():
            st.running_mean[...] = state[f"{name}/running_mean"]
            st.running_var[...] = state[f"{name}/running_var"]

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(checkpoint.load(path))


def _dirac(shape, dtype) -> np.ndarray:
    oc, ic, kh, kw = shape
    w = np.zeros(shape, dtype=dtype)
    for o in range(min(oc, ic)):
        w[o, o, kh // 2, kw // 2] = 1
    return w


def build_network(spec: NetworkSpec, norm_mode: str, rng: np.random.Generator,
                  dtype=np.float32, identity_init: bool = False) -> Network:
    """He fan-in weights everywhere; lambda=1, gamma=1, beta=0 (or scale=1,
    shift=0) on every normalised conv.

    With ``identity_init``, square convs that are not the first after a
    (un)pooling start as the identity instead.
    """
    if norm_mode not in NORM_MODES:
        raise ValueError(f"norm_mode must be one of {NORM_MODES}")
    spec.validate()
    params: dict[str, Tensor] = {}
    bn_state = {}
    after_pool = True
    for layer in spec.layers:
        if layer.kind != "conv":
            after_pool = True
            continue
        name, oc = layer.name, layer.out_ch
        shape = (oc, layer.in_ch, layer.kernel, layer.kernel)
        w = he_fan_in_init(shape, rng, dtype)
        if identity_init and not after_pool and layer.in_ch == oc and layer.norm:
            w = _dirac(shape, dtype)
        after_pool = False
        params[f"{name}/W"] = Tensor(w, name=f"{name}/W")
        if not layer.norm or norm_mode == "none":
            continue
        if norm_mode == "agc":
            for pname, value in (("lambda", 1.0), ("gamma", 1.0), ("beta", 0.0)):
                params[f"{name}/{pname}"] = Tensor(np.full(oc, value, dtype=dtype), name=f"{name}/{pname}")
        else:
            params[f"{name}/scale"] = Tensor(np.ones(oc, dtype=dtype), name=f"{name}/scale")
            params[f"{name}/shift"] = Tensor(np.zeros(oc, dtype=dtype), name=f"{name}/shift")
            bn_state[name] = BatchNormState.fresh(oc, dtype=dtype)
    return Network(spec, norm_mode, params, bn_state)


# --------------------------------------------------------------------------
# metrics

def pixel_error(pred_labels, true_labels) -> float:
    """Fraction of incorrectly labelled pixels."""
    pred, true = np.asarray(pred_labels), np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("no pixels")
    return float(np.count_nonzero(pred != true)) / pred.size


def lambda_stats(network: Network) -> list[tuple[str, float, float, float]]:
    """(layer, min, mean, max) of lambda for each AGC layer, input to output."""
    if network.norm_mode != "agc":
        raise ValueError(f"lambda statistics need an AGC network, got {network.norm_mode!r}")
    out = []
    for name in network.norm_layers:
        lam = network.params[f"{name}/lambda"].data.astype(np.float64)
        out.append((name, float(lam.min()), float(lam.mean()), float(lam.max())))
    return out


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_pixel_error: float
    max_step_loss: float = math.nan
    wall_time_s: float = 0.0
    peak_bytes: int = 0
    lambdas: list[tuple[str, float, float, float]] = field(default_factory=list)


METRIC_COLUMNS = ("epoch", "train_loss", "val_loss", "val_pixel_error", "max_step_loss",
                  "wall_time_s", "peak_bytes")


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else f"{float(v):.9g}"


def metrics_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    layers = [name for name, *_ in records[0].lambdas] if records else []
    writer.writerow(list(METRIC_COLUMNS)
                    + [f"lambda_{name}_{s}" for name in layers for s in ("min", "mean", "max")])
    for r in records:
        row = [_fmt(getattr(r, c)) for c in METRIC_COLUMNS]
        for _name, lo, mean, hi in r.lambdas:
            row += [_fmt(lo), _fmt(mean), _fmt(hi)]
        writer.writerow(row)
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# training

class TrainingDiverged(RuntimeError):
    pass


def class_weights_for(data: SegmentationSet) -> np.ndarray:
    if len(data) == 0:
        return np.ones(data.num_classes)
    return enet_class_weights(class_frequencies(data))


def train_step(network: Network, images: np.ndarray, labels: np.ndarray, weights: np.ndarray,
               sgd: SgdState, gems: bool = False) -> tuple[float, int]:
    """One forward/backward/update. Returns ``(loss, peak transient bytes)``."""
    base = TRACKER.reset_peak()
    params = network.params
    with Tape() as tape:
        tape.watch(*params.values())
        logits, activity = network.forward(images, training=True, collect_activity=gems)
        loss = softmax_xent(logits, labels, weights)
    del logits
    by_tensor = tape.backward(loss)
    grads = {name: by_tensor[t] for name, t in params.items()}
    del by_tensor, tape
    if gems:
        for name, (active, total) in activity.items():
            partial = active < total
            if partial.any():
                g = grads[f"{name}/W"]
                scaled = gems_normalize(g * total, active, total)
                grads[f"{name}/W"] = np.where(partial[:, None, None, None], scaled, g)
    loss_value = float(loss.data)
    if math.isfinite(loss_value):
        network.params = sgd_momentum_step(params, grads, sgd)
    return loss_value, TRACKER.peak - base


def evaluate(network: Network, data: SegmentationSet, weights: np.ndarray) -> tuple[float, float]:
    """Mean weighted loss and pixel error over ``data`` in inference mode."""
    if len(data) == 0:
        return math.nan, math.nan
    loss_sum, wrong, total = 0.0, 0, 0
    for b in range(0, len(data), EVAL_BATCH):
        x, y = data.images[b:b + EVAL_BATCH], data.labels[b:b + EVAL_BATCH]
        logits, _ = network.forward(x, training=False)
        loss, _ = weighted_softmax_xent(logits.data, y, weights)
        loss_sum += float(loss) * y.size
        wrong += int(np.count_nonzero(logits.data.argmax(axis=1) != y))
        total += y.size
    return loss_sum / total, wrong / total


def train(network: Network, train_set: SegmentationSet, val_set: SegmentationSet,
          config: TrainConfig, on_epoch: Callable[[MetricsRecord], None] | None = None
          ) -> list[MetricsRecord]:
    """Runs ``config.epochs`` epochs; record 0 holds the initial evaluation."""
    weights = class_weights_for(train_set)
    sgd = SgdState(effective_lr(config), config.momentum)
    rng = make_rng(config.seed, "shuffle")
    agc_mode = network.norm_mode == "agc"

    init_train_loss, _ = evaluate(network, train_set, weights)
    val_loss, val_err = evaluate(network, val_set, weights)
    records = [MetricsRecord(0, init_train_loss, val_loss, val_err,
                             lambdas=lambda_stats(network) if agc_mode else [])]
    if on_epoch:
        on_epoch(records[0])

    n, mb = len(train_set), config.minibatch_size
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        loss_sum, max_step, peak = 0.0, -math.inf, 0
        for step, b in enumerate(range(0, n, mb)):
            idx = order[b:b + mb]
            try:
                loss, step_peak = train_step(network, train_set.images[idx], train_set.labels[idx],
                                             weights, sgd, config.gems_enabled)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch} step {step}: non-finite loss {loss}")
            loss_sum += loss * len(idx)
            max_step = max(max_step, loss)
            peak = max(peak, step_peak)
        val_loss, val_err = evaluate(network, val_set, weights)
        wall = time.perf_counter() - t0 if config.record_timing else 0.0
        rec = MetricsRecord(epoch, loss_sum / n if n else math.nan, val_loss, val_err,
                            max_step if n else math.nan, wall, peak,
                            lambda_stats(network) if agc_mode else [])
        records.append(rec)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_err %.4f", epoch,
                 rec.train_loss, rec.val_loss, rec.val_pixel_error)
        if on_epoch:
            on_epoch(rec)
    return records


def load_data(config: TrainConfig) -> tuple[SegmentationSet, SegmentationSet]:
    if config.data_dir:
        d = Path(config.data_dir)
        return load_split(d / "train.agcd"), load_split(d / "val.agcd")
    return generate(dataset_spec(config))


def dataset_spec(config: TrainConfig) -> DatasetSpec:
    return DatasetSpec(H=config.image_size, W=config.image_size, n_train=config.n_train,
                       n_val=config.n_val, seed=config.data_seed, pool_depth=len(config.widths))


def network_for(config: TrainConfig, num_classes: int = 5) -> Network:
    spec = NetworkSpec.segnet(config.widths, num_classes=num_classes)
    return build_network(spec, config.norm_mode, make_rng(config.seed, "init"),
                         identity_init=config.identity_init)


def run(config: TrainConfig, out_dir=None, data=None) -> tuple[Network, list[MetricsRecord]]:
    """Data, network, training; writes ``metrics.csv`` and ``final.agcn`` to ``out_dir``."""
    train_set, val_set = data if data is not None else load_data(config)
    network = network_for(config, train_set.num_classes)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    records: list[MetricsRecord] = []

    def flush(rec):
        records.append(rec)
        if out:
            (out / "metrics.csv").write_text(metrics_csv(records))

    train(network, train_set, val_set, config, on_epoch=flush)
    if out:
        network.save(out / "final.agcn")
    return network, records

"""Initialisation, momentum SGD, learning-rate scaling, gated gradient
normalisation, class-weight normalisation and the training configuration.

Random numbers come from numpy's Philox4x64 counter-based generator. Each
consumer gets its own stream derived from ``(seed, stream_id)`` via
``SeedSequence``, so streams never overlap and adding a consumer does not
perturb existing ones. Stream ids are listed in :data:`STREAMS`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from agcnet.tensor import Tensor

STREAMS = {"init": 0, "shuffle": 1, "data_train": 2, "data_val": 3, "bench": 4}


def make_rng(seed: int, stream: str | int) -> np.random.Generator:
    sid = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), sid])))


def he_fan_in_init(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal weights with std sqrt(2 / fan_in), fan_in = ic*kh*kw."""
    shape = tuple(shape)
    if len(shape) != 4:
        raise ValueError(f"expected (oc, ic, kh, kw), got {shape}")
    fan_in = shape[1] * shape[2] * shape[3]
    if fan_in == 0:
        raise ValueError("zero fan-in")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class SgdState:
    """Per-parameter gradient momentum G, updated as G <- L*g + m*G."""

    learning_rate: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def sgd_momentum_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                      state: SgdState) -> dict[str, Tensor]:
    """Returns new parameter tensors ``p - G``; ``state.velocity`` is updated in place.

    The learning rate sits inside the recursion, so after steps with gradients
    g_1..g_i the velocity equals L * sum_k m**(i-k) * g_k.
    """
    L, m = state.learning_rate, state.momentum
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        v = state.velocity.get(name)
        step = L * g if v is None else L * g + m * v
        step = step.astype(p.dtype, copy=False)
        state.velocity[name] = step
        out[name] = Tensor(p.data - step, name=name)
    return out


def gems_normalize(weight_grad_accum: np.ndarray, active_count, total_count) -> np.ndarray:
    """Divide a per-filter raw gradient sum by its active position count.

    ``active_count`` holds one count per output filter (leading axis). Filters
    with no active positions get a zero gradient. Standard normalisation
    would divide by ``total_count`` instead.
    """
    active = np.asarray(active_count)
    if np.any(active > total_count) or np.any(active < 0):
        raise ValueError("active_count must lie in [0, total_count]")
    shape = (-1,) + (1,) * (weight_grad_accum.ndim - 1) if active.ndim else ()
    a = active.reshape(shape)
    safe = np.where(a > 0, a, 1)
    return np.where(a > 0, weight_grad_accum / safe, 0).astype(weight_grad_accum.dtype)


def normalize_class_weights(w) -> np.ndarray:
    """Rescale so the mean weight is 1 (weights sum to the class count)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("expected a non-empty vector of class weights")
    if np.any(~(w > 0)):
        raise ValueError("class weights must be positive")
    return w * (w.size / w.sum())


NORM_MODES = ("agc", "bn", "none")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.02
    minibatch_size: int = 4
    lr_scale: bool = True
    momentum: float = 0.9
    norm_mode: str = "agc"
    gems_enabled: bool = False
    identity_init: bool = False
    seed: int = 0
    epochs: int = 30
    record_timing: bool = True
    widths: tuple[int, ...] = (16, 32, 64, 64)
    image_size: int = 64
    n_train: int = 512
    n_val: int = 128
    data_seed: int = 0
    data_dir: str = ""

    def __post_init__(self):
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def effective_lr(config: TrainConfig) -> float:
    if config.lr_scale:
        return config.base_lr * config.minibatch_size
    return config.base_lr


# --------------------------------------------------------------------------
# key=value serialisation

def _format_value(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(kind, raw: str, key: str):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("on", "true", "1", "yes"):
            return True
        if raw.lower() in ("off", "false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected on/off, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def _field_kinds() -> dict[str, type]:
    kinds = {}
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        kinds[f.name] = type(default) if not isinstance(default, tuple) else tuple
    return kinds


def config_from_mapping(values: Mapping[str, str], base: TrainConfig | None = None) -> TrainConfig:
    kinds = _field_kinds()
    parsed = {}
    for key, raw in values.items():
        if key not in kinds:
            raise ValueError(f"unknown config key {key!r}")
        parsed[key] = _parse_value(kinds[key], str(raw), key)
    return dataclasses.replace(base or TrainConfig(), **parsed)


def parse_config(text: str) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, raw = line.split("=", 1)
        values[key.strip()] = raw
    return config_from_mapping(values)


def format_config(config: TrainConfig) -> str:
    return "".join(f"{f.name}={_format_value(getattr(config, f.name))}\n"
                   for f in dataclasses.fields(config))


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def save_config(path: str | Path, config: TrainConfig) -> None:
    Path(path).write_text(format_config(config))

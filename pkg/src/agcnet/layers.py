"""Layer zoo: convolution, automatic gain control, batch norm, ReLU,
max-pooling with stored indices, index unpooling and weighted softmax
cross-entropy.

Each layer comes as a pair of plain numpy functions (``*_forward`` /
``*_backward``) plus a tape-aware wrapper operating on :class:`Tensor`.
Per-channel parameters (lambda, gamma, beta, scale, shift) are 1-D arrays of
length ``out_channels``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from agcnet.tensor import Tensor, emit

IGNORE_LABEL = 255


def _per_channel(p: np.ndarray) -> np.ndarray:
    return np.asarray(p).reshape(1, -1, 1, 1)


# --------------------------------------------------------------------------
# convolution (cross-correlation, no kernel flip)

def _padding(kernel: int, padding: str) -> int:
    if padding == "same":
        if kernel % 2 == 0:
            raise ValueError("same padding needs an odd kernel")
        return (kernel - 1) // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding {padding!r}")


def im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + ho, j:j + wo]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho, j:j + wo] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def conv2d_forward(x: np.ndarray, w: np.ndarray, padding: str = "same"):
    """Returns ``(out, cols)``; ``cols`` is kept for the backward pass."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects rank-4 input and weights")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if c != ic:
        raise ValueError(f"input has {c} channels, weights expect {ic}")
    pad = _padding(kh, padding)
    if _padding(kw, padding) != pad:
        raise ValueError("non-square kernels need equal padding")
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than input")
    cols = im2col(x, kh, kw, pad)
    # stacked matmul runs one GEMM per sample, so a sample's result never
    # depends on what else is in the minibatch
    out = np.matmul(w.reshape(oc, -1), cols)
    return out.reshape(n, oc, ho, wo), cols


def conv2d_backward(x_shape, w: np.ndarray, cols: np.ndarray, grad_out: np.ndarray,
                    padding: str = "same"):
    oc, ic, kh, kw = w.shape
    n = grad_out.shape[0]
    g = grad_out.reshape(n, oc, -1)
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    grad_cols = np.matmul(w.reshape(oc, -1).T, g)
    grad_x = col2im(grad_cols, x_shape, kh, kw, _padding(kh, padding))
    return grad_x, grad_w


def conv2d(x: Tensor, w: Tensor, padding: str = "same") -> Tensor:
    out, cols = conv2d_forward(x.data, w.data, padding)
    saved = Tensor(cols)
    shape = x.shape

    def grad_fn(g):
        return conv2d_backward(shape, w.data, saved.data, g, padding)

    return emit(out, (x, w), grad_fn)


# --------------------------------------------------------------------------
# automatic gain control: out = (z - lambda * mean_s(z)) * gamma + beta

def spatial_mean(z: np.ndarray) -> np.ndarray:
    """Background level estimate: mean of each sample's own map, per channel."""
    return z.mean(axis=(2, 3), keepdims=True)


@dataclass
class AgcParams:
    W: np.ndarray
    lam: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        _check_channel_params(self.W.shape[0], lam=self.lam, gamma=self.gamma, beta=self.beta)


def _check_channel_params(c: int, **params):
    for label, p in params.items():
        if np.shape(p) != (c,):
            raise ValueError(f"{label} must have {c} entries, got shape {np.shape(p)}")
        if not np.all(np.isfinite(p)):
            raise ValueError(f"{label} has non-finite entries")


def agc_forward(z: np.ndarray, lam, gamma, beta) -> np.ndarray:
    if z.ndim != 4 or z.shape[2] * z.shape[3] < 1:
        raise ValueError(f"expected (s, c, h, w) map, got {z.shape}")
    _check_channel_params(z.shape[1], lam=lam, gamma=gamma, beta=beta)
    mu = spatial_mean(z)
    return (z - _per_channel(lam) * mu) * _per_channel(gamma) + _per_channel(beta)


def agc_backward(z: np.ndarray, lam, gamma, beta, grad_out: np.ndarray):
    """Returns ``(grad_z, grad_lambda, grad_gamma, grad_beta)``.

    With mu and gbar the per-sample, per-channel map means of ``z`` and
    ``grad_out``::

        grad_z      = gamma * (grad_out - lambda * gbar)
        grad_lambda = -gamma * sum_s(mu_s * sum_hw grad_out)
        grad_gamma  = sum(grad_out * (z - lambda * mu))
        grad_beta   = sum(grad_out)
    """
    if grad_out.shape != z.shape:
        raise ValueError(f"grad shape {grad_out.shape} != input shape {z.shape}")
    _check_channel_params(z.shape[1], lam=lam, gamma=gamma, beta=beta)
    lam4, gamma4 = _per_channel(lam), _per_channel(gamma)
    mu = spatial_mean(z)
    gsum = grad_out.sum(axis=(2, 3), keepdims=True)
    gbar = gsum / (z.shape[2] * z.shape[3])
    grad_z = gamma4 * (grad_out - lam4 * gbar)
    grad_lam = -np.asarray(gamma) * (mu * gsum).sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * (z - lam4 * mu)).sum(axis=(0, 2, 3))
    grad_beta = gsum.sum(axis=(0, 2, 3))
    dt = z.dtype
    return grad_z.astype(dt, copy=False), grad_lam.astype(dt), grad_gamma.astype(dt), grad_beta.astype(dt)


def agc(z: Tensor, lam: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    out = agc_forward(z.data, lam.data, gamma.data, beta.data)

    def grad_fn(g):
        return agc_backward(z.data, lam.data, gamma.data, beta.data, g)

    return emit(out, (z, lam, gamma, beta), grad_fn)


# --------------------------------------------------------------------------
# batch normalisation

@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum_ema: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.momentum_ema < 1.0:
            raise ValueError("momentum_ema must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), **kw)


@dataclass
class BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    training: bool
    scale: np.ndarray = field(repr=False)


def batchnorm_forward(z: np.ndarray, scale, shift, state: BatchNormState,
                      mode: str = "train", eps: float | None = None):
    """Returns ``(out, cache)``. Train mode updates ``state`` in place.

    ``eps`` overrides ``state.epsilon`` (zero is accepted here for exact
    hand-checked fixtures).
    """
    eps = state.epsilon if eps is None else eps
    scale4, shift4 = _per_channel(scale), _per_channel(shift)
    if mode == "train":
        if z.shape[0] * z.shape[2] * z.shape[3] < 1:
            raise ValueError("empty minibatch")
        mu = z.mean(axis=(0, 2, 3))
        var = z.var(axis=(0, 2, 3))
        m = state.momentum_ema
        state.running_mean[...] = m * state.running_mean + (1 - m) * mu
        state.running_var[...] = m * state.running_var + (1 - m) * var
    elif mode == "infer":
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(z.dtype)
    xhat = (z - _per_channel(mu.astype(z.dtype))) * _per_channel(inv_std)
    out = xhat * scale4 + shift4
    return out, BnCache(xhat, inv_std, mode == "train", np.asarray(scale))


def batchnorm_backward(cache: BnCache, grad_out: np.ndarray):
    """Returns ``(grad_z, grad_scale, grad_shift)``."""
    xhat = cache.xhat
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    grad_scale = (grad_out * xhat).sum(axis=(0, 2, 3))
    gx = grad_out * _per_channel(cache.scale)
    inv4 = _per_channel(cache.inv_std)
    if not cache.training:
        return gx * inv4, grad_scale, grad_shift
    gx_mean = gx.mean(axis=(0, 2, 3), keepdims=True)
    gxx_mean = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
    grad_z = inv4 * (gx - gx_mean - xhat * gxx_mean)
    return grad_z, grad_scale, grad_shift


def batchnorm(z: Tensor, scale: Tensor, shift: Tensor, state: BatchNormState,
              training: bool = True) -> Tensor:
    out, cache = batchnorm_forward(z.data, scale.data, shift.data, state,
                                   "train" if training else "infer")
    saved = Tensor(cache.xhat)

    def grad_fn(g):
        cache.xhat = saved.data
        return batchnorm_backward(cache, g)

    return emit(out, (z, scale, shift), grad_fn)


# --------------------------------------------------------------------------
# ReLU

def relu(z: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    out = np.maximum(z.data, 0)
    return emit(out, (z,), lambda g: (g * (z.data > 0),))


# --------------------------------------------------------------------------
# 2x2 max-pooling with indices, and unpooling

class PoolIndices:
    """Flat argmax offsets into each (h, w) input plane, shape (s, c, h/2, w/2).

    Offsets are validated on construction: each must address a cell of its
    own 2x2 window.
    """

    __slots__ = ("offsets", "in_hw", "slots")

    def __init__(self, offsets: np.ndarray, in_hw: tuple[int, int], _slots: np.ndarray | None = None):
        offsets = np.array(offsets, dtype=np.int64)
        offsets.flags.writeable = False
        self.offsets = offsets
        self.in_hw = (int(in_hw[0]), int(in_hw[1]))
        self.slots = self._window_slots() if _slots is None else _slots

    def _window_slots(self) -> np.ndarray:
        h, w = self.in_hw
        off = self.offsets
        if off.ndim != 4:
            raise ValueError(f"expected rank-4 offsets, got {off.shape}")
        ho, wo = off.shape[2], off.shape[3]
        if (ho * 2, wo * 2) != (h, w):
            raise ValueError(f"indices for {(ho, wo)} do not match input {self.in_hw}")
        r, c = np.divmod(off, w)
        ii = np.arange(ho).reshape(1, 1, ho, 1)
        jj = np.arange(wo).reshape(1, 1, 1, wo)
        if np.any((off < 0) | (off >= h * w) | (r // 2 != ii) | (c // 2 != jj)):
            raise ValueError("pooling index outside its own window")
        slots = (r % 2) * 2 + (c % 2)
        slots.flags.writeable = False
        return slots


def _windows(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)


def _from_windows(v: np.ndarray) -> np.ndarray:
    n, c, ho, wo, _ = v.shape
    return v.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)


def maxpool2x2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max-pool needs even spatial extents, got {(h, w)}")
    v = _windows(x)
    # argmax returns the first maximum, i.e. the lowest row-major offset
    slot = v.argmax(axis=-1)
    y = np.take_along_axis(v, slot[..., None], axis=-1)[..., 0]
    ii = np.arange(h // 2).reshape(1, 1, -1, 1)
    jj = np.arange(w // 2).reshape(1, 1, 1, -1)
    offsets = (2 * ii + slot // 2) * w + (2 * jj + slot % 2)
    slot.flags.writeable = False
    return y, PoolIndices(offsets, (h, w), _slots=slot)


def unpool2x2_forward(y: np.ndarray, idx: PoolIndices) -> np.ndarray:
    if y.shape != idx.offsets.shape:
        raise ValueError(f"values {y.shape} do not match indices {idx.offsets.shape}")
    slot = idx.slots
    v = np.zeros(y.shape + (4,), dtype=y.dtype)
    np.put_along_axis(v, slot[..., None], y[..., None], axis=-1)
    return _from_windows(v)


def unpool2x2_backward(grad_out: np.ndarray, idx: PoolIndices) -> np.ndarray:
    slot = idx.slots
    return np.take_along_axis(_windows(grad_out), slot[..., None], axis=-1)[..., 0]


def maxpool2x2(x: Tensor) -> tuple[Tensor, PoolIndices]:
    y, idx = maxpool2x2_forward(x.data)
    return emit(y, (x,), lambda g: (unpool2x2_forward(g, idx),)), idx


def unpool2x2(y: Tensor, idx: PoolIndices) -> Tensor:
    out = unpool2x2_forward(y.data, idx)
    return emit(out, (y,), lambda g: (unpool2x2_backward(g, idx),))


# --------------------------------------------------------------------------
# weighted softmax cross-entropy

def weighted_softmax_xent(logits: np.ndarray, labels: np.ndarray, class_weights,
                          ignore_label: int = IGNORE_LABEL):
    """Mean over non-ignored pixels of ``w[y] * -log softmax(logits)[y]``.

    Returns ``(loss, grad_logits)``.
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    weights = np.asarray(class_weights, dtype=logits.dtype)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if weights.shape != (k,):
        raise ValueError(f"need {k} class weights, got {weights.shape}")
    if abs(float(weights.mean()) - 1.0) > 1e-3:
        warnings.warn(f"class weights have mean {weights.mean():.4f}, expected 1", stacklevel=2)
    lab = labels.astype(np.int64)
    valid = lab != ignore_label
    if np.any(valid & ((lab < 0) | (lab >= k))):
        raise ValueError(f"label outside [0, {k})")
    safe = np.where(valid, lab, 0)

    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    count = int(valid.sum())
    if count == 0:
        return logits.dtype.type(0.0), np.zeros_like(logits)
    pix_w = np.where(valid, weights[safe], 0).astype(logits.dtype)
    nll = -np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = (pix_w * nll).sum() / count

    coef = (pix_w / count)[:, None]
    grad = expd / denom * coef
    picked = np.take_along_axis(grad, safe[:, None], axis=1)
    np.put_along_axis(grad, safe[:, None], picked - coef, axis=1)
    return logits.dtype.type(loss), grad


def softmax_xent(logits: Tensor, labels: np.ndarray, class_weights,
                 ignore_label: int = IGNORE_LABEL) -> Tensor:
    loss, grad = weighted_softmax_xent(logits.data, labels, class_weights, ignore_label)
    return emit(np.asarray(loss).reshape(()), (logits,), lambda g: (grad * g,))

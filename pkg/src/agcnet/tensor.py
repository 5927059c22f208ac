"""Dense tensors, allocation accounting and a single-use reverse-mode tape.

Layout is always sample x channel x height x width (rank <= 4). Tensors are
immutable once built: their backing array is flagged read-only, and every
operation returns a fresh tensor.

Recording works like a gradient tape: operations executed inside ``with
Tape() as tape:`` that touch a watched tensor (or the output of another
recorded op) are appended to the tape, and ``tape.backward(loss)`` walks them
in exact reverse order.
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

REAL_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
MAX_RANK = 4


class MemoryTracker:
    """Counts live bytes held by tensors, tape buffers and gradient accumulators."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def charge(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def release(self, nbytes: int) -> None:
        self.live -= nbytes

    def reset_peak(self) -> int:
        """Start a new measurement window; returns the current live baseline."""
        self.peak = self.live
        return self.live


TRACKER = MemoryTracker()


class Tensor:
    """Read-only real array of rank <= 4."""

    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype, copy=None)
        if arr.dtype not in REAL_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        # view so the caller's array keeps its own writeable flag
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.name = name
        TRACKER.charge(arr.nbytes)
        weakref.finalize(self, TRACKER.release, arr.nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)


def _not_scalar(t: Tensor):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1,), x, dtype=dtype))


def tensor_new(shape: Sequence[int], fill_or_data=0.0, dtype=np.float64) -> Tensor:
    """Build a tensor of ``shape`` from a scalar fill value or a flat sequence."""
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ValueError(f"rank {len(shape)} exceeds {MAX_RANK}")
    if any(s < 1 for s in shape):
        raise ValueError(f"shape extents must be >= 1, got {shape}")
    if np.isscalar(fill_or_data):
        return Tensor(np.full(shape, fill_or_data, dtype=dtype))
    flat = np.asarray(fill_or_data, dtype=dtype).reshape(-1)
    if flat.size != int(np.prod(shape)):
        raise ValueError(f"{flat.size} values cannot fill shape {shape}")
    return Tensor(flat.reshape(shape))


# --------------------------------------------------------------------------
# tape

_ACTIVE: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Single-use recording of differentiable ops.

    Gradients are accumulated by summation in the order contributions arrive
    while walking the records backwards, so a fixed op sequence always yields
    bit-identical gradients.
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._tracked: set[int] = set()
        self._watched: list[Tensor] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self._watched.append(t)

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def record(self, output: Tensor, inputs: Sequence[Tensor],
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> bool:
        """Append an op if any input is tracked. Returns whether it was recorded."""
        if self._used:
            raise RuntimeError("tape already consumed by backward()")
        if not any(id(t) in self._tracked for t in inputs):
            return False
        self._records.append(_Record(output, tuple(inputs), backward))
        self._tracked.add(id(output))
        return True

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` for every watched tensor."""
        if self._used:
            raise RuntimeError("backward() may only run once per tape")
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if not self._records and id(loss) not in self._tracked:
            raise ValueError("tape is empty")
        self._used = True

        watched = {id(t) for t in self._watched}
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        TRACKER.charge(grads[id(loss)].nbytes)
        records, self._records = self._records, []
        while records:
            rec = records.pop()
            key = id(rec.output)
            g = grads.get(key) if key in watched else grads.pop(key, None)
            if g is None:
                continue
            if key not in watched:
                TRACKER.release(g.nbytes)
            for inp, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None or id(inp) not in self._tracked:
                    continue
                if ig.shape != inp.shape:
                    raise AssertionError(f"gradient shape {ig.shape} != value shape {inp.shape}")
                prev = grads.get(id(inp))
                if prev is None:
                    grads[id(inp)] = ig
                    TRACKER.charge(ig.nbytes)
                else:
                    grads[id(inp)] = prev + ig
            del rec

        out = {}
        for t in self._watched:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros(t.shape, dtype=t.dtype)
            else:
                TRACKER.release(g.nbytes)
            out[t] = g
        for key, g in grads.items():
            if key not in watched:
                TRACKER.release(g.nbytes)
        self._tracked.clear()
        return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def emit(out_data: np.ndarray, inputs: Sequence[Tensor],
         grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
         name: str | None = None) -> Tensor:
    """Wrap ``out_data`` and record it on the active tape, if any."""
    out = Tensor(out_data, name=name)
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, grad_fn)
    return out


# --------------------------------------------------------------------------
# elementwise / reduction ops

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) != g.ndim:
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    axes = tuple(i for i, (a, b) in enumerate(zip(shape, g.shape)) if a == 1 and b != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if len(a.shape) != len(b.shape) or any(
        x != y and x != 1 and y != 1 for x, y in zip(a.shape, b.shape)
    ):
        raise ValueError(f"shapes {a.shape} and {b.shape} are not kept-dims compatible")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data + b.data
    return emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data - b.data
    return emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data * b.data
    return emit(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                        _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return emit(-a.data, (a,), lambda g: (-g,))


def reduce_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype).reshape(())
    return emit(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax + ndim if ax < 0 else ax for ax in axes)
    if not axes:
        raise ValueError("empty reduction")
    if any(ax < 0 or ax >= ndim for ax in axes) or len(set(axes)) != len(axes):
        raise ValueError(f"invalid axes {axes} for rank {ndim}")
    return tuple(sorted(axes))


def reduce_mean(a: Tensor, axes: int | Iterable[int] | None = None) -> Tensor:
    """Arithmetic mean over ``axes`` (all when None), keeping reduced dims."""
    axes = _norm_axes(axes if axes is None or isinstance(axes, int) else tuple(axes), a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ValueError("empty reduction extent")
    out = a.data.mean(axis=axes, keepdims=True)

    def grad_fn(g):
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=True),)

    return emit(out, (a,), grad_fn)

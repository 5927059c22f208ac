"""Synthetic semantic-segmentation data: coloured shapes on a textured background.

Class 0 is background; classes 1..4 are rectangle, disc, triangle and ring.
Shape classes are drawn with unequal probabilities, so pixel frequencies are
imbalanced and class weighting matters. Shapes never overlap, which keeps
each label mask exactly equal to the pixels its shape covers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from agcnet.optim import make_rng, normalize_class_weights

SHAPES = ("rectangle", "disc", "triangle", "ring")
SHAPE_PROBS = (0.4, 0.3, 0.2, 0.1)
MAX_SHAPES = 4


@dataclass(frozen=True)
class DatasetSpec:
    H: int = 64
    W: int = 64
    K: int = 5
    n_train: int = 512
    n_val: int = 128
    seed: int = 0
    pool_depth: int = 4

    def validate(self) -> None:
        f = 2 ** self.pool_depth
        if self.H % f or self.W % f:
            raise ValueError(f"H and W must be divisible by {f}, got {self.H}x{self.W}")
        if not 2 <= self.K <= len(SHAPES) + 1:
            raise ValueError(f"K must lie in [2, {len(SHAPES) + 1}]")
        if self.n_train < 0 or self.n_val < 0:
            raise ValueError("sample counts must be non-negative")
        if min(self.H, self.W) < 8:
            raise ValueError("images must be at least 8x8")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    labels: np.ndarray


@dataclass
class SegmentationSet:
    images: np.ndarray  # (n, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n, H, W) uint8
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be (n, 3, H, W), got {self.images.shape}")
        n, _, h, w = self.images.shape
        if self.labels.shape != (n, h, w):
            raise ValueError(f"labels {self.labels.shape} do not match images {self.images.shape}")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], self.labels[i])

    @property
    def hw(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]


def _shape_mask(kind: str, yy, xx, cy, cx, r, rng) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "rectangle":
        a, b = rng.uniform(0.6, 1.0, size=2) * r
        return (np.abs(dx) <= a) & (np.abs(dy) <= b)
    if kind == "disc":
        return dx * dx + dy * dy <= r * r
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 > (0.55 * r) ** 2)
    if kind == "triangle":
        theta = rng.uniform(0, 2 * np.pi)
        ang = theta + np.array([0.0, 2.0, 4.0]) * np.pi / 3
        vy, vx = r * np.sin(ang), r * np.cos(ang)
        inside = np.ones(yy.shape, dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            # vertices run counter-clockwise; interior lies left of every edge
            cross = (vx[j] - vx[i]) * (dy - vy[i]) - (vy[j] - vy[i]) * (dx - vx[i])
            inside &= cross >= 0
        return inside
    raise ValueError(kind)


def _render(spec: DatasetSpec, rng: np.random.Generator):
    """Returns ``(image, labels, shapes)``; ``shapes`` lists ``(class, mask)``
    for every placed shape."""
    h, w = spec.H, spec.W
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((h, w), dtype=np.uint8)

    base = rng.uniform(0.2, 0.5, size=(3, 1, 1))
    freq = rng.uniform(0.1, 0.5, size=(3, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(3,))
    texture = 0.08 * np.sin(freq[:, :1, None] * yy + freq[:, 1:, None] * xx + phase[:, None, None])
    image = base + texture

    kinds = SHAPES[:spec.K - 1]
    probs = np.asarray(SHAPE_PROBS[:spec.K - 1])
    probs = probs / probs.sum()
    r_lo, r_hi = min(h, w) / 12, min(h, w) / 4.5
    boxes: list[tuple[float, float, float]] = []
    shapes: list[tuple[int, np.ndarray]] = []
    for _ in range(rng.integers(1, MAX_SHAPES + 1)):
        cls = int(rng.choice(len(kinds), p=probs)) + 1
        for _attempt in range(50):
            r = rng.uniform(r_lo, r_hi)
            cy = rng.uniform(r, h - 1 - r)
            cx = rng.uniform(r, w - 1 - r)
            if all(abs(cy - by) > r + br + 1 or abs(cx - bx) > r + br + 1 for by, bx, br in boxes):
                break
        else:
            continue
        boxes.append((cy, cx, r))
        mask = _shape_mask(kinds[cls - 1], yy, xx, cy, cx, r, rng)
        colour = rng.uniform(0.0, 1.0, size=(3, 1))
        image[:, mask] = colour
        labels[mask] = cls
        shapes.append((cls, mask))

    image = image + rng.normal(0.0, 0.05, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels, shapes


def _generate_split(spec: DatasetSpec, n: int, stream: str) -> SegmentationSet:
    rng = make_rng(spec.seed, stream)
    images = np.zeros((n, 3, spec.H, spec.W), dtype=np.float32)
    labels = np.zeros((n, spec.H, spec.W), dtype=np.uint8)
    for i in range(n):
        images[i], labels[i], _ = _render(spec, rng)
    return SegmentationSet(images, labels, spec.K)


def generate(spec: DatasetSpec) -> tuple[SegmentationSet, SegmentationSet]:
    """Deterministic (train, val) pair; a pure function of ``spec``."""
    spec.validate()
    return (_generate_split(spec, spec.n_train, "data_train"),
            _generate_split(spec, spec.n_val, "data_val"))


def class_frequencies(data: SegmentationSet) -> np.ndarray:
    if len(data) == 0:
        raise ValueError("empty set")
    counts = np.bincount(data.labels.reshape(-1), minlength=data.num_classes)
    return counts[:data.num_classes] / counts.sum()


def enet_class_weights(freqs, c: float = 1.02) -> np.ndarray:
    """1 / ln(c + freq) per class, rescaled to mean 1."""
    freqs = np.asarray(freqs, dtype=np.float64)
    return normalize_class_weights(1.0 / np.log(c + freqs))


# --------------------------------------------------------------------------
# on-disk format: u32 H, W, K, count (little-endian), f32 images, u8 labels

_HEADER = struct.Struct("<4I")


def save_split(path: str | Path, data: SegmentationSet) -> None:
    h, w = data.hw
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(h, w, data.num_classes, len(data)))
        fh.write(np.ascontiguousarray(data.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(data.labels, dtype=np.uint8).tobytes())


def load_split(path: str | Path) -> SegmentationSet:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    h, w, k, n = _HEADER.unpack_from(blob)
    n_img, n_lab = n * 3 * h * w, n * h * w
    if len(blob) != _HEADER.size + 4 * n_img + n_lab:
        raise ValueError(f"{path}: size does not match header {(h, w, k, n)}")
    images = np.frombuffer(blob, dtype="<f4", count=n_img, offset=_HEADER.size)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n_lab, offset=_HEADER.size + 4 * n_img)
    return SegmentationSet(images.reshape(n, 3, h, w).astype(np.float32),
                           labels.reshape(n, h, w).copy(), k)

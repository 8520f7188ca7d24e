"""Datasets: IDX files, synthetic generators, splitting and corruptions."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError, FormatError
from .tensor import get_dtype

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, d) in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    name: str = ""
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractError(f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.inputs[index], self.labels[index], self.num_classes, self.name, self.image_shape)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.inputs.astype(dtype), self.labels, self.num_classes, self.name, self.image_shape)


def _read_idx(path: Path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header != count:
        raise FormatError(f"{path}: header promises {count} bytes of data, file has {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (e.g. MNIST); pixels are scaled by 1/255."""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, h, w = images.shape
    k = num_classes or max(int(labels.max()) + 1 if labels.size else 2, 2)
    x = (images.reshape(n, h * w).astype(np.float64) / 255.0).astype(get_dtype())
    return Dataset(x, labels, k, Path(images_path).name, (h, w))


def _blob_centers(k: int, dim: int = 2) -> np.ndarray:
    """Fixed per (k, dim) so that separately sampled train and test sets agree."""
    if dim == 2:
        angles = 2 * np.pi * np.arange(k) / k
        return 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return np.random.default_rng([k, dim]).uniform(0.3, 0.7, size=(k, dim))


def make_synthetic(name: str, n: int, K: int, label_noise: float, rng: np.random.Generator,
                   spread: float | None = None, dim: int = 2) -> Dataset:
    """Balanced classification data inside [0, 1]^dim (2-D by default).

    ``blobs``: isotropic Gaussians; in 2-D the centres sit on a circle of
    radius 0.3, in higher dimensions they are fixed draws from U(0.3, 0.7)^dim.
    ``spirals``: K interleaved 2-D arms. Exactly round(label_noise * n)
    labels are flipped to a different class drawn uniformly from the others.
    """
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got K={K}")
    if not 0.0 <= label_noise < 1.0:
        raise ConfigError(f"label_noise must lie in [0, 1), got {label_noise}")
    if n < K:
        raise ConfigError(f"n={n} is smaller than K={K}")
    if dim < 2:
        raise ConfigError(f"dim must be >= 2, got {dim}")
    labels = np.arange(n) % K
    rng.shuffle(labels)
    if name == "blobs":
        sd = 0.06 if spread is None else spread
        centers = _blob_centers(K, dim)
        x = centers[labels] + sd * rng.standard_normal((n, dim))
    elif name == "spirals":
        if dim != 2:
            raise ConfigError("spirals are 2-D only")
        sd = 0.02 if spread is None else spread
        t = rng.uniform(0.15, 1.0, size=n)
        angle = 2 * np.pi * labels / K + 3.0 * t
        x = 0.5 + 0.45 * t[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        x += sd * rng.standard_normal((n, 2))
    else:
        raise ConfigError(f"unknown synthetic dataset {name!r}; use 'blobs' or 'spirals'")
    x = np.clip(x, 0.0, 1.0)
    labels = labels.astype(np.int64)
    flips = int(math.floor(label_noise * n + 0.5))
    if flips:
        idx = rng.choice(n, size=flips, replace=False)
        labels[idx] = (labels[idx] + rng.integers(1, K, size=flips)) % K
    return Dataset(x.astype(get_dtype()), labels, K, name)


def split(dataset: Dataset, ratio: float = 0.9, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Shuffled train/validation split of sizes floor(ratio*n) and the rest."""
    n = len(dataset)
    if n < 10:
        raise ContractError(f"need at least 10 examples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    cut = int(math.floor(ratio * n))
    return dataset.subset(order[:cut]), dataset.subset(order[cut:])


CORRUPTIONS = ("gaussian-noise", "impulse-noise", "box-blur", "brightness", "contrast")
_BLUR_KERNELS = (1, 3, 3, 5, 5, 7)


def corruption_level(kind: str, severity: int) -> float:
    """Corruption parameter at a severity in 0..5 (0 is the identity)."""
    if kind not in CORRUPTIONS:
        raise ConfigError(f"unknown corruption {kind!r}; known: {CORRUPTIONS}")
    if int(severity) != severity or not 0 <= severity <= 5:
        raise ConfigError(f"severity must be an integer in 0..5, got {severity}")
    return {
        "gaussian-noise": 0.02 * severity,
        "impulse-noise": 0.01 * severity,
        "box-blur": _BLUR_KERNELS[severity],
        "brightness": 0.05 * severity,
        "contrast": 1.0 - 0.1 * severity,
    }[kind]


def _as_images(x: np.ndarray, image_shape) -> np.ndarray:
    n, d = x.shape
    if image_shape is None:
        side = math.isqrt(d)
        image_shape = (side, side) if side * side == d else (1, d)
    return x.reshape(n, *image_shape)


def corrupt(x: np.ndarray, kind: str, severity: int, rng: np.random.Generator, image_shape=None) -> np.ndarray:
    """Corrupted copy of a batch ``x`` (n, d) in [0, 1]; output clamped to [0, 1].

    Blur treats rows as ``image_shape`` images (square if omitted and d is a
    perfect square, otherwise a 1 x d strip).
    """
    level = corruption_level(kind, severity)
    x = np.asarray(x)
    if severity == 0:
        return x.copy()
    if kind == "gaussian-noise":
        out = x + level * rng.standard_normal(x.shape)
    elif kind == "impulse-noise":
        hit = rng.uniform(size=x.shape) < level
        salt = rng.uniform(size=x.shape) < 0.5
        out = np.where(hit, salt.astype(np.float64), x)
    elif kind == "box-blur":
        out = _kernels.box_blur(_as_images(x, image_shape), level).reshape(x.shape)
    elif kind == "brightness":
        out = x + level
    else:
        mean = x.mean(axis=1, keepdims=True)
        out = (x - mean) * level + mean
    return np.clip(out, 0.0, 1.0).astype(x.dtype)

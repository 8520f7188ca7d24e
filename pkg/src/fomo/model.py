"""MLP classifier with indexed layers, plus the EMA-only stable copy.

Parameter enumeration order is fixed everywhere (masks, EMA, checkpoints):
layer index ascending, weight before bias, i.e. ``W0, b0, W1, b1, ...``.
Layer ``i`` holds ``W_i`` of shape ``(d_in, d_out)`` and ``b_i`` of shape
``(d_out,)``; every layer but the last is followed by ReLU.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, affine, get_dtype, relu


def init_bound(d_in: int) -> float:
    """Half-width of the uniform weight init for a layer with fan-in ``d_in``."""
    return math.sqrt(6.0 / d_in)


class MLP:
    trainable = True

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) == 0 or len(weights) != len(biases):
            raise ConfigError("an MLP needs at least one layer and one bias per weight")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} do not conform")
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(
                    f"layer {i - 1} outputs {weights[i - 1].shape[1]} but layer {i} expects {w.shape[0]}"
                )
        self.layers = [
            (Tensor(w, requires_grad=self.trainable, dtype=w.dtype), Tensor(b, requires_grad=self.trainable, dtype=b.dtype))
            for w, b in zip(weights, biases)
        ]

    @property
    def widths(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[1]

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def param_layer(self, index: int) -> int:
        """Layer index owning the ``index``-th entry of :meth:`parameters`."""
        return index // 2

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def copy_arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise DimensionError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if a.shape != p.shape:
                raise DimensionError(f"array shape {a.shape} does not match parameter {p.shape}")
            p.data = np.array(a, dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(self, x: Tensor, track_params: bool = True) -> Tensor:
        """Logits for a batch ``x`` of shape (B, d).

        With ``track_params=False`` the weights enter the tape as constants, so
        only gradients w.r.t. ``x`` are produced (used by attacks).
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.widths[0]:
            raise DimensionError(f"input shape {x.shape} does not match model input width {self.widths[0]}")
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            if not track_params:
                w, b = Tensor(w.data, dtype=w.data.dtype), Tensor(b.data, dtype=b.data.dtype)
            h = affine(h, w, b)
            if i < last:
                h = relu(h)
        return h

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Argmax class per row; ties go to the lowest class index."""
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=self.layers[0][0].data.dtype)
        return np.argmax(self.forward(Tensor(data, dtype=data.dtype), track_params=False).data, axis=1)


class StableModel(MLP):
    """Shadow parameters written only by consolidation; never trained."""

    trainable = False


def forward(model: MLP, x: Tensor) -> Tensor:
    return model.forward(x)


def init_mlp(widths: Sequence[int], rng: np.random.Generator, dtype=None) -> MLP:
    """Weights ~ U(-sqrt(6/d_in), +sqrt(6/d_in)), biases zero."""
    widths = list(widths)
    if len(widths) < 2:
        raise ConfigError(f"layer widths need an input and an output size, got {widths}")
    if any(int(w) <= 0 for w in widths):
        raise ConfigError(f"layer widths must be positive, got {widths}")
    dtype = dtype or get_dtype()
    weights, biases = [], []
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        bound = init_bound(d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype))
        biases.append(np.zeros(d_out, dtype=dtype))
    return MLP(weights, biases)


def clone_parameters(model: MLP) -> StableModel:
    """Deep copy of ``model``'s parameters as a stable (untrainable) model."""
    arrays = model.copy_arrays()
    return StableModel(arrays[0::2], arrays[1::2])


def copy_model(model: MLP) -> MLP:
    arrays = model.copy_arrays()
    return MLP(arrays[0::2], arrays[1::2])


def default_widths(d_in: int, num_classes: int, hidden: Sequence[int] | None = None) -> list[int]:
    """784-256-128-64-K for image-sized inputs, d-64-64-K otherwise."""
    if hidden is None:
        hidden = (256, 128, 64) if d_in >= 64 else (64, 64)
    return [d_in, *hidden, num_classes]


def default_layer_threshold(model: MLP) -> int:
    """First layer eligible for forgetting: the last two layers by default."""
    return max(model.layer_count - 2, 0)

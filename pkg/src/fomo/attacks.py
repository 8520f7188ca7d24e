"""PGD adversaries under l-inf and l2 budgets."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import _kernels
from .errors import ConfigError
from .tensor import Tape, Tensor, backward, softmax_cross_entropy

_NORM_ALIASES = {
    "inf": "linf", "linf": "linf", "infinity": "linf", float("inf"): "linf",
    "2": "l2", "l2": "l2", 2: "l2", 2.0: "l2",
}


def canonical_norm(p) -> str:
    key = p.lower() if isinstance(p, str) else p
    try:
        return _NORM_ALIASES[key]
    except (KeyError, TypeError):
        raise ConfigError(f"unsupported norm {p!r}; use 'linf' or 'l2'") from None


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    norm: str = "linf"
    step_size: float = 2 / 255
    steps: int = 10
    random_start: bool = True
    input_bounds: Optional[tuple[float, float]] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "norm", canonical_norm(self.norm))
        if not self.epsilon >= 0:
            raise ConfigError(f"attack epsilon must be >= 0, got {self.epsilon}")
        if not self.step_size > 0:
            raise ConfigError(f"attack step_size must be > 0, got {self.step_size}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"attack steps must be a positive integer, got {self.steps}")
        if self.input_bounds is not None:
            lo, hi = self.input_bounds
            if not lo < hi:
                raise ConfigError(f"input_bounds must satisfy lo < hi, got {self.input_bounds}")
        if self.epsilon > 0 and self.step_size > 2 * self.epsilon:
            warnings.warn(
                f"step_size {self.step_size:g} exceeds 2*epsilon ({2 * self.epsilon:g})", stacklevel=3
            )


_PRESETS = {
    "linf-train": dict(epsilon=8 / 255, norm="linf", step_size=2 / 255, steps=10),
    "linf-test": dict(epsilon=8 / 255, norm="linf", step_size=2 / 255, steps=20),
    "l2-train": dict(epsilon=128 / 255, norm="l2", step_size=15 / 255, steps=10),
    "l2-test": dict(epsilon=128 / 255, norm="l2", step_size=15 / 255, steps=20),
    # desk-scale convention for 28x28 digits, not a published setting
    "mnist-linf": dict(epsilon=0.3, norm="linf", step_size=0.04, steps=10),
    "mnist-linf-test": dict(epsilon=0.3, norm="linf", step_size=0.04, steps=20),
}


def attack_presets(name: str) -> AttackConfig:
    try:
        return AttackConfig(**_PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown attack preset {name!r}; known: {sorted(_PRESETS)}") from None


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def project(delta, epsilon: float, p="linf"):
    """Project perturbations onto the epsilon ball, one ball per row.

    Accepts a Tensor or array; 1-D input is treated as a single example.
    """
    norm = canonical_norm(p)
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    arr = delta.data if isinstance(delta, Tensor) else np.asarray(delta)
    flat = arr.reshape(1, -1) if arr.ndim == 1 else arr.reshape(arr.shape[0], -1)
    if norm == "linf":
        out = np.clip(flat, -epsilon, epsilon).astype(arr.dtype, copy=False)
    else:
        out = _kernels.project_l2_rows(flat, epsilon)
    out = out.reshape(arr.shape)
    return Tensor(out, dtype=out.dtype) if isinstance(delta, Tensor) else out


def _random_start(shape, cfg: AttackConfig, rng: np.random.Generator, dtype) -> np.ndarray:
    b, d = shape
    if cfg.norm == "linf":
        return rng.uniform(-cfg.epsilon, cfg.epsilon, size=shape).astype(dtype)
    # uniform in the l2 ball: gaussian direction, radius eps * U^(1/d)
    direction = rng.standard_normal(shape)
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    radius = cfg.epsilon * rng.uniform(size=(b, 1)) ** (1.0 / d)
    return (direction * radius).astype(dtype)


def input_gradient(model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """(d mean-CE / d x, loss) with the model's weights held constant."""
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    with Tape() as tape:
        loss = softmax_cross_entropy(model.forward(xt, track_params=False), y)
    backward(loss, tape)
    return xt.grad, loss.item()


def pgd(model, x, y, cfg: AttackConfig, rng: Optional[np.random.Generator] = None, trace: Optional[list] = None):
    """Untargeted PGD on the batch-mean cross-entropy.

    Returns x_adv with the same type as ``x``. Neither ``x`` nor the model is
    modified. With ``steps=1`` and no random start this is FGSM. When
    ``trace`` is a list, the batch loss at every iterate is appended to it.
    """
    as_tensor = isinstance(x, Tensor)
    x0 = x.data if as_tensor else np.asarray(x)
    y = np.asarray(y)
    wrap = (lambda a: Tensor(a, dtype=a.dtype)) if as_tensor else (lambda a: a)
    if cfg.epsilon == 0:
        return wrap(x0.copy())
    dt = x0.dtype
    eps = cfg.epsilon
    lo_hi = cfg.input_bounds

    def finish(delta):
        xa = x0 + delta
        if lo_hi is not None:
            xa = np.clip(xa, lo_hi[0], lo_hi[1])
        return xa.astype(dt, copy=False)

    if cfg.random_start:
        if rng is None:
            raise ConfigError("random_start needs an rng")
        x_adv = finish(project(_random_start(x0.shape, cfg, rng, dt), eps, cfg.norm))
    else:
        x_adv = x0.copy()
    step = dt.type(cfg.step_size)
    for _ in range(int(cfg.steps)):
        g, loss = input_gradient(model, x_adv, y)
        if trace is not None:
            trace.append(loss)
        if cfg.norm == "linf":
            moved = x_adv + step * np.sign(g).astype(dt)
        else:
            moved = x_adv + step * _kernels.normalize_rows(g)
        x_adv = finish(project(moved - x0, eps, cfg.norm))
    if trace is not None:
        trace.append(input_gradient(model, x_adv, y)[1])
    return wrap(x_adv)


def scaled(cfg: AttackConfig, epsilon: float) -> AttackConfig:
    """Same attack at budget ``epsilon`` with the step size scaled proportionally."""
    if cfg.epsilon == 0:
        raise ConfigError("cannot scale an attack whose base epsilon is 0")
    if epsilon == cfg.epsilon:
        return cfg
    step = cfg.step_size * epsilon / cfg.epsilon
    if epsilon == 0:
        step = cfg.step_size
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return replace(cfg, epsilon=float(epsilon), step_size=float(step))

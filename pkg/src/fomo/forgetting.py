"""Forgetting, consolidation and the relearning loss.

A forgetting event re-randomises a random fraction ``s`` of every parameter
tensor in layers ``>= L``; the stable model is an EMA of the trained weights
taken just before each event, and relearning adds a KL pull toward it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .model import MLP, StableModel, clone_parameters, init_bound
from .tensor import Tensor, add, kl_divergence, scale, softmax_cross_entropy


@dataclass(frozen=True)
class FomoSchedule:
    sparsity: float = 0.035
    layer_threshold: int | None = None  # None: last two layers
    warmup: int = 32
    relearn: int = 3
    alpha_c: float = 0.999
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ConfigError(f"fomo sparsity must lie in [0, 1], got {self.sparsity}")
        if self.relearn < 1:
            raise ConfigError(f"fomo relearn period must be >= 1, got {self.relearn}")
        if self.warmup < 0:
            raise ConfigError(f"fomo warmup must be >= 0, got {self.warmup}")
        if not 0.0 <= self.alpha_c < 1.0:
            raise ConfigError(f"fomo alpha_c must lie in [0, 1), got {self.alpha_c}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"fomo lambdas must be >= 0, got {self.lambda1}, {self.lambda2}")
        if self.layer_threshold is not None and self.layer_threshold < 0:
            raise ConfigError(f"fomo layer_threshold must be >= 0, got {self.layer_threshold}")

    def threshold_for(self, model: MLP) -> int:
        if self.layer_threshold is None:
            return max(model.layer_count - 2, 0)
        if self.layer_threshold >= model.layer_count:
            raise ConfigError(
                f"layer_threshold {self.layer_threshold} leaves no layer of a {model.layer_count}-layer model eligible"
            )
        return self.layer_threshold

    def fires(self, epoch: int) -> bool:
        """True on 1-based epochs where consolidation and forgetting happen."""
        return epoch > self.warmup and epoch % self.relearn == 0


@dataclass
class ResetMask:
    """``masks[i]`` is True where parameter ``i`` is retained; absent means all retained."""

    masks: dict[int, np.ndarray] = field(default_factory=dict)
    sparsity: float = 0.0
    layer_threshold: int = 0

    def reset_count(self) -> int:
        return int(sum((~m).sum() for m in self.masks.values()))


def reset_count(sparsity: float, size: int) -> int:
    """round(s * n), halves rounded up."""
    return int(math.floor(sparsity * size + 0.5))


def sample_reset_mask(model: MLP, s: float, L: int, rng: np.random.Generator) -> ResetMask:
    if not 0.0 <= s <= 1.0:
        raise ConfigError(f"sparsity must lie in [0, 1], got {s}")
    if not 0 <= L < model.layer_count:
        raise ConfigError(f"layer threshold must lie in [0, {model.layer_count}), got {L}")
    masks = {}
    for i, p in enumerate(model.parameters()):
        if model.param_layer(i) < L:
            continue
        m = np.ones(p.size, dtype=bool)
        k = reset_count(s, p.size)
        if k:
            m[rng.choice(p.size, size=k, replace=False)] = False
        masks[i] = m.reshape(p.shape)
    return ResetMask(masks, s, L)


def apply_forgetting(model: MLP, mask: ResetMask, rng: np.random.Generator, velocity: list | None = None) -> None:
    """Re-randomise every masked-out entry in place.

    Reset entries (weights and biases alike) are drawn from
    U(-sqrt(6/d_in), +sqrt(6/d_in)) of their layer. Matching optimizer
    velocity entries are zeroed when ``velocity`` is given.
    """
    params = model.parameters()
    for i, m in mask.masks.items():
        if i >= len(params) or m.shape != params[i].shape:
            raise ContractError(f"mask for parameter {i} has shape {m.shape}, model has "
                                f"{params[i].shape if i < len(params) else 'no such parameter'}")
    for i in sorted(mask.masks):
        m = mask.masks[i]
        p = params[i]
        d_in = model.layers[model.param_layer(i)][0].shape[0]
        bound = init_bound(d_in)
        fresh = rng.uniform(-bound, bound, size=p.shape).astype(p.data.dtype)
        p.data = np.where(m, p.data, fresh)
        if velocity:
            velocity[i] = np.where(m, velocity[i], 0).astype(velocity[i].dtype)


def consolidate(stable: StableModel, model: MLP, alpha_c: float) -> None:
    """phi <- alpha_c * phi + (1 - alpha_c) * theta, in place on ``stable``."""
    if not 0.0 <= alpha_c < 1.0:
        raise ConfigError(f"alpha_c must lie in [0, 1), got {alpha_c}")
    sp, mp = stable.parameters(), model.parameters()
    if [p.shape for p in sp] != [p.shape for p in mp]:
        raise ContractError("stable model and model are not shape-congruent")
    for phi, theta in zip(sp, mp):
        dt = phi.data.dtype.type
        phi.data = dt(alpha_c) * phi.data + dt(1.0 - alpha_c) * theta.data


def consolidate_or_init(stable: StableModel | None, model: MLP, alpha_c: float) -> StableModel:
    """First call copies theta; later calls apply the EMA."""
    if stable is None:
        return clone_parameters(model)
    consolidate(stable, model, alpha_c)
    return stable


def _stable_logits(stable: StableModel, x: Tensor) -> np.ndarray:
    return stable.forward(x, track_params=False).data


def consistency_loss(model: MLP, stable: StableModel, x, x_adv, lambda1: float, lambda2: float,
                     logits=None, logits_adv=None) -> Tensor:
    """lambda1 * KL(model(x) || stable(x)) + lambda2 * KL(model(x_adv) || stable(x_adv)).

    Stable outputs are constants. Precomputed model logits may be passed in to
    avoid a second forward pass.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError(f"lambdas must be >= 0, got {lambda1}, {lambda2}")
    total = Tensor(0.0)
    if lambda1:
        z = logits if logits is not None else model.forward(_tensor(x))
        total = add(total, scale(kl_divergence(z, _stable_logits(stable, _tensor(x))), lambda1))
    if lambda2:
        z = logits_adv if logits_adv is not None else model.forward(_tensor(x_adv))
        total = add(total, scale(kl_divergence(z, _stable_logits(stable, _tensor(x_adv))), lambda2))
    return total


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class LossTerms:
    total: Tensor
    adv: float
    cr: float
    logits_adv: np.ndarray
    logits_clean: np.ndarray | None


def fomo_terms(model: MLP, stable: StableModel | None, x, x_adv, y, schedule: FomoSchedule | None,
               epoch: int, need_clean_logits: bool = False) -> LossTerms:
    """Loss for one batch plus the pieces the training loop logs.

    The consistency term is active only after warm-up and once a stable model
    exists; ``schedule=None`` means plain adversarial training.
    """
    z_adv = model.forward(_tensor(x_adv))
    l_adv = softmax_cross_entropy(z_adv, y)
    use_cr = schedule is not None and stable is not None and epoch > schedule.warmup
    z_clean = None
    if use_cr and schedule.lambda1:
        z_clean = model.forward(_tensor(x))
    if use_cr:
        l_cr = consistency_loss(model, stable, x, x_adv, schedule.lambda1, schedule.lambda2,
                                logits=z_clean, logits_adv=z_adv)
        total = add(l_adv, l_cr)
        cr = l_cr.item()
    else:
        total, cr = l_adv, 0.0
    clean = z_clean.data if z_clean is not None else None
    if clean is None and need_clean_logits:
        clean = model.forward(_tensor(x), track_params=False).data
    return LossTerms(total, l_adv.item(), cr, z_adv.data, clean)


def fomo_loss(model: MLP, stable: StableModel | None, x, x_adv, y, schedule: FomoSchedule, epoch: int) -> Tensor:
    """L_adv until warm-up ends, L_adv + consistency afterwards."""
    return fomo_terms(model, stable, x, x_adv, y, schedule, epoch).total


def chance_accuracy(K: int, labels=None) -> float:
    """1/K, or the majority-class frequency when labels are supplied."""
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got {K}")
    if labels is None:
        return 1.0 / K
    labels = np.asarray(labels)
    if labels.size == 0:
        return 1.0 / K
    return float(np.bincount(labels, minlength=K).max() / labels.size)

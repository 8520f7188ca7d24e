"""Adversarial training loop: plain PGD-AT and the forget/relearn/consolidate regimen."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .attacks import AttackConfig, pgd
from .data import Dataset, split
from .errors import ConfigError, ContractError
from .evaluate import accuracy
from .forgetting import FomoSchedule, apply_forgetting, consolidate_or_init, fomo_terms, sample_reset_mask
from .model import MLP, StableModel, default_widths, init_mlp
from .tensor import Tape, backward, sgd_step, zero_grad

log = logging.getLogger(__name__)

EVENT_FORGET = "consolidate+forget"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (30, 45)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    mode: str = "fomo"
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=8 / 255, steps=10))
    test_attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=8 / 255, steps=20))
    schedule: Optional[FomoSchedule] = field(default_factory=FomoSchedule)
    hidden: Optional[tuple[int, ...]] = None
    val_ratio: float = 0.9

    def __post_init__(self):
        if self.mode not in ("pgd-at", "fomo"):
            raise ConfigError(f"train mode must be 'pgd-at' or 'fomo', got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr, momentum and weight_decay must be >= 0")
        d = tuple(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing, got {d}")
        if any(e < 0 or e >= self.epochs for e in d):
            raise ConfigError(f"lr_decay_epochs must lie in [0, {self.epochs}), got {d}")
        if self.mode == "fomo" and self.schedule is None:
            raise ConfigError("fomo mode needs a schedule")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    natural_train_acc: float
    robust_train_acc: float
    natural_test_acc: float
    robust_test_acc: float
    robust_val_acc: float
    loss_adv: float
    loss_cr: float
    event: str = ""
    wall_time: float = 0.0


@dataclass
class Best:
    epoch: int = 0
    robust_val: float = -1.0
    natural_test: float = 0.0
    robust_test: float = 0.0


@dataclass
class TrainState:
    """Everything needed to continue a run after ``epoch`` completed epochs."""

    model: MLP
    stable: Optional[StableModel]
    velocity: list
    epoch: int
    rng: np.random.Generator
    best: Best = field(default_factory=Best)
    events: list = field(default_factory=list)


@dataclass
class RunResult:
    records: list[EpochRecord]
    model: MLP
    stable: Optional[StableModel]
    best: Best
    events: list[int]

    @property
    def inference_model(self) -> MLP:
        return self.stable if self.stable is not None else self.model


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule over 0-based epochs: divide by 10 at every decay epoch reached."""
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs})")
    d = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.lr * 10.0 ** (-d)


def inference_model(cfg: TrainConfig, model: MLP, stable: Optional[StableModel]) -> MLP:
    if cfg.mode == "fomo" and stable is not None:
        return stable
    return model


def eval_rng(seed: int, epoch: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, tag])


def evaluate_epoch(cfg: TrainConfig, net: MLP, test_set: Dataset, val_set: Optional[Dataset], epoch: int):
    """(natural test, robust test, robust val) for ``net``; attack seeds derive from (seed, epoch)."""
    nat = accuracy(net, test_set)
    rob = accuracy(net, test_set, cfg.test_attack, eval_rng(cfg.seed, epoch, 1))
    val = accuracy(net, val_set, cfg.test_attack, eval_rng(cfg.seed, epoch, 2)) if val_set is not None and len(val_set) else float("nan")
    return nat, rob, val


def new_state(cfg: TrainConfig, d_in: int, num_classes: int) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    model = init_mlp(default_widths(d_in, num_classes, cfg.hidden), rng)
    return TrainState(model=model, stable=None, velocity=[], epoch=0, rng=rng)


def train_epoch(model: MLP, stable: Optional[StableModel], data: Dataset, cfg: TrainConfig, epoch: int,
                rng: np.random.Generator, velocity: list, lr: Optional[float] = None) -> dict:
    """One pass over ``data`` (1-based ``epoch``); returns running train metrics."""
    lr = lr_at(epoch - 1, cfg) if lr is None else lr
    schedule = cfg.schedule if cfg.mode == "fomo" else None
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
    params = model.parameters()
    n_seen = nat_hits = rob_hits = 0
    sum_adv = sum_cr = 0.0
    for start in range(0, len(data), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        xb, yb = data.inputs[idx], data.labels[idx]
        x_adv = pgd(model, xb, yb, cfg.attack, rng)
        with Tape() as tape:
            terms = fomo_terms(model, stable, xb, x_adv, yb, schedule, epoch, need_clean_logits=True)
        backward(terms.total, tape)
        sgd_step(params, lr, cfg.momentum, cfg.weight_decay, velocity)
        zero_grad(params)
        b = len(idx)
        n_seen += b
        nat_hits += int((np.argmax(terms.logits_clean, axis=1) == yb).sum())
        rob_hits += int((np.argmax(terms.logits_adv, axis=1) == yb).sum())
        sum_adv += terms.adv * b
        sum_cr += terms.cr * b
    return dict(lr=lr, natural_train_acc=nat_hits / n_seen, robust_train_acc=rob_hits / n_seen,
                loss_adv=sum_adv / n_seen, loss_cr=sum_cr / n_seen)


def run(cfg: TrainConfig, train_set: Dataset, test_set: Dataset, *, val_set: Optional[Dataset] = None,
        state: Optional[TrainState] = None, on_epoch: Optional[Callable[[EpochRecord, TrainState], None]] = None,
        stop_after: Optional[int] = None) -> RunResult:
    """Train for ``cfg.epochs`` epochs (or until ``stop_after``), resuming from ``state`` if given.

    Without ``val_set`` the training set is split 9:1 with ``cfg.seed``.
    """
    if val_set is None:
        train_set, val_set = split(train_set, cfg.val_ratio, seed=cfg.seed)
    if state is None:
        state = new_state(cfg, train_set.dim, train_set.num_classes)
    model = state.model
    schedule = cfg.schedule if cfg.mode == "fomo" else None
    threshold = schedule.threshold_for(model) if schedule is not None else None
    records: list[EpochRecord] = []
    last = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    for epoch in range(state.epoch + 1, last + 1):
        t0 = time.perf_counter()
        event = ""
        if schedule is not None and schedule.fires(epoch):
            state.stable = consolidate_or_init(state.stable, model, schedule.alpha_c)
            mask = sample_reset_mask(model, schedule.sparsity, threshold, state.rng)
            apply_forgetting(model, mask, state.rng, state.velocity)
            state.events.append(epoch)
            event = EVENT_FORGET
        stats = train_epoch(model, state.stable, train_set, cfg, epoch, state.rng, state.velocity)
        net = inference_model(cfg, model, state.stable)
        nat, rob, val = evaluate_epoch(cfg, net, test_set, val_set, epoch)
        if val > state.best.robust_val:
            state.best = Best(epoch, val, nat, rob)
        rec = EpochRecord(epoch=epoch, natural_test_acc=nat, robust_test_acc=rob, robust_val_acc=val,
                          event=event, wall_time=time.perf_counter() - t0, **stats)
        state.epoch = epoch
        records.append(rec)
        log.info("epoch %d lr %.4g rob_train %.3f rob_test %.3f %s", epoch, rec.lr, rec.robust_train_acc, rob, event)
        if on_epoch is not None:
            on_epoch(rec, state)
    return RunResult(records, model, state.stable, state.best, list(state.events))


def with_mode(cfg: TrainConfig, mode: str, **changes) -> TrainConfig:
    return replace(cfg, mode=mode, **changes)

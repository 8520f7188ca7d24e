"""Measurement: accuracies, robust gap, trade-off, flatness, epsilon sweeps, corruptions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackConfig, pgd, scaled
from .data import CORRUPTIONS, Dataset, corrupt
from .errors import ConfigError, ContractError


def accuracy(model, dataset: Dataset, attack: Optional[AttackConfig] = None,
             rng: Optional[np.random.Generator] = None, batch_size: int = 1000) -> float:
    """Fraction of argmax hits, on PGD outputs when ``attack`` is given."""
    n = len(dataset)
    if n == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    if attack is not None and attack.random_start and rng is None:
        rng = np.random.default_rng(0)
    hits = 0
    for start in range(0, n, batch_size):
        x = dataset.inputs[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        if attack is not None and attack.epsilon > 0:
            x = pgd(model, x, y, attack, rng)
        hits += int((model.predict(x) == y).sum())
    return hits / n


def tradeoff(natural_last: float, robust_last: float) -> float:
    """Harmonic mean of last-epoch natural and robust accuracy."""
    if natural_last <= 0 or robust_last <= 0:
        raise ContractError(f"trade-off needs positive accuracies, got {natural_last}, {robust_last}")
    return 2 * natural_last * robust_last / (natural_last + robust_last)


@dataclass
class EvalReport:
    natural_best: float
    natural_last: float
    robust_best: float
    robust_last: float
    delta: float
    tradeoff: float
    eps_curve: dict = field(default_factory=dict)
    flatness_curve: dict = field(default_factory=dict)
    corruption: dict = field(default_factory=dict)
    mca: Optional[float] = None


def make_report(natural_best, natural_last, robust_best, robust_last) -> EvalReport:
    """Accuracies in [0, 1]; delta and trade-off are reported in percentage points."""
    nl, rl = 100 * natural_last, 100 * robust_last
    t = tradeoff(nl, rl) if nl > 0 and rl > 0 else 0.0
    return EvalReport(natural_best, natural_last, robust_best, robust_last,
                      delta=100 * robust_last - 100 * robust_best, tradeoff=t)


def report_from_run(result) -> EvalReport:
    last = result.records[-1]
    return make_report(result.best.natural_test, last.natural_test_acc, result.best.robust_test, last.robust_test_acc)


def flatness_probe(model, dataset: Dataset, sigmas: Sequence[float], trials: int, rng: np.random.Generator,
                   attack: Optional[AttackConfig] = None) -> dict[float, float]:
    """Mean accuracy under i.i.d. N(0, sigma^2) noise on every parameter.

    The model's parameters are restored (same arrays) before returning.
    """
    sigmas = [float(s) for s in sigmas]
    if any(s < 0 for s in sigmas):
        raise ConfigError(f"sigmas must be >= 0, got {sigmas}")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    params = model.parameters()
    saved = [p.data for p in params]
    curve = {}
    try:
        for s in sigmas:
            if s == 0:
                curve[s] = accuracy(model, dataset, attack, rng)
                continue
            accs = []
            for _ in range(trials):
                for p, orig in zip(params, saved):
                    p.data = (orig + s * rng.standard_normal(orig.shape)).astype(orig.dtype)
                accs.append(accuracy(model, dataset, attack, rng))
                for p, orig in zip(params, saved):
                    p.data = orig
            curve[s] = float(np.mean(accs))
    finally:
        for p, orig in zip(params, saved):
            p.data = orig
    return curve


def epsilon_sweep(model, dataset: Dataset, epsilons: Sequence[float], base: AttackConfig,
                  seed: int = 0, rng_factory=None) -> dict[float, float]:
    """Robust accuracy per budget; steps fixed, step size proportional to epsilon.

    Every budget is attacked with an identically seeded rng, ``default_rng(seed)``
    unless ``rng_factory`` supplies one.
    """
    make_rng = rng_factory or (lambda: np.random.default_rng(seed))
    curve = {}
    for eps in epsilons:
        cfg = scaled(base, eps)
        curve[float(eps)] = accuracy(model, dataset, cfg, make_rng())
    return curve


def corruption_eval(model, dataset: Dataset, kinds: Sequence[str] = CORRUPTIONS,
                    severities: Sequence[int] = (1, 2, 3, 4, 5), seed: int = 0) -> tuple[dict, float]:
    """Natural accuracy per (kind, severity) cell and their mean (mCA)."""
    unknown = [k for k in kinds if k not in CORRUPTIONS]
    if unknown:
        raise ConfigError(f"unknown corruption kinds {unknown}; known: {CORRUPTIONS}")
    cells = {}
    for kind in kinds:
        for sev in severities:
            rng = np.random.default_rng([seed, CORRUPTIONS.index(kind), int(sev)])
            x = corrupt(dataset.inputs, kind, int(sev), rng, dataset.image_shape)
            cells[(kind, int(sev))] = accuracy(model, Dataset(x, dataset.labels, dataset.num_classes,
                                                              dataset.name, dataset.image_shape))
    mca = float(np.mean(list(cells.values()))) if cells else float("nan")
    return cells, mca


@dataclass
class AblationCell:
    sparsity: float
    relearn: int
    layer_threshold: Optional[int]
    report: EvalReport
    per_seed: list = field(default_factory=list)


def ablation_sweep(sparsities: Sequence[float], relearns: Sequence[int], thresholds: Sequence[Optional[int]],
                   base_cfg, train_set: Dataset, test_set: Dataset, seeds: Sequence[int] = (0,),
                   on_run=None) -> list[AblationCell]:
    """One full training run per (s, e_r, L, seed); reports are seed-averaged per cell."""
    from dataclasses import replace

    from .train import run

    if not sparsities or not relearns or not thresholds or not seeds:
        raise ConfigError("every ablation axis needs at least one value")
    cells = []
    for s in sparsities:
        for er in relearns:
            for L in thresholds:
                sched = replace(base_cfg.schedule, sparsity=float(s), relearn=int(er), layer_threshold=L)
                reports = []
                for seed in seeds:
                    cfg = replace(base_cfg, mode="fomo", schedule=sched, seed=int(seed))
                    result = run(cfg, train_set, test_set)
                    rep = report_from_run(result)
                    reports.append(rep)
                    if on_run is not None:
                        on_run(s, er, L, seed, rep)
                mean = make_report(*(float(np.mean([getattr(r, a) for r in reports]))
                                     for a in ("natural_best", "natural_last", "robust_best", "robust_last")))
                cells.append(AblationCell(float(s), int(er), L, mean, reports))
    return cells

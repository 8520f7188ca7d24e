"""Experiment driver: ``fomo {train,eval,probe,sweep-eps,sweep-ablation,corrupt-eval}``.

Exit codes: 0 success, 2 config/usage error, 3 format error, 4 contract violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig, defaults, parse_config, parse_text
from .data import Dataset, split
from .errors import FomoError
from .evaluate import (ablation_sweep, accuracy, corruption_eval, epsilon_sweep, flatness_probe,
                       make_report, tradeoff)
from .tensor import set_precision
from .train import TrainState, eval_rng, inference_model, run

log = logging.getLogger("fomo")

METRICS_HEADER = ["epoch", "lr", "nat_train", "rob_train", "nat_test", "rob_test", "loss_adv", "loss_cr", "event"]
SUMMARY_HEADER = ["seed", "best_epoch", "nat_best", "nat_last", "rob_best", "rob_last", "delta", "tradeoff"]


class UsageError(FomoError):
    exit_code = 2


def _load_config(args) -> RunConfig:
    if args.config:
        try:
            cfg = parse_config(args.config)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from None
    else:
        cfg = defaults()
    over = {}
    if args.seed is not None:
        over["run__seeds"] = (args.seed,)
    if args.precision is not None:
        over["run__precision"] = str(args.precision)
    return cfg.with_overrides(**over) if over else cfg


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _metrics_row(rec) -> list:
    return [rec.epoch, rec.lr, rec.natural_train_acc, rec.robust_train_acc, rec.natural_test_acc,
            rec.robust_test_acc, rec.loss_adv, rec.loss_cr, rec.event]


def _open_metrics(path: Path, keep_through: int | None):
    """Open metrics.csv for appending; on resume drop rows past ``keep_through``."""
    if keep_through is not None and path.exists():
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        kept = [r for r in rows[1:] if r and int(r[0]) <= keep_through]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            w.writerows(kept)
    elif not path.exists() or keep_through is None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)
    return open(path, "a", newline="")


def _load_ckpt(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    return ckpt_io.load_checkpoint(p)


def _summary(seed, best, last_nat, last_rob) -> dict:
    rep = make_report(best.natural_test, last_nat, best.robust_test, last_rob)
    return dict(seed=seed, best_epoch=best.epoch, nat_best=best.natural_test, nat_last=last_nat,
                rob_best=best.robust_test, rob_last=last_rob, delta=rep.delta, tradeoff=rep.tradeoff)


def train_one(cfg: RunConfig, seed: int, out: Path, datasets, state: TrainState | None = None,
              stop_after: int | None = None) -> dict:
    tcfg = cfg.train_config(seed)
    train_set, test_set = datasets
    train_set, val_set = split(train_set, tcfg.val_ratio, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.trajectory_hash(seed)
    every = cfg["run.checkpoint_every"]
    text = cfg.to_text()

    fh = _open_metrics(out / "metrics.csv", state.epoch if state is not None else None)
    writer = csv.writer(fh)

    def on_epoch(rec, st):
        writer.writerow([_fmt(v) for v in _metrics_row(rec)])
        fh.flush()
        final = rec.epoch == tcfg.epochs or rec.epoch == stop_after
        if final or (every and rec.epoch % every == 0):
            ck = ckpt_io.checkpoint_from_state(st, digest, seed=seed, config=text, mode=tcfg.mode)
            if every and rec.epoch % every == 0:
                ckpt_io.save_checkpoint(ck, out / f"epoch_{rec.epoch:03d}.ckpt")
            ckpt_io.save_checkpoint(ck, out / "last.ckpt")

    try:
        result = run(tcfg, train_set, test_set, val_set=val_set, state=state, on_epoch=on_epoch,
                     stop_after=stop_after)
    finally:
        fh.close()
    if result.records:
        last = result.records[-1]
        return _summary(seed, result.best, last.natural_test_acc, last.robust_test_acc)
    return _summary(seed, result.best, float("nan"), float("nan"))


def cmd_train(args) -> str:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        ck = _load_ckpt(args.resume)
        seed = int(ck.extra.get("seed", cfg["run.seeds"][0]))
        if args.config is None and "config" in ck.extra:
            cfg = parse_text(ck.extra["config"], str(args.resume))
            if args.precision is not None:
                cfg = cfg.with_overrides(run__precision=str(args.precision))
        set_precision(cfg.precision)
        state = ckpt_io.state_from_checkpoint(ck, cfg.trajectory_hash(seed))
        seeds, states = [seed], {seed: state}
    else:
        set_precision(cfg.precision)
        seeds, states = list(cfg["run.seeds"]), {}
    (out / "config-resolved.txt").write_text(cfg.to_text())
    datasets = cfg.datasets()
    rows = []
    for seed in seeds:
        rows.append(train_one(cfg, seed, out / f"seed_{seed}", datasets, states.get(seed), args.stop_after))
    if len(rows) > 1:
        mean = {k: float(np.mean([r[k] for r in rows])) for k in SUMMARY_HEADER[1:]}
        rows.append(dict(seed="mean", **mean))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_HEADER)
        w.writeheader()
        w.writerows({k: _fmt(v) for k, v in r.items()} for r in rows)
    r = rows[-1]
    return (f"train {cfg['train.mode']} seeds={seeds} rob_last={r['rob_last']:.4f} rob_best={r['rob_best']:.4f} "
            f"delta={r['delta']:.2f} tradeoff={r['tradeoff']:.2f} out={out}")


def _checkpoint_context(args):
    """(config, checkpoint, inference model, seed) for the analysis commands."""
    ck = _load_ckpt(args.checkpoint)
    if args.config:
        cfg = _load_config(args)
    elif "config" in ck.extra:
        cfg = parse_text(ck.extra["config"], str(args.checkpoint))
    else:
        cfg = defaults()
    set_precision(cfg.precision)
    seed = int(ck.extra.get("seed", cfg["run.seeds"][0]))
    if args.seed is not None:
        seed = args.seed
    state = ckpt_io.state_from_checkpoint(ck)
    tcfg = cfg.train_config(seed)
    net = inference_model(tcfg, state.model, state.stable)
    return cfg, ck, state, net, seed


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def cmd_eval(args) -> str:
    cfg, ck, state, net, seed = _checkpoint_context(args)
    _, test_set = cfg.datasets()
    tcfg = cfg.train_config(seed)
    nat = accuracy(net, test_set)
    rob = accuracy(net, test_set, tcfg.test_attack, eval_rng(seed, ck.epoch, 1))
    best = state.best
    t = tradeoff(100 * nat, 100 * rob) if nat > 0 and rob > 0 else 0.0
    res = dict(epoch=ck.epoch, natural_acc=nat, robust_acc=rob, best_epoch=best.epoch,
               best_robust_acc=best.robust_test, delta=100 * rob - 100 * best.robust_test, tradeoff=t)
    _write_json(Path(args.out) / "eval.json", res)
    return (f"eval epoch={ck.epoch} nat={nat:.4f} rob={rob:.4f} best_rob={best.robust_test:.4f}@{best.epoch} "
            f"delta={res['delta']:.2f} tradeoff={t:.2f}")


def _probe_set(cfg: RunConfig, seed: int, which: str) -> Dataset:
    train_set, test_set = cfg.datasets()
    if which == "test":
        return test_set
    return split(train_set, cfg["data.val_ratio"], seed=seed)[0]


def cmd_probe(args) -> str:
    cfg, ck, state, net, seed = _checkpoint_context(args)
    data = _probe_set(cfg, seed, args.split)
    sigmas = tuple(args.sigmas) if args.sigmas else cfg["eval.sigmas"]
    curve = flatness_probe(net, data, sorted(sigmas), cfg["eval.trials"], np.random.default_rng([seed, 99]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "flatness.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "accuracy"])
        w.writerows([_fmt(s), _fmt(a)] for s, a in curve.items())
    return "probe " + " ".join(f"s={s:g}:{a:.4f}" for s, a in curve.items())


def cmd_sweep_eps(args) -> str:
    cfg, ck, state, net, seed = _checkpoint_context(args)
    _, test_set = cfg.datasets()
    base = cfg.train_config(seed).test_attack
    eps = [float(e) for e in args.epsilons] if args.epsilons else [e * cfg["eval.eps_unit"] for e in cfg["eval.epsilons"]]
    curve = epsilon_sweep(net, test_set, eps, base, rng_factory=lambda: eval_rng(seed, ck.epoch, 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eps_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "robust_acc"])
        w.writerows([_fmt(e), _fmt(a)] for e, a in curve.items())
    return "sweep-eps " + " ".join(f"{e:.4g}:{a:.4f}" for e, a in curve.items())


def cmd_corrupt_eval(args) -> str:
    cfg, ck, state, net, seed = _checkpoint_context(args)
    _, test_set = cfg.datasets()
    cells, mca = corruption_eval(net, test_set, cfg["eval.corruptions"], cfg["eval.severities"], seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corruption.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "severity", "accuracy"])
        w.writerows([k, s, _fmt(a)] for (k, s), a in cells.items())
        w.writerow(["mCA", "", _fmt(mca)])
    return f"corrupt-eval cells={len(cells)} mCA={mca:.4f}"


ABLATION_HEADER = ["sparsity", "relearn", "layer_threshold", "seed", "rob_best", "rob_last", "delta", "nat_last",
                   "tradeoff"]


def cmd_sweep_ablation(args) -> str:
    cfg = _load_config(args)
    set_precision(cfg.precision)
    if cfg["train.mode"] != "fomo":
        cfg = cfg.with_overrides(train__mode="fomo")
    sparsities = tuple(args.sparsity) if args.sparsity else cfg["sweep.sparsity"]
    relearns = tuple(args.relearn) if args.relearn else cfg["sweep.relearn"]
    thresholds = cfg["sweep.layer_threshold"] if args.layer_threshold is None else tuple(args.layer_threshold)
    train_set, test_set = cfg.datasets()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config-resolved.txt").write_text(cfg.to_text())
    fh = open(out / "ablation.csv", "w", newline="")
    w = csv.writer(fh)
    w.writerow(ABLATION_HEADER)

    def on_run(s, er, L, seed, rep):
        w.writerow([_fmt(s), er, "auto" if L is None else L, seed, _fmt(rep.robust_best), _fmt(rep.robust_last),
                    _fmt(rep.delta), _fmt(rep.natural_last), _fmt(rep.tradeoff)])
        fh.flush()

    try:
        cells = ablation_sweep(sparsities, relearns, thresholds, cfg.train_config(), train_set, test_set,
                               seeds=cfg["run.seeds"], on_run=on_run)
        for c in cells:
            r = c.report
            w.writerow([_fmt(c.sparsity), c.relearn, "auto" if c.layer_threshold is None else c.layer_threshold,
                        "mean", _fmt(r.robust_best), _fmt(r.robust_last), _fmt(r.delta), _fmt(r.natural_last),
                        _fmt(r.tradeoff)])
    finally:
        fh.close()
    return "sweep-ablation " + " ".join(
        f"s={c.sparsity:g},er={c.relearn},L={'auto' if c.layer_threshold is None else c.layer_threshold}:"
        f"{c.report.robust_last:.4f}" for c in cells)


def _auto_int(s: str):
    return None if s == "auto" else int(s)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file (defaults if omitted)")
    common.add_argument("--out", metavar="DIR", default="runs/latest", help="output directory")
    common.add_argument("--seed", type=int, help="override run.seeds with a single seed")
    common.add_argument("--precision", type=int, choices=(32, 64), help="override run.precision")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = argparse.ArgumentParser(prog="fomo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train (pgd-at or fomo) and write metrics + checkpoints")
    p.add_argument("--resume", metavar="CKPT", help="continue a run from a checkpoint")
    p.add_argument("--stop-after", type=int, metavar="EPOCH", help="stop once this epoch completes")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "natural/robust accuracy, delta and trade-off of a checkpoint"),
        ("probe", cmd_probe, "flatness curve under Gaussian parameter noise"),
        ("sweep-eps", cmd_sweep_eps, "robust accuracy across attack budgets"),
        ("corrupt-eval", cmd_corrupt_eval, "accuracy under input corruptions and mCA"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True, metavar="CKPT")
        if name == "probe":
            p.add_argument("--sigmas", type=float, nargs="+")
            p.add_argument("--split", choices=("train", "test"), default="train")
        if name == "sweep-eps":
            p.add_argument("--epsilons", type=float, nargs="+", help="absolute budgets (default eval.epsilons * eval.eps_unit)")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep-ablation", parents=[common], help="s x e_r x L grid of fomo runs")
    p.add_argument("--sparsity", type=float, nargs="+")
    p.add_argument("--relearn", type=int, nargs="+")
    p.add_argument("--layer-threshold", type=_auto_int, nargs="+")
    p.set_defaults(func=cmd_sweep_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        line = args.func(args)
    except FomoError as exc:
        print(f"fomo {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except IndexError as exc:
        print(f"fomo {args.command}: contract violation: {exc}", file=sys.stderr)
        return 4
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())

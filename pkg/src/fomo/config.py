"""Line-oriented ``key = value`` run configuration.

Keys are dotted (``fomo.sparsity = 0.035``), ``#`` starts a comment, and every
key has a default, so an empty file is a complete config. Any unknown key or
bad value raises :class:`ConfigError` naming the key and line.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .attacks import AttackConfig, attack_presets, canonical_norm
from .data import CORRUPTIONS, Dataset, load_idx, make_synthetic
from .errors import ConfigError
from .forgetting import FomoSchedule
from .train import TrainConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(item: Callable) -> Callable:
    def parse(s: str):
        s = s.strip()
        if not s:
            return ()
        return tuple(item(part.strip()) for part in s.split(","))
    return parse


def _auto(item: Callable) -> Callable:
    def parse(s: str):
        return None if s.strip().lower() in ("auto", "") else item(s)
    return parse


def _choice(*options: str) -> Callable:
    def parse(s: str):
        if s not in options:
            raise ValueError(f"expected one of {options}")
        return s
    return parse


def _bounds(s: str):
    if s.strip().lower() == "none":
        return None
    lo, hi = _list(float)(s)
    return (lo, hi)


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


# key: (parser, default text)
SCHEMA: dict[str, tuple[Callable, str]] = {
    "run.seeds": (_list(int), "0"),
    "run.precision": (_choice("32", "64"), "32"),
    "run.checkpoint_every": (int, "0"),
    "data.name": (_choice("blobs", "spirals", "idx"), "blobs"),
    "data.n": (int, "2000"),
    "data.test_n": (int, "1000"),
    "data.classes": (int, "4"),
    "data.label_noise": (float, "0.2"),
    "data.spread": (_auto(float), "auto"),
    "data.dim": (int, "2"),
    "data.seed": (int, "0"),
    "data.train_images": (str, ""),
    "data.train_labels": (str, ""),
    "data.test_images": (str, ""),
    "data.test_labels": (str, ""),
    "data.subset": (int, "0"),
    "data.val_ratio": (float, "0.9"),
    "model.hidden": (_auto(_list(int)), "auto"),
    "train.mode": (_choice("fomo", "pgd-at"), "fomo"),
    "train.epochs": (int, "60"),
    "train.batch_size": (int, "128"),
    "train.lr": (float, "0.1"),
    "train.lr_decay": (_list(int), "30,45"),
    "train.momentum": (float, "0.9"),
    "train.weight_decay": (float, "0.0005"),
    "attack.preset": (str, ""),
    "attack.norm": (canonical_norm, "linf"),
    "attack.epsilon": (float, "0.03137254901960784"),
    "attack.step_size": (float, "0.00784313725490196"),
    "attack.steps": (int, "10"),
    "attack.test_steps": (int, "20"),
    "attack.random_start": (_bool, "true"),
    "attack.bounds": (_bounds, "0.0,1.0"),
    "fomo.sparsity": (float, "0.035"),
    "fomo.layer_threshold": (_auto(int), "auto"),
    "fomo.warmup": (int, "32"),
    "fomo.relearn": (int, "3"),
    "fomo.alpha_c": (float, "0.999"),
    "fomo.lambda1": (float, "1.0"),
    "fomo.lambda2": (float, "1.0"),
    "eval.sigmas": (_list(float), "0.0,0.01,0.02,0.05,0.1,0.2"),
    "eval.trials": (int, "5"),
    "eval.epsilons": (_list(float), "0.0,0.25,0.5,1.0,2.0,4.0,8.0"),
    "eval.eps_unit": (float, "0.00392156862745098"),
    "eval.corruptions": (_list(str), ",".join(CORRUPTIONS)),
    "eval.severities": (_list(int), "1,2,3,4,5"),
    "sweep.sparsity": (_list(float), "0.035,0.5"),
    "sweep.relearn": (_list(int), "1,3"),
    "sweep.layer_threshold": (_list(_auto(int)), "auto"),
}

# keys that do not influence a single training trajectory
_UNHASHED = {"run.seeds", "run.checkpoint_every"} | {k for k in SCHEMA if k.startswith(("eval.", "sweep."))}


@dataclass
class RunConfig:
    values: dict[str, Any]
    explicit: frozenset = frozenset()

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **dotted) -> "RunConfig":
        vals = dict(self.values)
        for k, v in dotted.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = v
        cfg = RunConfig(vals, self.explicit | {k.replace("__", ".") for k in dotted})
        _validate(cfg, {})
        return cfg

    @property
    def precision(self) -> int:
        return int(self.values["run.precision"])

    def attack(self, test: bool = False) -> AttackConfig:
        v = self.values
        return AttackConfig(
            epsilon=v["attack.epsilon"], norm=v["attack.norm"], step_size=v["attack.step_size"],
            steps=v["attack.test_steps"] if test else v["attack.steps"],
            random_start=v["attack.random_start"], input_bounds=v["attack.bounds"],
        )

    def schedule(self) -> FomoSchedule:
        v = self.values
        return FomoSchedule(sparsity=v["fomo.sparsity"], layer_threshold=v["fomo.layer_threshold"],
                            warmup=v["fomo.warmup"], relearn=v["fomo.relearn"], alpha_c=v["fomo.alpha_c"],
                            lambda1=v["fomo.lambda1"], lambda2=v["fomo.lambda2"])

    def train_config(self, seed: int | None = None) -> TrainConfig:
        v = self.values
        fomo = v["train.mode"] == "fomo"
        return TrainConfig(
            epochs=v["train.epochs"], batch_size=v["train.batch_size"], lr=v["train.lr"],
            lr_decay_epochs=tuple(v["train.lr_decay"]), momentum=v["train.momentum"],
            weight_decay=v["train.weight_decay"], seed=v["run.seeds"][0] if seed is None else seed,
            mode=v["train.mode"], attack=self.attack(), test_attack=self.attack(test=True),
            schedule=self.schedule() if fomo else None, hidden=v["model.hidden"], val_ratio=v["data.val_ratio"],
        )

    def datasets(self) -> tuple[Dataset, Dataset]:
        """(train, test) in the current precision; synthetic test sets carry clean labels."""
        v = self.values
        if v["data.name"] == "idx":
            train = load_idx(v["data.train_images"], v["data.train_labels"], v["data.classes"])
            test = load_idx(v["data.test_images"], v["data.test_labels"], v["data.classes"])
            if v["data.subset"]:
                rng = np.random.default_rng(v["data.seed"])
                train = train.subset(np.sort(rng.permutation(len(train))[: v["data.subset"]]))
            return train, test
        train = make_synthetic(v["data.name"], v["data.n"], v["data.classes"], v["data.label_noise"],
                               np.random.default_rng([v["data.seed"], 0]), spread=v["data.spread"], dim=v["data.dim"])
        test = make_synthetic(v["data.name"], v["data.test_n"], v["data.classes"], 0.0,
                              np.random.default_rng([v["data.seed"], 1]), spread=v["data.spread"], dim=v["data.dim"])
        return train, test

    def to_text(self) -> str:
        lines = []
        section = None
        for key in SCHEMA:
            head = key.split(".")[0]
            if head != section:
                if section is not None:
                    lines.append("")
                section = head
            lines.append(f"{key} = {_fmt(self.values[key])}")
        return "\n".join(lines) + "\n"

    def trajectory_hash(self, seed: int) -> str:
        """Digest of everything that determines one seed's training trajectory."""
        body = "\n".join(f"{k}={_fmt(self.values[k])}" for k in SCHEMA if k not in _UNHASHED)
        return hashlib.sha256(f"{body}\nseed={seed}\n".encode()).hexdigest()


def defaults() -> RunConfig:
    return parse_text("")


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_text(path.read_text(encoding="utf-8"), str(path))


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = (value, lineno)

    values: dict[str, Any] = {}
    for key, (parser, default) in SCHEMA.items():
        text_value, lineno = raw.get(key, (default, 0))
        try:
            values[key] = parser(text_value)
        except (ValueError, TypeError, ConfigError) as exc:
            where = f"{source}:{lineno}" if lineno else f"default for {key}"
            raise ConfigError(f"{where}: bad value {text_value!r} for {key}: {exc}") from None

    preset = values["attack.preset"]
    if preset:
        base = attack_presets(preset)
        for field_, key in (("norm", "attack.norm"), ("epsilon", "attack.epsilon"),
                            ("step_size", "attack.step_size"), ("steps", "attack.steps")):
            if key not in raw:
                values[key] = getattr(base, field_)
        if "attack.test_steps" not in raw:
            values["attack.test_steps"] = 2 * values["attack.steps"]

    cfg = RunConfig(values, frozenset(raw))
    _validate(cfg, {k: ln for k, (_, ln) in raw.items()})
    return cfg


def _validate(cfg: RunConfig, lines: dict[str, int]) -> None:
    v = cfg.values

    def fail(key, msg):
        where = f"line {lines[key]}" if key in lines else "default"
        raise ConfigError(f"{key} ({where}): {msg}")

    if not v["run.seeds"]:
        fail("run.seeds", "need at least one seed")
    checks = [
        ("data.n", v["data.n"] >= 10, "must be >= 10"),
        ("data.test_n", v["data.test_n"] >= 1, "must be >= 1"),
        ("data.classes", v["data.classes"] >= 2, "must be >= 2"),
        ("data.label_noise", 0 <= v["data.label_noise"] < 1, "must lie in [0, 1)"),
        ("data.val_ratio", 0 < v["data.val_ratio"] < 1, "must lie in (0, 1)"),
        ("data.subset", v["data.subset"] >= 0, "must be >= 0"),
        ("data.dim", v["data.dim"] >= 2 and (v["data.dim"] == 2 or v["data.name"] != "spirals"),
         "must be >= 2 (spirals are 2-D only)"),
        ("train.epochs", v["train.epochs"] >= 1, "must be >= 1"),
        ("train.batch_size", v["train.batch_size"] >= 1, "must be >= 1"),
        ("train.lr", v["train.lr"] >= 0, "must be >= 0"),
        ("train.momentum", v["train.momentum"] >= 0, "must be >= 0"),
        ("train.weight_decay", v["train.weight_decay"] >= 0, "must be >= 0"),
        ("attack.epsilon", v["attack.epsilon"] >= 0, "must be >= 0"),
        ("attack.step_size", v["attack.step_size"] > 0, "must be > 0"),
        ("attack.steps", v["attack.steps"] >= 1, "must be >= 1"),
        ("attack.test_steps", v["attack.test_steps"] >= 1, "must be >= 1"),
        ("run.checkpoint_every", v["run.checkpoint_every"] >= 0, "must be >= 0"),
        ("eval.trials", v["eval.trials"] >= 1, "must be >= 1"),
    ]
    for key, ok, msg in checks:
        if not ok:
            fail(key, msg)
    decay = v["train.lr_decay"]
    if any(b <= a for a, b in zip(decay, decay[1:])) or any(not 0 <= e < v["train.epochs"] for e in decay):
        fail("train.lr_decay", f"must be strictly increasing epochs in [0, {v['train.epochs']})")
    if v["data.name"] == "idx":
        for key in ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels"):
            if not v[key]:
                fail(key, "required when data.name = idx")
    bad = [k for k in v["eval.corruptions"] if k not in CORRUPTIONS]
    if bad:
        fail("eval.corruptions", f"unknown kinds {bad}")
    if any(s < 0 for s in v["eval.sigmas"]):
        fail("eval.sigmas", "must be >= 0")
    if any(not 0 <= s <= 5 for s in v["eval.severities"]):
        fail("eval.severities", "must lie in 0..5")
    if v["train.mode"] == "fomo":
        fchecks = [
            ("fomo.sparsity", 0 <= v["fomo.sparsity"] <= 1, "must lie in [0, 1]"),
            ("fomo.relearn", v["fomo.relearn"] >= 1, "must be >= 1"),
            ("fomo.warmup", 0 <= v["fomo.warmup"] < v["train.epochs"], f"must lie in [0, {v['train.epochs']})"),
            ("fomo.alpha_c", 0 <= v["fomo.alpha_c"] < 1, "must lie in [0, 1)"),
            ("fomo.lambda1", v["fomo.lambda1"] >= 0, "must be >= 0"),
            ("fomo.lambda2", v["fomo.lambda2"] >= 0, "must be >= 0"),
            ("fomo.layer_threshold", v["fomo.layer_threshold"] is None or v["fomo.layer_threshold"] >= 0,
             "must be >= 0 or auto"),
        ]
        for key, ok, msg in fchecks:
            if not ok:
                fail(key, msg)

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fomo.checkpoint import load_checkpoint
from fomo.cli import METRICS_HEADER, main
from fomo.tensor import get_precision, set_precision

TINY = """
run.seeds = 0,1
run.checkpoint_every = 2
data.n = 200
data.test_n = 100
model.hidden = 16,16
train.epochs = 6
train.lr_decay = 3
train.batch_size = 32
fomo.warmup = 2
fomo.relearn = 2
attack.epsilon = 0.05
attack.step_size = 0.0125
eval.sigmas = 0,0.05
eval.trials = 2
eval.severities = 1,5
sweep.sparsity = 0.035,0.5
sweep.relearn = 1
"""


@pytest.fixture(autouse=True)
def keep_precision():
    old = get_precision()
    yield
    set_precision(old)


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def trained_dir(tmp_path, cfg_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


def test_train_outputs(trained_dir, capsys):
    for seed in (0, 1):
        m = rows(trained_dir / f"seed_{seed}" / "metrics.csv")
        assert m[0] == METRICS_HEADER == "epoch,lr,nat_train,rob_train,nat_test,rob_test,loss_adv,loss_cr,event".split(",")
        assert [r[0] for r in m[1:]] == [str(e) for e in range(1, 7)]
        assert [r[-1] for r in m[1:]] == ["", "", "", "consolidate+forget", "", "consolidate+forget"]
        names = {p.name for p in (trained_dir / f"seed_{seed}").iterdir()}
        assert {"epoch_002.ckpt", "epoch_004.ckpt", "epoch_006.ckpt", "last.ckpt"} <= names
    summary = rows(trained_dir / "summary.csv")
    assert [r[0] for r in summary[1:]] == ["0", "1", "mean"]
    assert (trained_dir / "config-resolved.txt").read_text().count("=") > 40


def test_eval_reproduces_last_record(trained_dir, tmp_path, capsys):
    last = rows(trained_dir / "seed_0" / "metrics.csv")[-1]
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(trained_dir / "seed_0" / "last.ckpt"), "--out", str(tmp_path / "ev")]) == 0
    line = capsys.readouterr().out.strip().splitlines()
    assert len(line) == 1 and line[0].startswith("eval ")
    res = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert repr(res["natural_acc"]) == last[4] and repr(res["robust_acc"]) == last[5]


def test_sweep_eps_single_matches_eval(trained_dir, tmp_path):
    ck = str(trained_dir / "seed_1" / "last.ckpt")
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "e")]) == 0
    assert main(["sweep-eps", "--checkpoint", ck, "--out", str(tmp_path / "s"), "--epsilons", "0.05"]) == 0
    rob = json.loads((tmp_path / "e" / "eval.json").read_text())["robust_acc"]
    sweep = rows(tmp_path / "s" / "eps_sweep.csv")
    assert sweep[0] == ["epsilon", "robust_acc"] and float(sweep[1][1]) == rob


def test_sweep_eps_default_grid(trained_dir, tmp_path):
    ck = str(trained_dir / "seed_0" / "last.ckpt")
    assert main(["sweep-eps", "--checkpoint", ck, "--out", str(tmp_path / "s")]) == 0
    assert len(rows(tmp_path / "s" / "eps_sweep.csv")) == 1 + 7


def test_probe_and_corrupt(trained_dir, tmp_path):
    ck = str(trained_dir / "seed_0" / "last.ckpt")
    assert main(["probe", "--checkpoint", ck, "--out", str(tmp_path / "p")]) == 0
    flat = rows(tmp_path / "p" / "flatness.csv")
    assert flat[0] == ["sigma", "accuracy"] and len(flat) == 3
    assert main(["corrupt-eval", "--checkpoint", ck, "--out", str(tmp_path / "c")]) == 0
    cells = rows(tmp_path / "c" / "corruption.csv")
    assert len(cells) == 1 + 5 * 2 + 1 and cells[-1][0] == "mCA"
    assert float(cells[-1][2]) == pytest.approx(np.mean([float(r[2]) for r in cells[1:-1]]), abs=1e-12)


def test_sweep_ablation(cfg_path, tmp_path):
    assert main(["sweep-ablation", "--config", str(cfg_path), "--seed", "0", "--out", str(tmp_path / "a")]) == 0
    table = rows(tmp_path / "a" / "ablation.csv")
    assert len([r for r in table[1:] if r[3] == "mean"]) == 2 and len(table) == 1 + 2 + 2


def test_rerun_bit_identical(trained_dir, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--config", str(trained_dir / "config-resolved.txt"), "--out", str(again)]) == 0
    for seed in (0, 1):
        a = (trained_dir / f"seed_{seed}" / "metrics.csv").read_bytes()
        assert a == (again / f"seed_{seed}" / "metrics.csv").read_bytes()


def test_resume_bit_identical(trained_dir, cfg_path, tmp_path):
    out = tmp_path / "res"
    assert main(["train", "--config", str(cfg_path), "--seed", "0", "--out", str(out), "--stop-after", "3"]) == 0
    partial = rows(out / "seed_0" / "metrics.csv")
    assert len(partial) == 4
    assert main(["train", "--config", str(cfg_path), "--out", str(out),
                 "--resume", str(out / "seed_0" / "last.ckpt")]) == 0
    assert (out / "seed_0" / "metrics.csv").read_bytes() == (trained_dir / "seed_0" / "metrics.csv").read_bytes()


def test_resume_drops_rows_past_checkpoint(trained_dir, cfg_path, tmp_path):
    out = tmp_path / "crash"
    out.mkdir()
    (out / "seed_0").mkdir()
    # a crash after epoch 5's row was written but before its checkpoint
    (out / "seed_0" / "metrics.csv").write_text(
        "\n".join(",".join(r) for r in rows(trained_dir / "seed_0" / "metrics.csv")[:6]) + "\n")
    assert main(["train", "--config", str(cfg_path), "--out", str(out),
                 "--resume", str(trained_dir / "seed_0" / "epoch_004.ckpt")]) == 0
    assert rows(out / "seed_0" / "metrics.csv") == rows(trained_dir / "seed_0" / "metrics.csv")


def test_precision_64_checkpoint(cfg_path, tmp_path):
    out = tmp_path / "p64"
    assert main(["train", "--config", str(cfg_path), "--seed", "0", "--precision", "64", "--out", str(out)]) == 0
    assert load_checkpoint(out / "seed_0" / "last.ckpt").dtype == np.float64


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 2

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path)]) == 2

    def test_bad_config(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("fomo.sparsity = 1.5\n")
        assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == 2

    def test_bad_checkpoint(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTACKPT" + bytes(40))
        assert main(["eval", "--checkpoint", str(p), "--out", str(tmp_path)]) == 3

    def test_resume_with_other_config(self, trained_dir, tmp_path):
        p = tmp_path / "other.cfg"
        p.write_text(TINY.replace("train.batch_size = 32", "train.batch_size = 16"))
        rc = main(["train", "--config", str(p), "--out", str(tmp_path / "x"),
                   "--resume", str(trained_dir / "seed_0" / "epoch_002.ckpt")])
        assert rc == 4

    def test_usage_without_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fomo.cli", "train", "--config", str(tmp_path / "missing.cfg")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "not found" in proc.stderr

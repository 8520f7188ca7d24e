import numpy as np
import pytest

from fomo import _kernels
from fomo.tensor import get_precision, set_precision


@pytest.fixture
def f64():
    """Run a test in 64-bit mode and restore the previous precision."""
    old = get_precision()
    set_precision(64)
    yield
    set_precision(old)


@pytest.fixture
def f32():
    old = get_precision()
    set_precision(32)
    yield
    set_precision(old)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    old = _kernels.get_backend()
    _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw):
    """A seconds-scale training config on 2-D blobs."""
    from fomo.attacks import AttackConfig
    from fomo.forgetting import FomoSchedule
    from fomo.train import TrainConfig

    base = dict(epochs=6, batch_size=32, lr=0.1, lr_decay_epochs=(4,), momentum=0.9, weight_decay=5e-4, seed=0,
                mode="fomo", attack=AttackConfig(epsilon=0.05, step_size=0.0125, steps=3),
                test_attack=AttackConfig(epsilon=0.05, step_size=0.0125, steps=5),
                schedule=FomoSchedule(warmup=2, relearn=2), hidden=(16, 16))
    base.update(kw)
    return TrainConfig(**base)


def tiny_data(n=200, noise=0.1, seed=0):
    from fomo.data import make_synthetic

    train = make_synthetic("blobs", n, 4, noise, np.random.default_rng([seed, 0]))
    test = make_synthetic("blobs", 100, 4, 0.0, np.random.default_rng([seed, 1]))
    return train, test


@pytest.fixture(scope="session")
def trained():
    """(model, test set, train set) from a short pgd-at run in 64-bit mode."""
    from fomo.train import run

    old = get_precision()
    set_precision(64)
    try:
        train, test = tiny_data(noise=0.0)
        result = run(tiny_config(mode="pgd-at", schedule=None, epochs=8, lr_decay_epochs=()), train, test)
    finally:
        set_precision(old)
    return result.model, test, train


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)

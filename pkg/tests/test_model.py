import numpy as np
import pytest

from fomo.errors import ConfigError, DimensionError
from fomo.forgetting import consolidate
from fomo.model import (MLP, StableModel, clone_parameters, default_layer_threshold, default_widths, forward,
                        init_bound, init_mlp)
from fomo.tensor import Tape, Tensor, backward, sgd_step, softmax, softmax_cross_entropy


def test_identity_single_layer(f64, rng):
    net = MLP([np.eye(3)], [np.zeros(3)])
    x = rng.uniform(size=(4, 3))
    np.testing.assert_array_equal(forward(net, Tensor(x)).data, x)


def test_zero_weights_uniform_softmax(f64):
    net = MLP([np.zeros((2, 5)), np.zeros((5, 3))], [np.zeros(5), np.zeros(3)])
    z = net(Tensor(np.ones((2, 2))))
    assert not z.data.any()
    np.testing.assert_allclose(softmax(z), 1 / 3)


def test_composition_oracle(f64, rng):
    net = init_mlp([4, 6, 3], rng)
    net.layers[0][1].data[:] = rng.normal(size=6)
    x = rng.uniform(size=(5, 4))
    (w0, b0), (w1, b1) = [(w.data, b.data) for w, b in net.layers]
    want = np.maximum(x @ w0 + b0, 0) @ w1 + b1
    np.testing.assert_allclose(net(Tensor(x)).data, want, atol=1e-12)


def test_forward_width_mismatch(f64, rng):
    with pytest.raises(DimensionError):
        init_mlp([4, 3], rng)(Tensor(np.ones((1, 5))))


def test_layer_chain_checked():
    with pytest.raises(DimensionError):
        MLP([np.ones((2, 3)), np.ones((4, 2))], [np.ones(3), np.ones(2)])


def test_init_reproducible():
    a = init_mlp([2, 3, 2], np.random.default_rng(7))
    b = init_mlp([2, 3, 2], np.random.default_rng(7))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))


def test_init_bound_scan():
    net = init_mlp([400, 250, 2], np.random.default_rng(0))  # 10^5 first-layer weights
    for w, b in net.layers:
        bound = init_bound(w.shape[0])
        assert np.abs(w.data).max() <= bound
        assert np.abs(w.data).max() > 0.99 * bound
        assert not b.data.any()


@pytest.mark.parametrize("widths", [[], [3], [3, 0, 2]])
def test_init_invalid(widths):
    with pytest.raises(ConfigError):
        init_mlp(widths, np.random.default_rng(0))


def test_layer_indexing(rng):
    net = init_mlp([2, 4, 4, 3], rng)
    assert net.layer_count == 3 and net.num_classes == 3 and net.widths == [2, 4, 4, 3]
    shapes = [p.shape for p in net.parameters()]
    assert shapes == [(2, 4), (4,), (4, 4), (4,), (4, 3), (3,)]
    assert [net.param_layer(i) for i in range(6)] == [0, 0, 1, 1, 2, 2]
    assert default_layer_threshold(net) == 1


def test_default_widths():
    assert default_widths(784, 10) == [784, 256, 128, 64, 10]
    assert default_widths(2, 4) == [2, 64, 64, 4]


class TestClone:
    def _train_step(self, net, rng):
        x, y = rng.uniform(size=(3, 2)), np.array([0, 1, 0])
        with Tape() as tape:
            loss = softmax_cross_entropy(net(Tensor(x)), y)
        backward(loss, tape)
        sgd_step(net.parameters(), 0.5, 0.0, 0.0, [])

    def test_independent_of_training(self, f64, rng):
        net = init_mlp([2, 5, 2], rng)
        stable = clone_parameters(net)
        before = stable.copy_arrays()
        self._train_step(net, rng)
        assert any(not np.array_equal(a, b) for a, b in zip(net.arrays(), stable.arrays()))
        assert all(np.array_equal(a, b) for a, b in zip(before, stable.arrays()))

    def test_clone_of_clone(self, f64, rng):
        net = init_mlp([2, 5, 2], rng)
        twice = clone_parameters(clone_parameters(net))
        assert isinstance(twice, StableModel)
        assert all(np.array_equal(a, b) for a, b in zip(net.arrays(), twice.arrays()))

    def test_stable_has_no_grads(self, f64, rng):
        stable = clone_parameters(init_mlp([2, 3, 2], rng))
        with Tape() as tape:
            loss = softmax_cross_entropy(stable(Tensor(np.ones((1, 2)))), [0])
        assert len(tape) == 0 and not loss.requires_grad
        consolidate(stable, init_mlp([2, 3, 2], rng), 0.5)  # EMA is the only writer
        assert all(p.grad is None for p in stable.parameters())


def test_predict_ties_lowest_index(f64):
    net = MLP([np.zeros((2, 3))], [np.zeros(3)])
    assert net.predict(np.ones((4, 2))).tolist() == [0, 0, 0, 0]

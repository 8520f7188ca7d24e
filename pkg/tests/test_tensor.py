import math
import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fomo.errors import ContractError, DimensionError
from fomo.model import init_mlp
from fomo.tensor import (Tape, Tensor, affine, backward, kl_divergence, relu, sgd_step, softmax,
                         softmax_cross_entropy, tensor_sum, zero_grad)


def naive_matmul(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            s = 0.0
            for k in range(x.shape[1]):
                s += x[i, k] * w[k, j]
            out[i, j] = s + b[j]
    return out


def fd_check(f, arr, h=1e-5):
    """Central differences of scalar f() w.r.t. every entry of arr (mutated in place, then restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8))


class TestAffine:
    def test_identity(self, f64):
        out = affine(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([0.0, 0.0]))
        assert out.data.tolist() == [[1.0, 2.0]]

    def test_hand_sum(self, f64):
        out = affine(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
        assert out.data.tolist() == [[6.0]]

    def test_matches_triple_loop(self, f64, rng):
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        out = affine(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, naive_matmul(x, w, b), rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self, f64):
        with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
            affine(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


class TestRelu:
    def test_values(self, f64):
        assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_all_negative(self, f64):
        assert not relu(Tensor(-np.arange(1.0, 6.0))).data.any()

    def test_gradient(self, f64):
        x = Tensor([2.0, -1.0, 0.0], requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(relu(x))
        backward(loss, tape)
        # subgradient 0 at exactly zero
        assert x.grad.tolist() == [1.0, 0.0, 0.0]


class TestCrossEntropy:
    def test_uniform(self, f64):
        assert softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_large_logit_stable(self, f64):
        v = softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0]).item()
        assert math.isfinite(v) and v == pytest.approx(0.0, abs=1e-12)

    def test_extended_precision_oracle(self, f64, rng):
        z = rng.normal(scale=3.0, size=(4, 3))
        y = np.array([0, 2, 1, 2])
        got = softmax_cross_entropy(Tensor(z), y).item()
        with mpmath.workdps(50):
            rows = [mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in zi)) - mpmath.mpf(zi[yi])
                    for zi, yi in zip(z, y)]
            want = float(mpmath.fsum(rows) / 4)
        assert got == pytest.approx(want, abs=1e-10)

    def test_label_out_of_range(self, f64):
        with pytest.raises(IndexError):
            softmax_cross_entropy(Tensor([[0.0, 0.0]]), [2])

    def test_gradient_uniform(self, f64):
        z = Tensor(np.zeros((3, 2)), requires_grad=True)
        with Tape() as tape:
            loss = softmax_cross_entropy(z, [0, 0, 0])
        backward(loss, tape)
        np.testing.assert_allclose(z.grad, np.tile([-0.5, 0.5], (3, 1)) / 3, atol=1e-15)


class TestKL:
    def test_identical_zero(self, f64, rng):
        z = rng.normal(size=(5, 4))
        assert kl_divergence(Tensor(z), z).item() == pytest.approx(0.0, abs=1e-15)

    def test_uniform_zero(self, f64):
        assert kl_divergence(Tensor([[0.0, 0.0]]), np.array([[3.0, 3.0]])).item() == pytest.approx(0.0, abs=1e-15)

    def test_direct_formula(self, f64):
        p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
        want = sum(pk * math.log(2 * pk) for pk in p)
        assert kl_divergence(Tensor([[1.0, 0.0]]), np.zeros((1, 2))).item() == pytest.approx(want, abs=1e-10)

    def test_shape_mismatch(self, f64):
        with pytest.raises(DimensionError):
            kl_divergence(Tensor(np.zeros((2, 3))), np.zeros((2, 2)))

    def test_q_side_gets_no_gradient(self, f64, rng):
        p = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        q = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = kl_divergence(p, q)
        backward(loss, tape)
        assert p.grad is not None and q.grad is None


class TestBackward:
    def test_sum_gives_ones(self, f64):
        x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(x)
        backward(loss, tape)
        assert (x.grad == 1).all()

    def test_non_scalar_rejected(self, f64):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            out = relu(x)
        with pytest.raises(ContractError):
            backward(out, tape)

    def test_accumulates_without_clearing(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = tensor_sum(x)
            backward(loss, tape)
        assert x.grad.tolist() == [2.0, 2.0]

    def test_two_layer_mlp_finite_differences(self, f64, rng):
        net = init_mlp([5, 7, 3], rng)
        x = rng.uniform(size=(4, 5))
        y = np.array([0, 1, 2, 1])

        def loss():
            return softmax_cross_entropy(net.forward(Tensor(x), track_params=False), y).item()

        with Tape() as tape:
            out = softmax_cross_entropy(net.forward(Tensor(x)), y)
        backward(out, tape)
        for p in net.parameters():
            assert rel_err(p.grad, fd_check(loss, p.data)) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_kl_and_xent_gradients_property(b, k, seed):
    from fomo.tensor import get_precision, set_precision

    old = get_precision()
    set_precision(64)
    try:
        r = np.random.default_rng(seed)
        z = r.normal(scale=2.0, size=(b, k))
        q = r.normal(scale=2.0, size=(b, k))
        y = r.integers(0, k, size=b)
        for make in (lambda t: kl_divergence(t, q), lambda t: softmax_cross_entropy(t, y)):
            t = Tensor(z.copy(), requires_grad=True)
            with Tape() as tape:
                out = make(t)
            backward(out, tape)
            num = fd_check(lambda: make(Tensor(z)).item(), z)
            assert rel_err(t.grad, num) < 1e-5
    finally:
        set_precision(old)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.floats(0.1, 50.0), st.integers(0, 2**31 - 1))
def test_softmax_rows_and_kl_nonnegative(b, k, scale_, seed):
    r = np.random.default_rng(seed)
    z = r.normal(scale=scale_, size=(b, k))
    q = r.normal(scale=scale_, size=(b, k))
    np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-9)
    assert kl_divergence(Tensor(z, dtype=np.float64), q).item() >= -1e-9


class TestSGD:
    def test_zero_grad_unchanged(self, f64):
        p = Tensor([1.0, -2.0], requires_grad=True)
        p.grad = np.zeros(2)
        sgd_step([p], 0.1, 0.9, 0.0, [])
        assert p.data.tolist() == [1.0, -2.0]

    def test_single_step(self, f64):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([1.0])
        sgd_step([p], 0.1, 0.0, 0.0, [])
        assert p.data[0] == pytest.approx(0.9, abs=1e-15)

    def test_two_momentum_steps_unrolled(self, f64):
        lr, m, wd = 0.1, 0.9, 5e-4
        p = Tensor([1.0, 2.0], requires_grad=True)
        g1, g2 = np.array([0.3, -0.2]), np.array([-0.1, 0.4])
        state = []
        p.grad = g1
        sgd_step([p], lr, m, wd, state)
        p.grad = g2
        sgd_step([p], lr, m, wd, state)
        p0 = np.array([1.0, 2.0])
        v1 = g1 + wd * p0
        p1 = p0 - lr * v1
        v2 = m * v1 + g2 + wd * p1
        p2 = p1 - lr * v2
        np.testing.assert_allclose(p.data, p2, rtol=0, atol=1e-12)

    def test_missing_grad(self, f64):
        with pytest.raises(ContractError):
            sgd_step([Tensor([1.0], requires_grad=True)], 0.1, 0.0, 0.0, [])

    def test_zero_grad_clears(self, f64):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.ones(1)
        zero_grad([p])
        assert p.grad is None


def test_precision_modes():
    from fomo.tensor import get_dtype, get_precision, set_precision

    old = get_precision()
    try:
        set_precision(64)
        assert Tensor([1.0]).data.dtype == np.float64 and get_dtype() is np.float64
        set_precision(32)
        assert Tensor([1.0]).data.dtype == np.float32
        with pytest.raises(ValueError):
            set_precision(16)
    finally:
        set_precision(old)


def test_ops_off_tape_record_nothing(f64):
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        relu(Tensor([1.0]))
    assert len(tape) == 0
    out = relu(x)  # no active tape
    assert not out.requires_grad

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import numeric_grad, rel_error
from pate_pp.netcore import (
    AdamState,
    DenseNet,
    Layer,
    NonFiniteError,
    ShapeError,
    StaleTraceError,
    adam_step,
    backward,
    cross_entropy,
    fit_classifier,
    forward,
    init_dense,
    net_from_dict,
    net_to_dict,
    sgd_step,
    softmax,
    zero_grads,
)


def test_identity_layer_passes_input_through():
    net = DenseNet([Layer(np.eye(3), np.zeros(3), "identity")])
    x = np.array([[1.0, -2.0, 3.5]])
    np.testing.assert_array_equal(forward(net, x).logits, x)


def test_relu_on_negative_inputs_is_zero(rng):
    net = DenseNet([Layer(np.eye(4), np.zeros(4), "relu")])
    x = -rng.uniform(0.1, 5, size=(7, 4))
    assert np.all(forward(net, x).post[0] == 0)


def test_two_layer_forward_matches_hand_composition(rng):
    net = init_dense([5, 4, 3], ["tanh", "identity"], rng)
    x = rng.standard_normal((6, 5))
    W1, b1 = net.layers[0].W, net.layers[0].b
    W2, b2 = net.layers[1].W, net.layers[1].b
    expected = np.tanh(x @ W1.T + b1) @ W2.T + b2
    np.testing.assert_allclose(forward(net, x).logits, expected, rtol=0, atol=1e-14)


def test_forward_rejects_wrong_width(small_net):
    with pytest.raises(ShapeError):
        forward(small_net, np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        forward(small_net, np.zeros((0, 4)))


def test_layer_chaining_is_validated():
    with pytest.raises(ShapeError):
        DenseNet([Layer(np.zeros((3, 2)), np.zeros(3), "relu"), Layer(np.zeros((2, 4)), np.zeros(2), "relu")])


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_large_logits_do_not_overflow(self):
        np.testing.assert_allclose(softmax([1000.0, 1000.0, 1000.0]), [1 / 3] * 3, atol=1e-15)

    def test_values_against_direct_exponentials(self):
        e = [math.exp(v) for v in (1, 2, 3)]
        direct = [v / sum(e) for v in e]
        got = softmax([1.0, 2.0, 3.0])
        np.testing.assert_allclose(got, direct, rtol=1e-13)
        np.testing.assert_allclose(got, [0.09003, 0.24473, 0.66524], atol=5e-6)

    @given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-300, 300)))
    def test_always_a_distribution(self, z):
        p = softmax(z)
        assert np.all(p > 0) and np.all(p <= 1)
        assert abs(p.sum() - 1.0) <= 1e-12

    @given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-1e6, 1e6)))
    def test_extreme_gaps_still_sum_to_one(self, z):
        # gaps beyond ~745 underflow exp() to exactly 0
        p = softmax(z)
        assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12


class TestCrossEntropy:
    def test_one_hot_gives_zero(self):
        loss, grad = cross_entropy(np.array([0.0, 1.0, 0.0]), 1)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, [0.0, 0.0, 0.0])

    def test_uniform_gives_log_k(self):
        loss, _ = cross_entropy(np.full(10, 0.1), 7)
        assert loss == pytest.approx(math.log(10), abs=1e-12)
        assert loss == pytest.approx(2.302585, abs=1e-6)

    def test_two_class_value(self):
        loss, grad = cross_entropy(np.array([0.7, 0.3]), 1)
        assert loss == pytest.approx(-math.log(0.3), abs=1e-12)
        assert loss == pytest.approx(1.20397, abs=1e-5)
        np.testing.assert_allclose(grad, [0.7, -0.7])

    def test_zero_probability_is_clamped(self):
        loss, _ = cross_entropy(np.array([1.0, 0.0]), 1)
        assert loss == pytest.approx(-math.log(1e-12))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.array([0.5, 0.5]), 2)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self, small_net, rng):
        tr = forward(small_net, rng.standard_normal((3, 4)))
        g = backward(small_net, tr, np.zeros((3, 3)))
        assert all(np.all(a == 0) for a in g.arrays())

    def test_linear_squared_error_closed_form(self, rng):
        W = rng.standard_normal((2, 3))
        b = rng.standard_normal(2)
        net = DenseNet([Layer(W.copy(), b.copy(), "identity")])
        x = rng.standard_normal((1, 3))
        target = rng.standard_normal((1, 2))
        tr = forward(net, x)
        pred = tr.logits
        # L = 0.5 * ||pred - target||^2
        g = backward(net, tr, pred - target)
        np.testing.assert_allclose(g.W[0], (pred - target).T @ x, atol=1e-14)
        np.testing.assert_allclose(g.b[0], (pred - target)[0], atol=1e-14)

    @pytest.mark.parametrize("seed", range(20))
    def test_cross_entropy_grads_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        sizes = [int(rng.integers(2, 7)) for _ in range(4)]
        net = init_dense(sizes, ["tanh", "leaky_relu", "identity"], rng)
        assert net.n_params() <= 1000
        x = rng.standard_normal((5, sizes[0]))
        y = rng.integers(0, sizes[-1], size=5)

        def loss():
            return float(cross_entropy(softmax(forward(net, x).logits), y)[0].mean())

        tr = forward(net, x)
        _, g = cross_entropy(softmax(tr.logits), y)
        analytic = backward(net, tr, g / 5).arrays()
        assert rel_error(analytic, numeric_grad(loss, net.params())) < 1e-4

    def test_input_gradient_matches_finite_differences(self, small_net, rng):
        x = rng.standard_normal((3, 4))
        c = rng.standard_normal((3, 3))
        g = backward(small_net, forward(small_net, x), c).inputs
        num = numeric_grad(lambda: float(np.sum(c * forward(small_net, x).logits)), [x])
        assert rel_error([g], num) < 1e-6

    def test_stale_trace_rejected(self, small_net, rng):
        tr = forward(small_net, rng.standard_normal((2, 4)))
        sgd_step(small_net, zero_grads(small_net), 0.1)
        with pytest.raises(StaleTraceError):
            backward(small_net, tr, np.zeros((2, 3)))

    def test_trace_from_other_net_rejected(self, small_net, rng):
        other = small_net.copy()
        tr = forward(other, rng.standard_normal((2, 4)))
        with pytest.raises(StaleTraceError):
            backward(small_net, tr, np.zeros((2, 3)))


class TestOptimizers:
    def test_zero_grads_leave_params_unchanged(self, small_net):
        before = [p.copy() for p in small_net.params()]
        sgd_step(small_net, zero_grads(small_net), 0.1)
        adam_step(small_net, zero_grads(small_net), AdamState.for_net(small_net), 0.1)
        for a, b in zip(before, small_net.params()):
            np.testing.assert_array_equal(a, b)

    def test_sgd_rule(self):
        net = DenseNet([Layer(np.array([[1.0]]), np.array([0.0]), "identity")])
        g = zero_grads(net)
        g.W[0][0, 0] = 0.5
        sgd_step(net, g, 0.1)
        assert net.layers[0].W[0, 0] == pytest.approx(0.95, abs=1e-15)

    @pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
    def test_adam_first_step_has_size_lr(self, scale):
        # bias-corrected m/sqrt(v) = g/|g| at t=1, so the step is lr * sign(g)
        net = DenseNet([Layer(np.zeros((2, 2)), np.zeros(2), "identity")])
        g = zero_grads(net)
        g.W[0][:] = scale
        g.b[0][:] = -scale
        state = AdamState.for_net(net)
        adam_step(net, g, state, 0.01)
        expected = 0.01 * scale / (scale + 1e-8)
        np.testing.assert_allclose(net.layers[0].W, -expected, rtol=1e-12)
        np.testing.assert_allclose(net.layers[0].b, expected, rtol=1e-12)
        assert state.t == 1

    def test_adam_state_invariants(self, small_net, rng):
        state = AdamState.for_net(small_net)
        for t in range(1, 4):
            tr = forward(small_net, rng.standard_normal((2, 4)))
            adam_step(small_net, backward(small_net, tr, rng.standard_normal((2, 3))), state, 0.01)
            assert state.t == t
            assert all(np.all(v >= 0) for v in state.v)

    def test_non_finite_grads_refused(self, small_net):
        g = zero_grads(small_net)
        g.b[0][0] = np.nan
        with pytest.raises(NonFiniteError):
            sgd_step(small_net, g, 0.1)
        g.b[0][0] = np.inf
        with pytest.raises(NonFiniteError):
            adam_step(small_net, g, AdamState.for_net(small_net), 0.1)


def test_training_is_bit_deterministic():
    def train():
        rng = np.random.default_rng(5)
        x = rng.uniform(size=(60, 3))
        y = (x[:, 0] > 0.5).astype(int)
        net = init_dense([3, 8, 2], ["relu", "identity"], np.random.default_rng(9))
        return fit_classifier(net, x, y, 5, 10, np.random.default_rng(11))

    a, b = train(), train()
    for p, q in zip(a.params(), b.params()):
        assert np.array_equal(p, q)
    assert all(np.all(np.isfinite(p)) for p in a.params())


def test_serialisation_round_trip(small_net):
    back = net_from_dict(net_to_dict(small_net))
    for p, q in zip(small_net.params(), back.params()):
        assert np.array_equal(p, q)
    assert [l.activation for l in back.layers] == [l.activation for l in small_net.layers]

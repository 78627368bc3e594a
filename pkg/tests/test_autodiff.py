"""Tensor core: kernels against naive oracles, gradients against differences."""

import math

import numpy as np
import pytest

from tsarank import autodiff as ad
from tsarank.autodiff import (
    InvalidAxisError,
    NonScalarLossError,
    OptimizerState,
    ShapeMismatchError,
    Tensor,
    adam_step,
)

from conftest import central_difference, relative_error


def naive_matmul(a, b):
    """Triple-loop reference product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        out = ad.matmul(Tensor(a), Tensor(np.eye(3)))
        assert np.array_equal(out.values, a)

    def test_zero_absorbs(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 3)))
        out = ad.matmul(a, Tensor(np.zeros((3, 3))))
        assert np.all(out.values == 0.0)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        got = ad.matmul(Tensor(a), Tensor(b)).values
        want = naive_matmul(a, b)
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError) as err:
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_batched_gradients_match_differences(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)

        def loss_fn():
            return ad.tsum(ad.mul(ad.matmul(a, b), rng_weights))

        rng_weights = rng.normal(size=(2, 3, 5))
        loss = loss_fn()
        loss.backward()
        for tensor in (a, b):
            idx = tuple(0 for _ in tensor.shape)
            fd = central_difference(lambda: loss_fn().item(), tensor, idx)
            assert relative_error(tensor.grad[idx], fd) < 1e-6


class TestSoftmaxLogprobs:
    def test_uniform_logits(self):
        out = ad.softmax_logprobs(Tensor(np.zeros(7)), axis=0)
        assert np.allclose(out.values, math.log(1 / 7), atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(3, 6))
        a = ad.softmax_logprobs(Tensor(logits), axis=1).values
        b = ad.softmax_logprobs(Tensor(logits + 123.456), axis=1).values
        assert np.max(np.abs(a - b)) <= 1e-12

    def test_two_way_closed_form(self):
        # direct summation oracle: p = exp(x) / sum exp(x)
        logits = np.array([0.0, math.log(3.0)])
        out = ad.softmax_logprobs(Tensor(logits), axis=0).values
        assert abs(out[0] - math.log(1 / 4)) <= 1e-12
        assert abs(out[1] - math.log(3 / 4)) <= 1e-12

    def test_exp_sums_to_one_along_every_slice(self):
        rng = np.random.default_rng(5)
        x = rng.normal(scale=20.0, size=(4, 5, 6))
        for axis in range(3):
            out = ad.softmax_logprobs(Tensor(x), axis=axis)
            sums = np.exp(out.values).sum(axis=axis)
            assert np.max(np.abs(sums - 1.0)) <= 1e-12

    def test_invalid_axis(self):
        with pytest.raises(InvalidAxisError):
            ad.softmax_logprobs(Tensor(np.zeros((2, 2))), axis=5)


class TestBackward:
    def test_square_derivative(self):
        x = Tensor(3.0, requires_grad=True)
        loss = ad.mul(x, x)
        loss.backward()
        assert float(x.grad) == pytest.approx(6.0, abs=1e-12)

    def test_softmax_cross_entropy_identity(self):
        # d/dlogits of -log softmax(logits)[target] is (probs - onehot)
        rng = np.random.default_rng(6)
        logits = Tensor(rng.normal(size=5), requires_grad=True)
        target = 2
        logp = ad.softmax_logprobs(logits, axis=0)
        loss = ad.neg(ad.gather_last(logp, np.asarray(target)))
        loss.backward()
        probs = np.exp(logp.values)
        onehot = np.eye(5)[target]
        assert np.max(np.abs(logits.grad - (probs - onehot))) <= 1e-12

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(NonScalarLossError):
            ad.backward(ad.mul(x, 2.0))

    def test_unreachable_parameter_gets_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(4), requires_grad=True)
        loss = ad.tsum(ad.mul(x, x))
        ad.backward(loss, params=[x, unused])
        assert np.array_equal(unused.grad, np.zeros(4))

    def test_two_layer_composite_matches_differences(self):
        rng = np.random.default_rng(7)
        w1 = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
        x = rng.normal(size=(5, 4))
        targets = rng.integers(0, 3, size=5)

        def loss_fn():
            hidden = ad.tanh(ad.matmul(Tensor(x), w1))
            logits = ad.matmul(hidden, w2)
            logp = ad.softmax_logprobs(logits, axis=1)
            return ad.neg(ad.tmean(ad.gather_last(logp, targets)))

        ad.zero_grads([w1, w2])
        loss = loss_fn()
        loss.backward()
        grads = {"w1": w1.grad.copy(), "w2": w2.grad.copy()}
        checked = 0
        for tensor, grad in ((w1, grads["w1"]), (w2, grads["w2"])):
            for _ in range(10):
                idx = tuple(int(rng.integers(s)) for s in tensor.shape)
                fd = central_difference(lambda: loss_fn().item(), tensor, idx)
                assert relative_error(grad[idx], fd) <= 1e-4
                checked += 1
        assert checked == 20

    def test_repeated_backward_bit_identical(self):
        rng = np.random.default_rng(8)
        w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        x = rng.normal(size=(2, 6))

        def run():
            w.zero_grad()
            loss = ad.tsum(ad.exp(ad.mul(ad.matmul(Tensor(x), w), 0.1)))
            loss.backward()
            return w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_same_graph_double_backward_bit_identical(self):
        # one graph, two sweeps with a grad reset in between
        rng = np.random.default_rng(9)
        w = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        loss = ad.tsum(ad.tanh(ad.matmul(Tensor(rng.normal(size=(2, 5))), w)))
        loss.backward()
        first = w.grad.copy()
        for node in ad.ComputeGraph(loss).topo_order:
            node.grad = None
        loss.backward()
        assert np.array_equal(first, w.grad)

    def test_accumulation_is_additive(self):
        x = Tensor(2.0, requires_grad=True)
        ad.mul(x, x).backward()
        first = float(x.grad)
        ad.mul(x, x).backward()
        assert float(x.grad) == pytest.approx(2 * first, abs=1e-15)

    def test_finite_values_rejected_on_creation(self):
        with pytest.raises(ValueError):
            Tensor([1.0, float("nan")])
        with pytest.raises(ValueError):
            Tensor([float("inf")])

    def test_overflowing_ops_raise_instead_of_inf(self):
        with pytest.raises(ValueError):
            ad.exp(Tensor(1000.0))
        with pytest.raises(ValueError):
            ad.log(Tensor(0.0))
        with pytest.raises(ValueError):
            ad.div(Tensor(1.0), Tensor(0.0))

    def test_random_op_chains_stay_finite(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
            w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
            out = ad.softmax_logprobs(ad.tanh(ad.matmul(x, w)) * 3.0 + 0.5, axis=-1)
            loss = ad.tsum(ad.exp(out) * ad.tanh(out))
            loss.backward()
            assert np.isfinite(loss.values).all()
            assert np.isfinite(x.grad).all() and np.isfinite(w.grad).all()


class TestElementwiseGradients:
    """Every differentiable primitive against central differences."""

    @pytest.mark.parametrize(
        "name,fn,positive_only",
        [
            ("add", lambda a, b: ad.add(a, b), False),
            ("sub", lambda a, b: ad.sub(a, b), False),
            ("mul", lambda a, b: ad.mul(a, b), False),
            ("div", lambda a, b: ad.div(a, b), True),
        ],
    )
    def test_binary_ops(self, name, fn, positive_only):
        rng = np.random.default_rng(hash(name) % 2**32)
        a_vals = rng.uniform(0.5, 2.0, size=(3, 4)) if positive_only else rng.normal(size=(3, 4))
        b_vals = rng.uniform(0.5, 2.0, size=(4,)) if positive_only else rng.normal(size=(4,))
        weights = rng.normal(size=(3, 4))
        a, b = Tensor(a_vals, requires_grad=True), Tensor(b_vals, requires_grad=True)

        def loss_fn():
            return ad.tsum(ad.mul(fn(a, b), weights))

        loss = loss_fn()
        loss.backward()
        for tensor in (a, b):
            for _ in range(4):
                idx = tuple(int(rng.integers(s)) for s in tensor.shape)
                fd = central_difference(lambda: loss_fn().item(), tensor, idx, eps=1e-5)
                assert relative_error(tensor.grad[idx], fd) <= 1e-4, name

    @pytest.mark.parametrize(
        "name,fn,low,high",
        [
            ("exp", ad.exp, -1.0, 1.0),
            ("log", ad.log, 0.2, 3.0),
            ("tanh", ad.tanh, -2.0, 2.0),
            ("sqrt", ad.sqrt, 0.2, 3.0),
            ("softmax", lambda t: ad.softmax(t, axis=-1), -2.0, 2.0),
            ("log_softmax", lambda t: ad.softmax_logprobs(t, axis=-1), -2.0, 2.0),
        ],
    )
    def test_unary_ops(self, name, fn, low, high):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        x = Tensor(rng.uniform(low, high, size=(2, 5)), requires_grad=True)
        weights = rng.normal(size=(2, 5))

        def loss_fn():
            return ad.tsum(ad.mul(fn(x), weights))

        loss = loss_fn()
        loss.backward()
        hits = 0
        for _ in range(8):
            idx = tuple(int(rng.integers(s)) for s in x.shape)
            fd = central_difference(lambda: loss_fn().item(), x, idx, eps=1e-5)
            if relative_error(x.grad[idx], fd) <= 1e-4:
                hits += 1
            assert relative_error(x.grad[idx], fd) <= 1e-3, name
        assert hits >= 7

    def test_gather_and_embedding_scatter(self):
        rng = np.random.default_rng(11)
        table = Tensor(rng.normal(size=(10, 4)), requires_grad=True)
        ids = np.array([1, 1, 3])
        weights = rng.normal(size=(3, 4))
        loss = ad.tsum(ad.mul(ad.embedding(table, ids), weights))
        loss.backward()
        expected = np.zeros((10, 4))
        for row, w in zip(ids, weights):
            expected[row] += w
        assert np.max(np.abs(table.grad - expected)) <= 1e-12


class TestAdam:
    def test_zero_learning_rate_updates_moments_only(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        state = OptimizerState(learning_rate=0.0)
        adam_step({"p": p}, {"p": np.array([0.5, -0.5])}, state)
        assert np.array_equal(p.values, [1.0, 2.0])
        assert state.step == 1
        assert np.any(state.first_moment["p"] != 0.0)

    def test_zero_gradient_first_step_leaves_parameters(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        state = OptimizerState(learning_rate=0.1)
        adam_step({"p": p}, {"p": np.zeros(2)}, state)
        assert np.array_equal(p.values, [1.0, 2.0])

    def test_matches_hand_iterated_recurrence(self):
        # scalar parameter, constant gradient, two steps, default betas
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        g = 0.3
        theta, m, v = 1.0, 0.0, 0.0
        for step in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**step)
            v_hat = v / (1 - b2**step)
            theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)

        p = Tensor(np.array(1.0), requires_grad=True)
        state = OptimizerState(learning_rate=lr)
        for _ in range(2):
            adam_step({"p": p}, {"p": np.array(g)}, state)
        assert abs(float(p.values) - theta) <= 1e-12

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeMismatchError):
            adam_step({"p": p}, {"p": np.zeros(4)}, OptimizerState(learning_rate=0.1))

    def test_negative_learning_rate_rejected(self):
        with pytest.raises(ValueError):
            OptimizerState(learning_rate=-0.1)


def test_compute_graph_topological_order():
    x = Tensor(2.0, requires_grad=True)
    y = ad.mul(x, x)
    z = ad.add(y, x)
    graph = ad.ComputeGraph(z)
    order = graph.topo_order
    assert order.index(x) < order.index(y) < order.index(z)
    assert all(order.index(p) < order.index(node.output) for node in graph.nodes for p in node.inputs)


def test_no_grad_suppresses_graph():
    x = Tensor(1.0, requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()

import threading

import numpy as np
import pytest

from core.exceptions import GradientError, ShapeError
from core.ndcore import (OPS, Graph, Parameter, Tensor, backward, clip, concat, exp, forward_op,
                         grad_enabled, leaky_relu, lgamma, log, log1p, log_softmax, matmul,
                         no_grad, sigmoid, softmax, softplus, straight_through)
from tests.gradcheck import check_gradient

A = np.array([[0.3, -1.2, 0.8], [1.5, 0.1, -0.4]])
POSITIVE = np.array([[0.5, 1.7, 2.2], [3.1, 0.9, 1.3]])
WEIGHTS = np.array([[0.2, -0.7, 1.1], [0.4, 0.3, -0.9]])


class TestForward:
    def test_matmul_identity(self):
        out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.eye(2))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_leaky_relu(self):
        assert leaky_relu(Tensor(-1.0)).item() == pytest.approx(-0.01)
        assert leaky_relu(Tensor(2.0)).item() == 2.0

    def test_softmax_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros(3)).data, np.full(3, 1 / 3))

    def test_log_softmax_matches_log_of_softmax(self):
        np.testing.assert_allclose(log_softmax(A, axis=1).data, np.log(softmax(A, axis=1).data))

    def test_softplus_is_stable_for_large_inputs(self):
        out = softplus(np.array([-800.0, 0.0, 800.0])).data
        np.testing.assert_allclose(out, [0.0, np.log(2.0), 800.0])

    def test_ndarray_on_the_left_defers_to_tensor(self):
        out = np.ones((2, 3)) + Tensor(A)
        assert isinstance(out, Tensor)
        np.testing.assert_allclose(out.data, A + 1.0)

    def test_forward_op_by_name(self):
        assert set(OPS) >= {"add", "matmul", "lgamma", "straight_through", "log_softmax"}
        np.testing.assert_allclose(forward_op("exp", A).data, np.exp(A))
        with pytest.raises(ValueError):
            forward_op("erf", A)

    def test_parameter_copies_its_data(self):
        source = np.zeros(3)
        p = Parameter(source, name="p")
        source[0] = 5.0
        assert p.data[0] == 0.0
        assert p.requires_grad


class TestShapeErrors:
    def test_matmul_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as info:
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        assert info.value.op == "matmul"
        assert info.value.shapes == ((2, 3), (2, 3))

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)


class TestGradients:
    def test_square(self):
        x = Parameter(3.0, name="x")
        grads = backward(x * x)
        assert grads[x] == pytest.approx(6.0)
        assert x.grad == pytest.approx(6.0)

    def test_sum_of_product_gives_other_factor(self):
        a = Parameter(A, name="a")
        grads = backward((a * WEIGHTS).sum())
        np.testing.assert_allclose(grads[a], WEIGHTS)

    @pytest.mark.parametrize("build", [
        lambda x: (x + WEIGHTS).sum(),
        lambda x: (x - WEIGHTS[0]).sum(),
        lambda x: (x * x * WEIGHTS).sum(),
        lambda x: (WEIGHTS / (x * x + 1.0)).sum(),
        lambda x: (x @ WEIGHTS.T).sum(),
        lambda x: (WEIGHTS.T @ x).sum(),
        lambda x: (-x).exp().sum(),
        lambda x: (x ** 3.0).sum(),
        lambda x: sigmoid(x * 2.0).sum(),
        lambda x: (softplus(x) * WEIGHTS).sum(),
        lambda x: (leaky_relu(x) * WEIGHTS).sum(),
        lambda x: (softmax(x, axis=1) * WEIGHTS).sum(),
        lambda x: (log_softmax(x, axis=0) * WEIGHTS).sum(),
        lambda x: (x.sum(axis=0) * x.mean(axis=0)).sum(),
        lambda x: (concat([x, x * 2.0], axis=1) * np.hstack([WEIGHTS, WEIGHTS])).sum(),
        lambda x: (x[:, 1:] * WEIGHTS[:, :2]).sum() + x[0, 0],
        lambda x: (x.reshape(3, 2) * WEIGHTS.reshape(3, 2)).sum(),
        lambda x: (x.T @ WEIGHTS).sum(),
    ], ids=["add", "sub", "mul", "div", "matmul_left", "matmul_right", "neg_exp", "pow",
            "sigmoid", "softplus", "leaky_relu", "softmax", "log_softmax", "sum_mean", "concat",
            "getitem", "reshape", "transpose"])
    def test_matches_finite_differences(self, build):
        check_gradient(build, A)

    @pytest.mark.parametrize("build", [
        lambda x: (log(x) * WEIGHTS).sum(),
        lambda x: (log1p(x) * WEIGHTS).sum(),
        lambda x: (lgamma(x) * WEIGHTS).sum(),
    ], ids=["log", "log1p", "lgamma"])
    def test_positive_domain_ops(self, build):
        check_gradient(build, POSITIVE)

    def test_shared_node_accumulates(self):
        x = Parameter(A, name="x")
        grads = backward((x * x).sum() + x.sum())
        np.testing.assert_allclose(grads[x], 2.0 * A + 1.0)

    def test_broadcast_gradient_is_reduced(self):
        bias = Parameter(np.zeros(3), name="bias")
        grads = backward((Tensor(A) + bias).sum())
        np.testing.assert_allclose(grads[bias], [2.0, 2.0, 2.0])

    def test_clip_blocks_gradient_outside_range(self):
        x = Parameter(np.array([-2.0, 0.5, 2.0]), name="x")
        grads = backward(clip(x, -1.0, 1.0).sum())
        np.testing.assert_array_equal(grads[x], [0.0, 1.0, 0.0])

    def test_straight_through_forward_is_hard_backward_is_relaxed(self):
        logits = Parameter(np.array([-0.5, 0.0, 1.5]), name="logits")
        relaxed = sigmoid(logits)
        out = straight_through(relaxed, np.array([0.0, 1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [0.0, 1.0, 1.0])
        grads = backward(out.sum())
        s = relaxed.data
        np.testing.assert_allclose(grads[logits], s * (1.0 - s))

    def test_deep_chain_does_not_recurse(self):
        x = Parameter(1.0, name="x")
        y = x
        for _ in range(5000):
            y = y + 1.0
        assert backward(y)[x] == pytest.approx(1.0)

    def test_graph_orders_parents_first(self):
        x = Parameter(2.0, name="x")
        y = exp(x)
        z = y * x
        nodes = Graph.from_output(z).nodes
        assert nodes.index(x) < nodes.index(y) < nodes.index(z)
        assert Graph.from_output(z).leaves == [x]


class TestBackwardErrors:
    def test_non_scalar_loss(self):
        with pytest.raises(GradientError):
            backward(Parameter(np.ones(3), name="x") * 2.0)

    def test_non_finite_loss(self):
        x = Parameter(-1.0, name="x")
        with pytest.raises(GradientError):
            with np.errstate(invalid="ignore"):
                backward(log(x))


class TestNoGrad:
    def test_records_nothing(self):
        x = Parameter(A, name="x")
        with no_grad():
            assert not grad_enabled()
            y = (x * 2.0).sum()
        assert grad_enabled()
        assert not y.requires_grad
        assert y.creator is None
        assert backward(y) == {}

    def test_switch_is_per_thread(self):
        inside, release = threading.Event(), threading.Event()

        def hold_no_grad():
            with no_grad():
                inside.set()
                release.wait(5.0)

        worker = threading.Thread(target=hold_no_grad)
        worker.start()
        try:
            assert inside.wait(5.0)
            assert grad_enabled()
            assert (Parameter(A, name="x") * 2.0).requires_grad
        finally:
            release.set()
            worker.join()
        assert grad_enabled()

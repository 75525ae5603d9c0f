"""
Tests for tensor.py: storage, kernels, the tape and its backward pass.
"""

import numpy as np
import pytest

from vpt_dml import tensor as T
from vpt_dml.tensor import AxisError, Graph, NonFiniteError, ShapeError, Tensor


class TestTensor:
    """Construction and storage precision."""

    def test_default_storage_is_float32(self):
        assert Tensor([1.0, 2.0]).data.dtype == np.float32

    def test_precision_switch(self):
        with T.precision("float64"):
            assert Tensor([1.0]).data.dtype == np.float64
            assert T.storage_dtype() is np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_unknown_precision(self):
        with pytest.raises(ValueError):
            with T.precision("float16"):
                pass

    def test_rank_limit(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_accumulate_grad_shape_check(self):
        x = Tensor(np.zeros((2, 3)), requires_grad=True)
        with pytest.raises(ShapeError):
            x.accumulate_grad(np.zeros((3, 2)))

    def test_kernels_store_float32_results(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((3, 4)))
        assert T.matmul(a, b).data.dtype == np.float32


class TestShapeErrors:
    """Every mismatch names the kernel and both shapes."""

    def test_matmul(self):
        with pytest.raises(ShapeError) as exc_info:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        message = str(exc_info.value)
        assert "matmul" in message
        assert "(2, 3)" in message and "(4, 5)" in message

    def test_add_only_broadcasts_bias(self):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
        with pytest.raises(ShapeError) as exc_info:
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 3))))
        assert "add" in str(exc_info.value)

    def test_mul_needs_equal_shapes(self):
        with pytest.raises(ShapeError):
            T.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))

    def test_bad_axis(self):
        with pytest.raises(AxisError):
            T.softmax(Tensor(np.zeros((2, 3))), axis=2)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)

    def test_reshape_size(self):
        with pytest.raises(ShapeError):
            T.reshape(Tensor(np.zeros((2, 3))), (4, 2))


class TestGraph:
    """Recording and reverse traversal."""

    def test_nothing_recorded_outside_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        T.relu(x)
        assert Graph.current() is None

    def test_only_grad_paths_recorded(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        c = Tensor(np.ones((2, 2)))
        with Graph() as graph:
            T.add(c, c)
            T.mul(x, c)
        assert [node.op for node in graph.nodes] == ["mul"]

    def test_square_gradient(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        with Graph() as graph:
            loss = T.reduce_sum(T.mul(x, x))
        graph.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_fan_out_accumulates(self):
        x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        w = Tensor(np.array([[3.0], [4.0]]))
        with Graph() as graph:
            y = T.matmul(x, w)
            loss = T.reduce_sum(T.add(y, y))
        graph.backward(loss)
        np.testing.assert_allclose(x.grad, [[6.0, 8.0]])

    def test_stop_gradient(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Graph() as graph:
            loss = T.reduce_sum(T.mul(T.stop_gradient(x), x))
        graph.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0])

    def test_frozen_input_gets_no_grad(self):
        x = Tensor(np.ones((1, 2)), requires_grad=True)
        w = Tensor(np.ones((2, 2)))
        with Graph() as graph:
            loss = T.reduce_sum(T.matmul(x, w))
        graph.backward(loss)
        assert w.grad is None
        assert x.grad is not None

    def test_bias_gradient_sums_rows(self):
        x = Tensor(np.zeros((3, 2)))
        b = Tensor(np.zeros(2), requires_grad=True)
        with Graph() as graph:
            loss = T.reduce_sum(T.add(x, b))
        graph.backward(loss)
        np.testing.assert_allclose(b.grad, [3.0, 3.0])


class TestKernels:
    """Forward values of the numerically delicate kernels."""

    def test_gelu_tanh_approximation(self):
        x = np.array([-1.0, 0.0, 1.0, 2.0])
        expected = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, expected, rtol=1e-6)

    def test_softmax_rows_sum_to_one(self):
        y = T.softmax(Tensor(np.array([[1000.0, 1001.0, 1002.0], [0.0, 0.0, 0.0]])))
        np.testing.assert_allclose(y.data.sum(axis=-1), [1.0, 1.0], rtol=1e-6)
        assert np.all(np.isfinite(y.data))

    def test_log_softmax_matches_softmax(self):
        x = Tensor(np.array([[0.5, -1.0, 2.0]]))
        np.testing.assert_allclose(np.exp(T.log_softmax(x).data), T.softmax(x).data, rtol=1e-5)

    def test_layer_norm_statistics(self):
        x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, (4, 16)))
        y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)

    def test_l2_normalize_unit_rows(self):
        x = Tensor(np.random.default_rng(1).normal(size=(5, 7)))
        norms = np.linalg.norm(T.l2_normalize(x).data, axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_l2_normalize_zero_row_stays_finite(self):
        y = T.l2_normalize(Tensor(np.zeros((1, 3))))
        np.testing.assert_array_equal(y.data, 0.0)

    def test_log1p_exp_sum(self):
        x = np.array([[0.0, 1.0], [2.0, -1.0]])
        mask = np.array([[True, False], [True, False]])
        y = T.log1p_exp_sum(Tensor(x), axis=0, mask=mask).data
        np.testing.assert_allclose(y[0], np.log(1 + np.exp(0.0) + np.exp(2.0)), rtol=1e-6)
        assert y[1] == 0.0

    def test_log1p_exp_sum_large_values(self):
        y = T.log1p_exp_sum(Tensor(np.array([[500.0], [500.0]])), axis=0).data
        np.testing.assert_allclose(y, [500.0 + np.log(2.0)], rtol=1e-6)

    def test_structural_kernels(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4))
        np.testing.assert_array_equal(T.slice_axis(x, 1, 1, 3).data, x.data[:, 1:3])
        np.testing.assert_array_equal(T.take(x, [2, 0], axis=1).data, x.data[:, [2, 0]])
        np.testing.assert_array_equal(T.transpose(x, (2, 0, 1)).data,
                                      x.data.transpose(2, 0, 1))
        assert T.expand(x, 3).shape == (3, 2, 3, 4)

    def test_take_repeated_indices_accumulate(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        with Graph() as graph:
            loss = T.reduce_sum(T.take(x, [1, 1, 2], axis=0))
        graph.backward(loss)
        np.testing.assert_allclose(x.grad, [[0, 0], [2, 2], [1, 1]])

    def test_mean_over_axis(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_allclose(T.mean(x, axis=1).data, [1.0, 4.0])


class TestDebugChecks:
    """NaN/Inf detection when debug checks are on."""

    def test_overflow_detected(self):
        T.set_debug(True)
        try:
            with pytest.raises(NonFiniteError):
                T.scale(Tensor(np.array([1e30])), 1e30)
        finally:
            T.set_debug(False)

    def test_off_by_default(self):
        y = T.scale(Tensor(np.array([1e30])), 1e30)
        assert np.isinf(y.data[0])

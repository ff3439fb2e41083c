import numpy as np
import pytest

from pis import autodiff as ad
from pis.autodiff import (
    Adam,
    NonFiniteError,
    NotPositiveDefiniteError,
    ShapeError,
    Tensor,
    backward,
    load_arrays,
    parameter,
    save_arrays,
)
from _gradcheck import finite_difference_check


def rand(rng, *shape):
    return parameter(rng.normal(size=shape))


class TestForwardSemantics:
    def test_softmax_uniform_logits(self):
        y = ad.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.value, 0.25)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        y = ad.softmax(Tensor(rng.normal(size=(50, 7)) * 30), axis=1)
        np.testing.assert_allclose(y.value.sum(axis=1), 1.0, atol=1e-12)

    def test_sigmoid_zero(self):
        assert ad.sigmoid(Tensor(0.0)).value == pytest.approx(0.5)

    def test_matrix_inverse_scalar_matrix(self):
        inv = ad.matrix_inverse(Tensor(2.0 * np.eye(3)))
        np.testing.assert_allclose(inv.value, 0.5 * np.eye(3), atol=1e-12)

    def test_matrix_inverse_rejects_asymmetric(self):
        with pytest.raises(ShapeError, match="symmetric"):
            ad.matrix_inverse(Tensor([[1.0, 0.5], [0.0, 1.0]]))

    def test_matrix_inverse_rejects_indefinite_with_eigenvalue(self):
        with pytest.raises(NotPositiveDefiniteError, match="-1"):
            ad.matrix_inverse(Tensor(np.diag([1.0, -1.0])))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_segment_sum_gather_identity_on_constant_segments(self):
        seg = np.array([0, 0, 1, 2, 2, 2])
        x = Tensor(np.array([[3.0], [3.0], [5.0], [2.0], [2.0], [2.0]]))
        summed = ad.segment_sum(x, seg, 3)
        counts = np.bincount(seg).astype(np.float64)
        recovered = ad.gather_rows(summed, seg).value / counts[seg][:, None]
        np.testing.assert_allclose(recovered, x.value, atol=1e-12)


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        x = rand(np.random.default_rng(1), 3, 4)
        backward(ad.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_trace_of_inverse_at_identity(self):
        a = parameter(np.eye(2))
        backward(ad.trace(ad.matrix_inverse(a)))
        np.testing.assert_allclose(a.grad, -np.eye(2), atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = rand(np.random.default_rng(2), 3)
        with pytest.raises(ShapeError, match="scalar"):
            backward(x)

    def test_unreached_leaf_gets_no_gradient(self):
        rng = np.random.default_rng(3)
        x, y = rand(rng, 2), rand(rng, 2)
        backward(ad.tensor_sum(x * 2.0))
        assert y.grad is None
        np.testing.assert_allclose(x.grad, 2.0)


class TestFiniteDifferences:
    """Every registered operation against central differences."""

    def test_add_sub_broadcast(self):
        rng = np.random.default_rng(10)
        a, b, row, s = rand(rng, 4, 5), rand(rng, 4, 5), rand(rng, 1, 5), rand(rng)
        w = rng.normal(size=(4, 5))
        finite_difference_check(
            lambda: ad.tensor_sum((a + row - b + s) * w), [a, b, row, s])

    def test_mul_div_broadcast(self):
        rng = np.random.default_rng(11)
        a, col = rand(rng, 4, 3), parameter(rng.uniform(1.0, 2.0, size=(4, 1)))
        w = rng.normal(size=(4, 3))
        finite_difference_check(lambda: ad.tensor_sum((a * col / (col + 3.0)) * w), [a, col])

    def test_matmul(self):
        rng = np.random.default_rng(12)
        a, b = rand(rng, 4, 6), rand(rng, 6, 3)
        w = rng.normal(size=(4, 3))
        finite_difference_check(lambda: ad.tensor_sum(ad.matmul(a, b) * w), [a, b])

    def test_relu(self):
        rng = np.random.default_rng(13)
        a = parameter(rng.normal(size=(5, 5)) + 0.05)
        w = rng.normal(size=(5, 5))
        finite_difference_check(lambda: ad.tensor_sum(ad.relu(a) * w), [a])

    def test_tanh_sigmoid_exp_log_sqrt(self):
        rng = np.random.default_rng(14)
        a = rand(rng, 3, 3)
        pos = parameter(rng.uniform(0.5, 2.0, size=(3, 3)))
        w = rng.normal(size=(3, 3))
        finite_difference_check(lambda: ad.tensor_sum(ad.tanh(a) * w), [a])
        finite_difference_check(lambda: ad.tensor_sum(ad.sigmoid(a) * w), [a])
        finite_difference_check(lambda: ad.tensor_sum(ad.exp(a) * w), [a])
        finite_difference_check(lambda: ad.tensor_sum(ad.log(pos) * w), [pos])
        finite_difference_check(lambda: ad.tensor_sum(ad.sqrt(pos) * w), [pos])

    def test_softmax_jacobian(self):
        rng = np.random.default_rng(15)
        a = rand(rng, 4, 5)
        w = rng.normal(size=(4, 5))
        finite_difference_check(lambda: ad.tensor_sum(ad.softmax(a, axis=1) * w), [a])

    def test_concat(self):
        rng = np.random.default_rng(16)
        a, b = rand(rng, 2, 3), rand(rng, 2, 4)
        w = rng.normal(size=(2, 7))
        finite_difference_check(lambda: ad.tensor_sum(ad.concat([a, b], axis=1) * w), [a, b])

    def test_sum_mean_axes(self):
        rng = np.random.default_rng(17)
        a = rand(rng, 3, 4, 2)
        w = rng.normal(size=(3, 2))
        finite_difference_check(lambda: ad.tensor_sum(ad.tensor_mean(a, axis=1) * w), [a])
        w2 = rng.normal(size=(4, 2))
        finite_difference_check(lambda: ad.tensor_sum(ad.tensor_sum(a, axis=0) * w2), [a])

    def test_transpose_reshape(self):
        rng = np.random.default_rng(18)
        a = rand(rng, 3, 4)
        w = rng.normal(size=(4, 3))
        finite_difference_check(lambda: ad.tensor_sum(ad.transpose(a) * w), [a])
        w2 = rng.normal(size=(2, 6))
        finite_difference_check(lambda: ad.tensor_sum(ad.reshape(a, (2, 6)) * w2), [a])

    def test_gather_segment(self):
        rng = np.random.default_rng(19)
        a = rand(rng, 5, 3)
        idx = np.array([0, 3, 3, 1, 4, 2, 0])
        w = rng.normal(size=(7, 3))
        finite_difference_check(lambda: ad.tensor_sum(ad.gather_rows(a, idx) * w), [a])
        seg = np.array([0, 0, 1, 1, 2])
        w2 = rng.normal(size=(3, 3))
        finite_difference_check(lambda: ad.tensor_sum(ad.segment_sum(a, seg, 3) * w2), [a])

    def test_matrix_inverse_and_trace(self):
        rng = np.random.default_rng(20)
        base = rng.normal(size=(4, 4))
        a = parameter(base @ base.T + 4.0 * np.eye(4))

        def fn():
            sym = (a + ad.transpose(a)) * 0.5
            return ad.trace(ad.matrix_inverse(sym))

        finite_difference_check(fn, [a])

    def test_random_op_composition(self):
        rng = np.random.default_rng(21)
        x = rand(rng, 6, 4)
        w1 = rand(rng, 4, 8)
        w2 = rand(rng, 8, 3)

        def fn():
            h = ad.tanh(ad.matmul(x, w1))
            y = ad.softmax(ad.matmul(h, w2), axis=1)
            c = ad.matmul(ad.transpose(y), y) * (1.0 / 6.0)
            reg = c + Tensor(np.eye(3) * 1e-3)
            return ad.trace(ad.matrix_inverse(reg)) + ad.tensor_sum(ad.sigmoid(y))

        finite_difference_check(fn, [x, w1, w2])


class TestAdam:
    def test_zero_gradients_keep_parameters(self):
        p = parameter(np.array([1.0, 2.0]))
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.value, [1.0, 2.0])
        assert opt.step_count == 1

    def test_descent_direction(self):
        p = parameter(np.array([0.0]))
        opt = Adam([p], lr=0.01)
        for _ in range(10):
            p.grad = np.array([2.5])
            opt.step()
        assert p.value[0] < 0

    def test_quadratic_convergence(self):
        p = parameter(np.array([0.0]))
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            p.grad = 2.0 * (p.value - 3.0)
            opt.step()
        assert abs(p.value[0] - 3.0) < 1e-3

    def test_nonfinite_gradient_aborts(self):
        p = parameter(np.array([1.0]))
        opt = Adam([p], lr=0.1)
        p.grad = np.array([np.nan])
        with pytest.raises(NonFiniteError):
            opt.step()
        assert p.value[0] == 1.0
        assert opt.step_count == 0

    def test_bitwise_determinism(self):
        def run():
            rng = np.random.default_rng(77)
            p = parameter(rng.normal(size=(4, 4)))
            opt = Adam([p], lr=3e-3)
            for _ in range(25):
                loss = ad.tensor_sum(ad.tanh(p) * rng.normal(size=(4, 4)))
                ad.zero_gradients([p])
                backward(loss)
                opt.step()
            return p.value.tobytes()

        assert run() == run()


class TestCheckpointFormat:
    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(5)
        arrays = {
            "encoder.embed": rng.normal(size=(20, 8)),
            "gate.bias": rng.normal(size=(1,)),
            "scalar": np.array(3.14159),
        }
        data = save_arrays(arrays)
        back = load_arrays(data)
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].tobytes() == np.asarray(arrays[k], dtype=np.float64).tobytes()
            assert back[k].shape == np.asarray(arrays[k]).shape
        assert save_arrays(back) == data

    def test_utf8_names(self):
        arrays = {"weights/χ-head": np.ones((2, 2))}
        assert list(load_arrays(save_arrays(arrays))) == ["weights/χ-head"]

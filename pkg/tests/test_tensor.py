import numpy as np
import pytest
from scipy import stats

from rin import tensor as T
from rin.errors import ContractError, ShapeError
from rin.tensor import Tensor, backward


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_matches_triple_loop(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        expected = np.zeros((3, 5))
        for i in range(3):
            for j in range(5):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-13)

    def test_batched_broadcast(self, rng):
        a = rng.standard_normal((2, 1, 3, 4))
        b = rng.standard_normal((5, 4, 2))
        assert T.matmul(Tensor(a), Tensor(b)).shape == (2, 5, 3, 2)

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError, match="incompatible"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_gradients(self, rng):
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
        grads = backward(T.sum_(T.matmul(a, b)))
        np.testing.assert_allclose(grads[a], np.ones((3, 2)) @ b.data.T)
        np.testing.assert_allclose(grads[b], a.data.T @ np.ones((3, 2)))


class TestBackward:
    def test_fan_out_accumulates(self):
        x = leaf([2.0])
        y = T.add(T.mul(x, x), T.mul(x, Tensor([3.0])))   # x^2 + 3x
        assert backward(T.sum_(y))[x][0] == pytest.approx(7.0)

    def test_broadcast_gradient_sums(self, rng):
        a = leaf(rng.standard_normal((3, 4)))
        b = leaf(rng.standard_normal(4))
        grads = backward(T.sum_(T.add(a, b)))
        np.testing.assert_array_equal(grads[b], np.full(4, 3.0))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError, match="scalar"):
            backward(leaf(np.ones(3)))

    def test_stop_gradient_blocks(self):
        x = leaf([3.0])
        y = T.mul(T.stop_gradient(x), x)
        assert backward(T.sum_(y))[x][0] == pytest.approx(3.0)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = T.mul(x, x)
        assert y.node is None and not y.requires_grad
        assert T.is_grad_enabled()

    def test_repeatable_bitwise(self, rng):
        data = rng.standard_normal((5, 6))

        def run():
            x = leaf(data)
            h = T.gelu(T.matmul(x, Tensor(data.T)))
            return backward(T.mean(T.softmax(h, axis=-1) * h))[x]

        np.testing.assert_array_equal(run(), run())


class TestShapeOps:
    def test_space_to_depth_round_trip(self, rng):
        x = rng.standard_normal((2, 4, 6, 8, 3))
        y = T.space_to_depth(Tensor(x), (2, 3, 4))
        assert y.shape == (2, 2, 2, 2, 72)
        np.testing.assert_array_equal(T.depth_to_space(y, (2, 3, 4)).data, x)

    def test_patch_projection_equals_strided_convolution(self, rng):
        x = rng.standard_normal((1, 4, 4, 2))
        w = rng.standard_normal((2, 2, 2, 5))          # kernel [kh, kw, cin, cout]
        patches = T.space_to_depth(Tensor(x), (2, 2))
        out = T.matmul(patches, Tensor(w.reshape(8, 5))).data
        conv = np.zeros((1, 2, 2, 5))
        for i in range(2):
            for j in range(2):
                window = x[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2, :]
                conv[0, i, j] = np.einsum("abc,abco->o", window, w)
        np.testing.assert_allclose(out, conv, atol=1e-13)

    def test_indivisible_block(self):
        with pytest.raises(ShapeError, match="not divisible"):
            T.space_to_depth(Tensor(np.zeros((1, 5, 4, 1))), (2, 2))

    def test_reshape_mismatch(self):
        with pytest.raises(ShapeError):
            T.reshape(Tensor(np.zeros(6)), (4, 2))

    def test_scatter_rows_places_values(self):
        out = T.scatter_rows(Tensor(np.ones((2, 3))), np.array([0, 2]), 4).data
        np.testing.assert_array_equal(out.sum(axis=1), [3, 0, 3, 0])

    def test_take_rows_repeated_index_gradient(self):
        table = leaf(np.zeros((3, 2)))
        g = backward(T.sum_(T.take_rows(table, np.array([1, 1, 2]))))[table]
        np.testing.assert_array_equal(g, [[0, 0], [2, 2], [1, 1]])


class TestInit:
    def test_truncated_normal_bounds(self, rng):
        w = T.truncated_normal((200, 200), 0.02, rng, np.float64)
        assert np.abs(w).max() <= 0.04
        assert w.std() == pytest.approx(0.02 * stats.truncnorm(-2, 2).std(), rel=0.02)

    def test_float_dtypes_only(self):
        assert Tensor(np.arange(3)).dtype == np.float64
        assert Tensor(np.ones(2, np.float32)).dtype == np.float32

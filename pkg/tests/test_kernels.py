import math

import numpy as np
import pytest
from scipy import special, stats

from rin import kernels

BACKENDS = kernels.available_backends()


@pytest.fixture(params=BACKENDS)
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


class TestBackendSelection:
    def test_python_always_available(self):
        assert "python" in BACKENDS

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError, match="not available"):
            kernels.set_backend("fortran")

    def test_use_backend_restores(self):
        before = kernels.BACKEND
        with kernels.use_backend("python"):
            assert kernels.BACKEND == "python"
        assert kernels.BACKEND == before


class TestGelu:
    def test_value_at_one_is_normal_cdf(self, backend):
        # exact GELU: x * Phi(x), so gelu(1) = Phi(1)
        out = kernels.gelu_forward(np.array([1.0]))
        assert out[0] == pytest.approx(stats.norm.cdf(1.0), abs=1e-12)
        assert out[0] == pytest.approx(0.8413447460685429, abs=1e-12)

    def test_matches_erf_formula(self, backend, rng):
        x = rng.standard_normal(1000) * 3
        expected = np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x])
        np.testing.assert_allclose(kernels.gelu_forward(x), expected, rtol=0, atol=1e-13)

    def test_derivative_matches_closed_form(self, backend, rng):
        x = rng.standard_normal(200)
        dy = rng.standard_normal(200)
        expected = dy * (stats.norm.cdf(x) + x * stats.norm.pdf(x))
        np.testing.assert_allclose(kernels.gelu_backward(x, dy), expected, atol=1e-13)


class TestSoftmax:
    def test_matches_scipy(self, backend, rng):
        x = rng.standard_normal((7, 11)) * 5
        np.testing.assert_allclose(kernels.softmax_forward(x), special.softmax(x, axis=-1), atol=1e-15)

    def test_large_logits_are_stable(self, backend):
        out = kernels.softmax_forward(np.array([[1000.0, 1000.0, -1000.0]]))
        np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]])

    def test_backward_is_jacobian_product(self, backend, rng):
        x = rng.standard_normal((3, 5))
        dy = rng.standard_normal((3, 5))
        y = kernels.softmax_forward(x)
        for i in range(3):
            jac = np.diag(y[i]) - np.outer(y[i], y[i])
            np.testing.assert_allclose(kernels.softmax_backward(y, dy)[i], jac @ dy[i], atol=1e-14)


class TestLayerNorm:
    def test_forward_matches_definition(self, backend, rng):
        x = rng.standard_normal((2, 3, 8)) * 4 + 1
        scale = rng.standard_normal(8)
        bias = rng.standard_normal(8)
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + 1e-6) * scale + bias
        y, _, _ = kernels.layer_norm_forward(x, scale, bias, 1e-6)
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_zero_scale_gives_bias(self, backend, rng):
        y, _, _ = kernels.layer_norm_forward(rng.standard_normal((4, 6)), np.zeros(6), np.full(6, 0.5), 1e-6)
        assert np.all(y == 0.5)


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled backend not built")
class TestBackendParity:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_all_kernels_agree(self, dtype, rng):
        x = rng.standard_normal((33, 17)).astype(dtype)
        dy = rng.standard_normal((33, 17)).astype(dtype)
        scale = rng.standard_normal(17).astype(dtype)
        bias = rng.standard_normal(17).astype(dtype)
        tol = 1e-5 if dtype == np.float32 else 1e-12
        outs = {}
        for name in ("python", "cython"):
            with kernels.use_backend(name):
                y, xhat, rstd = kernels.layer_norm_forward(x, scale, bias, 1e-6)
                sm = kernels.softmax_forward(x)
                outs[name] = [y, *kernels.layer_norm_backward(dy, xhat, rstd, scale),
                              kernels.gelu_forward(x), kernels.gelu_backward(x, dy),
                              sm, kernels.softmax_backward(sm, dy)]
        for a, b in zip(outs["python"], outs["cython"]):
            assert a.dtype == b.dtype == dtype
            np.testing.assert_allclose(a, b, rtol=tol, atol=tol)

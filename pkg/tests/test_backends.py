import numpy as np
import pytest

from voxseed import backend, kernels_ref

compiled_only = pytest.mark.skipif(
    backend.backend_name() != "compiled",
    reason="compiled extension not available; nothing to cross-check")


def random_batch(rng, dtype, even=True):
    B = int(rng.integers(1, 4))
    C = int(rng.integers(1, 6))
    dims = [int(rng.integers(1, 6)) * 2 if even else int(rng.integers(2, 11))
            for _ in range(3)]
    return rng.standard_normal((B, C, *dims)).astype(dtype)


@compiled_only
class TestCompiledMatchesReference:
    @pytest.mark.parametrize("dtype,rtol,atol", [
        (np.float32, 2e-5, 1e-5), (np.float64, 1e-12, 1e-12)])
    def test_conv_forward_random_shapes(self, dtype, rtol, atol):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = random_batch(rng, dtype, even=False)
            co = int(rng.integers(1, 7))
            w = rng.standard_normal((co, x.shape[1], 3, 3, 3)).astype(dtype)
            b = rng.standard_normal(co).astype(dtype)
            np.testing.assert_allclose(backend.conv3x3_forward(x, w, b),
                                       kernels_ref.conv3x3_forward(x, w, b),
                                       rtol=rtol, atol=atol)

    @pytest.mark.parametrize("dtype,rtol,atol", [
        (np.float32, 1e-4, 1e-5), (np.float64, 1e-11, 1e-12)])
    def test_conv_weight_grad_random_shapes(self, dtype, rtol, atol):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = random_batch(rng, dtype, even=False)
            co = int(rng.integers(1, 7))
            dy = rng.standard_normal((x.shape[0], co, *x.shape[2:])).astype(dtype)
            dw_a, db_a = backend.conv3x3_weight_grad(x, dy)
            dw_b, db_b = kernels_ref.conv3x3_weight_grad(x, dy)
            np.testing.assert_allclose(dw_a, dw_b, rtol=rtol, atol=atol)
            np.testing.assert_allclose(db_a, db_b, rtol=rtol, atol=atol)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_pool_bitwise(self, dtype):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = random_batch(rng, dtype)
            y_a, idx_a = backend.maxpool2(x)
            y_b, idx_b = kernels_ref.maxpool2(x)
            np.testing.assert_array_equal(y_a, y_b)
            np.testing.assert_array_equal(idx_a, idx_b)
            dy = rng.standard_normal(y_a.shape).astype(dtype)
            np.testing.assert_array_equal(
                backend.maxpool2_backward(dy, idx_a, x.shape),
                kernels_ref.maxpool2_backward(dy, idx_b, x.shape))

    @pytest.mark.parametrize("dtype,atol", [(np.float32, 1e-5), (np.float64, 1e-13)])
    def test_upsample_roundtrip(self, dtype, atol):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = random_batch(rng, dtype)
            y_a = backend.upsample2(x)
            np.testing.assert_array_equal(y_a, kernels_ref.upsample2(x))
            dy = rng.standard_normal(y_a.shape).astype(dtype)
            np.testing.assert_allclose(backend.upsample2_backward(dy),
                                       kernels_ref.upsample2_backward(dy),
                                       rtol=1e-6, atol=atol)

    def test_results_independent_of_thread_count(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 4, 8, 8, 8)).astype(np.float32)
        w = rng.standard_normal((6, 4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(6).astype(np.float32)
        dy = rng.standard_normal((2, 6, 8, 8, 8)).astype(np.float32)
        try:
            backend.set_threads(1)
            y1 = backend.conv3x3_forward(x, w, b)
            dw1, db1 = backend.conv3x3_weight_grad(x, dy)
            backend.set_threads(4)
            y4 = backend.conv3x3_forward(x, w, b)
            dw4, db4 = backend.conv3x3_weight_grad(x, dy)
        finally:
            backend.set_threads(1)
        np.testing.assert_array_equal(y1, y4)
        np.testing.assert_array_equal(dw1, dw4)
        np.testing.assert_array_equal(db1, db4)


class TestSharedGuards:
    def test_rank_and_dtype_rejected(self):
        w = np.zeros((1, 1, 3, 3, 3), np.float32)
        b = np.zeros(1, np.float32)
        with pytest.raises(ValueError, match="B,C,H,W,D"):
            backend.conv3x3_forward(np.zeros((1, 4, 4, 4), np.float32), w, b)
        with pytest.raises(ValueError, match="float32 or float64"):
            backend.conv3x3_forward(np.zeros((1, 1, 4, 4, 4), np.int32), w, b)

    def test_conv1x1_against_einsum(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 5, 4, 4, 4))
        w = rng.standard_normal((3, 5))
        b = rng.standard_normal(3)
        y = backend.conv1x1_forward(x, w, b)
        expect = np.einsum("bchwd,oc->bohwd", x, w) + b[None, :, None, None, None]
        np.testing.assert_allclose(y, expect, rtol=1e-12)
        dy = rng.standard_normal(y.shape)
        dw, db = backend.conv1x1_weight_grad(x, dy)
        np.testing.assert_allclose(dw, np.einsum("bohwd,bchwd->oc", dy, x), rtol=1e-12)
        np.testing.assert_allclose(db, dy.sum(axis=(0, 2, 3, 4)), rtol=1e-12)
        dx = backend.conv1x1_input_grad(dy, w)
        np.testing.assert_allclose(dx, np.einsum("bohwd,oc->bchwd", dy, w), rtol=1e-12)

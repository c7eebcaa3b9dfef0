import numpy as np
import pytest

from sarseg.ops import (conv2d, conv2d_backward, conv2d_transposed,
                        conv2d_transposed_backward, out_dim, plane_norm,
                        plane_norm_backward, relu, relu_backward)


def naive_conv2d(x, w, bias, stride, dilation, padding):
    """Direct six-loop evaluation of the cross-correlation definition."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = out_dim(h, kh, stride, dilation, padding)
    ow = out_dim(wd, kw, stride, dilation, padding)
    y = np.zeros((n, o, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if bias is None else float(bias[oi])
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                yy = i * stride - padding + u * dilation
                                xx = j * stride - padding + v * dilation
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += w[oi, ci, u, v] * x[ni, ci, yy, xx]
                    y[ni, oi, i, j] = acc
    return y


def naive_tconv(x, w, bias, stride, padding):
    """Direct scatter evaluation of the transposed convolution."""
    n, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wd - 1) * stride - 2 * padding + kw
    y = np.zeros((n, co, oh, ow), dtype=np.float64)
    for ni in range(n):
        for c_in in range(ci):
            for i in range(h):
                for j in range(wd):
                    for c_out in range(co):
                        for u in range(kh):
                            for v in range(kw):
                                yy = i * stride + u - padding
                                xx = j * stride + v - padding
                                if 0 <= yy < oh and 0 <= xx < ow:
                                    y[ni, c_out, yy, xx] += x[ni, c_in, i, j] * w[c_in, c_out, u, v]
    if bias is not None:
        y += bias.reshape(1, co, 1, 1)
    return y


def numeric_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at x (float64)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f()
        x[idx] = orig - eps
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


CONV_CASES = [
    (3, 1, 1, 1),   # same-size 3x3
    (3, 2, 1, 1),   # strided downsample
    (3, 1, 2, 2),   # dilated, same size
    (2, 2, 1, 0),   # even kernel
    (1, 1, 1, 0),   # pointwise
    (3, 2, 1, 0),   # stride with floor loss at the border
]

TCONV_CASES = [
    (2, 2, 0),
    (3, 1, 1),
    (3, 2, 1),
    (4, 2, 1),
]


class TestConv2d:
    @pytest.mark.parametrize("k,s,d,p", CONV_CASES)
    def test_matches_naive(self, rng, k, s, d, p):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((2, 3, k, k))
        b = rng.standard_normal(2)
        got = conv2d(x, w, b, stride=s, dilation=d, padding=p)
        want = naive_conv2d(x, w, b, s, d, p)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        np.testing.assert_array_equal(conv2d(x, w), x)

    def test_zero_kernel_gives_bias(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = np.zeros((3, 2, 3, 3))
        b = np.array([1.0, -2.0, 0.5])
        y = conv2d(x, w, b, padding=1)
        for o in range(3):
            assert np.all(y[0, o] == b[o])

    def test_linear_in_input(self, rng):
        x1 = rng.standard_normal((1, 2, 6, 6))
        x2 = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        lhs = conv2d(2.0 * x1 + 3.0 * x2, w, stride=1, padding=1)
        rhs = 2.0 * conv2d(x1, w, padding=1) + 3.0 * conv2d(x2, w, padding=1)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_translation_covariance(self, rng):
        x = rng.standard_normal((1, 2, 9, 9))
        w = rng.standard_normal((2, 2, 3, 3))
        shifted = np.roll(x, shift=(2, 1), axis=(2, 3))
        y = conv2d(x, w, padding=1)
        ys = conv2d(shifted, w, padding=1)
        # compare away from the wrapped border
        np.testing.assert_allclose(ys[:, :, 3:8, 2:8], np.roll(y, (2, 1), (2, 3))[:, :, 3:8, 2:8],
                                   atol=1e-12)

    def test_dtype_preserved(self, rng):
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        w = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
        assert conv2d(x, w, padding=1).dtype == np.float32

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_not_4d(self):
        with pytest.raises(ValueError):
            conv2d(np.zeros((2, 4, 4)), np.zeros((1, 2, 3, 3)))

    def test_too_small_input(self):
        with pytest.raises(ValueError):
            conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)))


class TestOutDim:
    @pytest.mark.parametrize("size,k,s,d,p,want", [
        (8, 3, 1, 1, 1, 8),
        (8, 3, 2, 1, 1, 4),
        (7, 3, 2, 1, 1, 4),
        (8, 3, 1, 2, 2, 8),
        (8, 2, 2, 1, 0, 4),
        (9, 3, 2, 1, 0, 4),
    ])
    def test_cases(self, size, k, s, d, p, want):
        assert out_dim(size, k, s, d, p) == want


class TestConv2dBackward:
    @pytest.mark.parametrize("k,s,d,p", CONV_CASES)
    def test_numeric_gradients(self, rng, k, s, d, p):
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((2, 2, k, k))
        b = rng.standard_normal(2)
        y = conv2d(x, w, b, stride=s, dilation=d, padding=p)
        g = rng.standard_normal(y.shape)

        def objective():
            return float((conv2d(x, w, b, stride=s, dilation=d, padding=p) * g).sum())

        dx, dw, db = conv2d_backward(x, w, g, stride=s, dilation=d, padding=p)
        np.testing.assert_allclose(dx, numeric_grad(objective, x), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(dw, numeric_grad(objective, w), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(db, numeric_grad(objective, b), rtol=1e-6, atol=1e-8)

    def test_upstream_shape_check(self, rng):
        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        with pytest.raises(ValueError):
            conv2d_backward(x, w, np.zeros((1, 2, 6, 6)), padding=1)


class TestConvTransposed:
    @pytest.mark.parametrize("k,s,p", TCONV_CASES)
    def test_matches_naive(self, rng, k, s, p):
        x = rng.standard_normal((2, 3, 5, 4))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(2)
        got = conv2d_transposed(x, w, b, stride=s, padding=p)
        want = naive_tconv(x, w, b, s, p)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_output_dims(self, rng):
        x = rng.standard_normal((1, 2, 5, 7))
        w = rng.standard_normal((2, 4, 2, 2))
        assert conv2d_transposed(x, w, stride=2).shape == (1, 4, 10, 14)

    def test_adjoint_of_conv(self, rng):
        """<conv(x), y> == <x, deconv(y)> when both share (k, s, p) and dims
        line up exactly (no stride floor loss)."""
        for k, s, p in [(3, 1, 1), (2, 2, 0), (4, 2, 1)]:
            oh = 5
            h = (oh - 1) * s - 2 * p + k
            x = rng.standard_normal((1, 3, h, h))
            w = rng.standard_normal((2, 3, k, k))
            y = rng.standard_normal((1, 2, oh, oh))
            fwd = conv2d(x, w, stride=s, padding=p)
            assert fwd.shape == y.shape
            # conv2d_transposed reads the same array as (in=2, out=3, kh, kw)
            back = conv2d_transposed(y, w, stride=s, padding=p)
            np.testing.assert_allclose((fwd * y).sum(), (x * back).sum(), rtol=1e-10)

    @pytest.mark.parametrize("k,s,p", TCONV_CASES)
    def test_numeric_gradients(self, rng, k, s, p):
        x = rng.standard_normal((2, 2, 4, 4))
        w = rng.standard_normal((2, 2, k, k))
        b = rng.standard_normal(2)
        y = conv2d_transposed(x, w, b, stride=s, padding=p)
        g = rng.standard_normal(y.shape)

        def objective():
            return float((conv2d_transposed(x, w, b, stride=s, padding=p) * g).sum())

        dx, dw, db = conv2d_transposed_backward(x, w, g, stride=s, padding=p)
        np.testing.assert_allclose(dx, numeric_grad(objective, x), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(dw, numeric_grad(objective, w), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(db, numeric_grad(objective, b), rtol=1e-6, atol=1e-8)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv2d_transposed(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 2, 2)))


class TestRelu:
    def test_values(self):
        x = np.array([-2.0, -0.0, 0.0, 0.5, 3.0])
        np.testing.assert_array_equal(relu(x), [0, 0, 0, 0.5, 3.0])

    def test_backward_strict_at_zero(self):
        pre = np.array([-1.0, 0.0, 2.0])
        g = np.ones(3)
        np.testing.assert_array_equal(relu_backward(pre, g), [0.0, 0.0, 1.0])

    def test_backward_numeric(self, rng):
        # away from the kink the subgradient matches finite differences
        pre = rng.standard_normal((2, 3, 4, 4))
        pre[np.abs(pre) < 1e-3] = 0.5
        g = rng.standard_normal(pre.shape)

        def objective():
            return float((relu(pre) * g).sum())

        np.testing.assert_allclose(relu_backward(pre, g), numeric_grad(objective, pre),
                                   rtol=1e-6, atol=1e-9)


class TestPlaneNorm:
    def test_statistics(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)) * 5 + 2
        y = plane_norm(x)
        np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, atol=1e-4)

    def test_constant_plane_maps_to_zero(self):
        x = np.full((1, 1, 4, 4), 7.0)
        np.testing.assert_allclose(plane_norm(x), 0.0, atol=1e-12)

    def test_shift_invariant_scale_equivariant(self, rng):
        x = rng.standard_normal((1, 2, 6, 6))
        np.testing.assert_allclose(plane_norm(x + 3.0), plane_norm(x), atol=1e-10)
        np.testing.assert_allclose(plane_norm(x * 4.0), plane_norm(x), atol=1e-4)

    def test_backward_numeric(self, rng):
        x = rng.standard_normal((2, 2, 5, 5))
        g = rng.standard_normal(x.shape)

        def objective():
            return float((plane_norm(x) * g).sum())

        np.testing.assert_allclose(plane_norm_backward(x, g), numeric_grad(objective, x),
                                   rtol=1e-5, atol=1e-7)

    def test_not_4d(self):
        with pytest.raises(ValueError):
            plane_norm(np.zeros((3, 4, 4)))

import numpy as np
import pytest

from agnet.layers import (
    CBR, BatchNorm2d, Conv2d, GroupConv1d, batch_norm, conv2d, interp_matrix, pool,
    upsample_bilinear,
)
from agnet.tensor import ShapeError, Tensor, default_dtype, grad_check

from conftest import leaf


def naive_conv(x, w, b, stride, pad, groups):
    n, c, h, wd = x.shape
    co, cpg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    opg = co // groups
    for ni in range(n):
        for o in range(co):
            g = o // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(cpg):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += w[o, ci, ki, kj] * xp[ni, g * cpg + ci, i * stride + ki, j * stride + kj]
                    out[ni, o, i, j] = acc
    return out


class TestConv2d:
    def test_identity_pointwise(self, rng):
        x = rng.normal(size=(2, 4, 5, 5)).astype(np.float32)
        w = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
        out = conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(4, np.float32)))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_counts_taps(self):
        c = 0.5
        out = conv2d(Tensor(np.full((1, 1, 5, 5), c)), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
        assert out[2, 2] == pytest.approx(9 * c)
        for corner in (out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]):
            assert corner == pytest.approx(4 * c)
        assert out[0, 2] == pytest.approx(6 * c)

    @pytest.mark.parametrize("stride,groups", [(1, 1), (2, 1), (1, 2), (2, 4)])
    def test_matches_naive_loops(self, rng, stride, groups):
        x = rng.normal(size=(2, 4, 7, 6)).astype(np.float32)
        w = rng.normal(size=(8, 4 // groups, 3, 3)).astype(np.float32)
        b = rng.normal(size=8).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, 1, groups)
        ref = naive_conv(x.astype(np.float64), w, b, stride, 1, groups)
        assert np.abs(out.data - ref).max() < 1e-5

    def test_groups_equal_sum_of_per_group_calls(self, rng):
        x = rng.normal(size=(1, 6, 5, 5))
        w = rng.normal(size=(6, 2, 3, 3))
        full = conv2d(Tensor(x), Tensor(w), padding=1, groups=3).data
        parts = [conv2d(Tensor(x[:, 2 * g : 2 * g + 2]), Tensor(w[2 * g : 2 * g + 2]), padding=1).data
                 for g in range(3)]
        np.testing.assert_allclose(full, np.concatenate(parts, axis=1), atol=1e-5)

    @pytest.mark.parametrize("k,stride,groups", [(3, 1, 1), (3, 2, 2), (1, 1, 1), (1, 1, 4)])
    def test_gradients(self, rng, k, stride, groups):
        x = leaf(rng.normal(size=(2, 4, 6, 6)))
        w = leaf(rng.normal(size=(4, 4 // groups, k, k)))
        b = leaf(rng.normal(size=4))
        up = Tensor(rng.normal(size=(2, 4, 6 // stride, 6 // stride)))

        def f(_):
            return (conv2d(x, w, b, stride, k // 2, groups) * up).sum()

        for t in (x, w, b):
            assert grad_check(f, t) < 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 1, 1))))
        with pytest.raises(ShapeError):
            Conv2d(6, 4, groups=4)


class TestGroupConv1d:
    def test_block_diagonal_oracle(self, rng):
        layer = GroupConv1d(16, 8, rng=rng)
        v = rng.normal(size=(3, 16, 1, 1)).astype(np.float32)
        dense = np.zeros((16, 16))
        w = layer.weight.data.reshape(16, 2)
        for o in range(16):
            g = o // 2
            dense[o, 2 * g : 2 * g + 2] = w[o]
        expected = v[:, :, 0, 0] @ dense.T + layer.bias.data
        np.testing.assert_allclose(layer(Tensor(v)).data[:, :, 0, 0], expected, atol=1e-6)

    def test_depthwise_is_scale_plus_bias(self, rng):
        layer = GroupConv1d(4, 4, rng=rng)
        layer.bias.data[:] = [1, 2, 3, 4]
        v = rng.normal(size=(1, 4, 1, 1)).astype(np.float32)
        expected = v[0, :, 0, 0] * layer.weight.data[:, 0, 0, 0] + layer.bias.data
        np.testing.assert_allclose(layer(Tensor(v)).data[0, :, 0, 0], expected, rtol=1e-6)

    def test_single_group_equals_pointwise_conv(self, rng):
        layer = GroupConv1d(8, 1, rng=rng)
        v = Tensor(rng.normal(size=(2, 8, 1, 1)).astype(np.float32))
        ref = conv2d(v, layer.weight, layer.bias)
        np.testing.assert_array_equal(layer(v).data, ref.data)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            GroupConv1d(12, 8)

    def test_rejects_spatial_input(self):
        with pytest.raises(ShapeError):
            GroupConv1d(8, 8)(Tensor(np.ones((1, 8, 2, 2))))


class TestBatchNorm:
    def test_eval_unit_stats(self, rng):
        bn = BatchNorm2d(3).eval()
        x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(bn(Tensor(x)).data, x / np.sqrt(1 + 1e-5), rtol=1e-6)

    def test_train_normalizes(self, rng):
        bn = BatchNorm2d(3)
        x = rng.normal(3.0, 2.0, size=(4, 3, 5, 5))
        y = bn(Tensor(x)).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_running_stats_update(self, rng):
        bn = BatchNorm2d(2)
        x = rng.normal(1.0, 3.0, size=(4, 2, 3, 3))
        bn(Tensor(x))
        m = x.shape[0] * 9
        np.testing.assert_allclose(bn.running_mean.data, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
        expected_var = 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1)
        np.testing.assert_allclose(bn.running_var.data, expected_var, rtol=1e-5)
        assert (bn.running_var.data >= 0).all()

    def test_eval_is_affine_and_batch_independent(self, rng):
        bn = BatchNorm2d(3)
        bn.running_mean.data[:] = [0.5, -1, 2]
        bn.running_var.data[:] = [2, 0.5, 1]
        bn.gamma.data[:] = [1.5, -1, 0.3]
        bn.beta.data[:] = [0.1, 0.2, 0.3]
        bn.eval()
        a = bn.gamma.data / np.sqrt(bn.running_var.data + bn.eps)
        b = bn.beta.data - a * bn.running_mean.data
        x = rng.normal(size=(3, 3, 2, 2)).astype(np.float32)
        y = bn(Tensor(x)).data
        np.testing.assert_allclose(y, a[None, :, None, None] * x + b[None, :, None, None], rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(bn(Tensor(x[:1])).data, y[:1], rtol=1e-6)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, training):
        x = leaf(rng.normal(size=(2, 3, 3, 3)))
        gamma = leaf(rng.normal(size=3))
        beta = leaf(rng.normal(size=3))
        up = Tensor(rng.normal(size=(2, 3, 3, 3)))
        rm, rv = np.zeros(3), np.ones(3)

        def f(_):
            return (batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training) * up).sum()

        for t in (x, gamma, beta):
            assert grad_check(f, t) < 1e-4

    def test_single_value_train_mode(self):
        with pytest.raises(ShapeError):
            BatchNorm2d(2)(Tensor(np.ones((1, 2, 1, 1))))


class TestPool:
    def test_global(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert pool("global_avg", x).item() == 2.5
        assert pool("global_max", x).item() == 4.0

    def test_channel_pools_shapes_and_constant(self):
        x = Tensor(np.full((2, 5, 3, 3), 1.25))
        avg, mx = pool("channel_avg", x), pool("channel_max", x)
        assert avg.shape == mx.shape == (2, 1, 3, 3)
        np.testing.assert_array_equal(avg.data, mx.data)

    def test_max_gradient_routes_to_first_argmax(self):
        x = leaf(np.array([[[[1.0, 5.0], [5.0, 2.0]]]]))
        pool("global_max", x).sum().backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[0, 1], [0, 0]])
        y = leaf(np.array([[[[1.0]], [[3.0]], [[3.0]]]]))
        pool("channel_max", y).sum().backward()
        np.testing.assert_array_equal(y.grad.reshape(-1), [0, 1, 0])

    def test_max_dominates_avg(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 3, 3)))
        assert (pool("global_max", x).data >= pool("global_avg", x).data).all()
        const = Tensor(np.full((1, 2, 3, 3), 0.3))
        np.testing.assert_allclose(pool("global_max", const).data, pool("global_avg", const).data)

    @pytest.mark.parametrize("kind", ["global_avg", "global_max", "channel_avg", "channel_max"])
    def test_gradients(self, rng, kind):
        x = leaf(rng.normal(size=(2, 3, 3, 3)))
        assert grad_check(lambda t: (pool(kind, t) * pool(kind, t)).sum(), x) < 1e-5


def half_pixel_oracle(img, oh, ow):
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            sy = max((i + 0.5) * h / oh - 0.5, 0.0)
            sx = max((j + 0.5) * w / ow - 0.5, 0.0)
            y0, x0 = min(int(sy), h - 1), min(int(sx), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            ly, lx = sy - y0, sx - x0
            out[i, j] = ((1 - ly) * (1 - lx) * img[y0, x0] + (1 - ly) * lx * img[y0, x1]
                         + ly * (1 - lx) * img[y1, x0] + ly * lx * img[y1, x1])
    return out


class TestUpsample:
    def test_constant(self):
        out = upsample_bilinear(Tensor(np.full((1, 2, 3, 3), 0.4)), 7, 5)
        np.testing.assert_allclose(out.data, 0.4)
        again = upsample_bilinear(out, 14, 10)
        np.testing.assert_allclose(again.data, 0.4)

    def test_2x2_to_4x4(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = upsample_bilinear(Tensor(img[None, None]), 4, 4).data[0, 0]
        expected = np.array([
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ])
        np.testing.assert_allclose(out, expected)
        np.testing.assert_allclose(out, half_pixel_oracle(img, 4, 4))

    @pytest.mark.parametrize("shape,out", [((3, 5), (7, 4)), ((8, 8), (4, 4)), ((2, 3), (6, 9))])
    def test_matches_oracle(self, rng, shape, out):
        img = rng.normal(size=shape)
        got = upsample_bilinear(Tensor(img[None, None]), *out).data[0, 0]
        np.testing.assert_allclose(got, half_pixel_oracle(img, *out), atol=1e-12)

    def test_same_size_is_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        np.testing.assert_array_equal(upsample_bilinear(x, 4, 4).data, x.data)

    def test_gradient(self, rng):
        x = leaf(rng.normal(size=(1, 2, 3, 3)))
        up = Tensor(rng.normal(size=(1, 2, 6, 6)))
        assert grad_check(lambda t: (upsample_bilinear(t, 6, 6) * up).sum(), x) < 1e-6

    def test_interp_rows_sum_to_one(self):
        for n_in, n_out in [(1, 4), (7, 3), (5, 5), (2, 9)]:
            np.testing.assert_allclose(interp_matrix(n_in, n_out).sum(axis=1), 1.0)


class TestCBR:
    def test_nonnegative_and_width(self, rng):
        block = CBR(16, 128, rng=rng)
        out = block(Tensor(rng.normal(size=(2, 16, 4, 4)).astype(np.float32)))
        assert out.shape == (2, 128, 4, 4)
        assert (out.data >= 0).all()

    def test_grad_check(self, rng):
        with default_dtype(np.float64):
            block = CBR(3, 4, 3, rng=rng)
        x = leaf(rng.normal(size=(2, 3, 4, 4)))
        up = Tensor(rng.normal(size=(2, 4, 4, 4)))
        f = lambda _: (block(x) * up).sum()  # noqa: E731
        assert grad_check(f, x) < 1e-4
        assert grad_check(f, block.conv.weight) < 1e-4
        assert grad_check(f, block.bn.gamma) < 1e-4

import numpy as np
import pytest

import sinodet.autodiff as ad
from sinodet.autodiff import ShapeError, Tensor


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, tensors, rtol=1e-6, h=1e-6):
    """Compare backward() gradients of a scalar graph against finite
    differences for every tensor in ``tensors``."""
    loss = build()
    for t in tensors:
        t.zero_grad()
    loss = build()
    loss.backward()
    for t in tensors:
        fd = numeric_grad(lambda: float(build().data), t.data, h=h)
        scale = max(np.max(np.abs(fd)), np.max(np.abs(t.grad)), 1e-8)
        assert np.max(np.abs(fd - t.grad)) / scale < rtol, t.name


class TestTensorBasics:
    def test_requires_grad_default_off(self):
        t = Tensor([1.0, 2.0])
        assert not t.requires_grad

    def test_leaf_must_be_finite(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])

    def test_backward_needs_scalar(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            (t * 2.0).backward()

    def test_backward_seed_shape_checked(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            (t * 2.0).backward(seed=np.ones(3))

    def test_seeded_backward_vector(self):
        t = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (t * t).backward(seed=np.array([1.0, 10.0, 100.0]))
        assert np.allclose(t.grad, [2.0, 40.0, 600.0])

    def test_grad_accumulates_across_calls(self):
        t = Tensor(2.0, requires_grad=True)
        for _ in range(3):
            (t * t).backward()
        assert t.grad == pytest.approx(12.0)
        t.zero_grad()
        assert t.grad is None

    def test_diamond_graph_counts_both_paths(self):
        x = Tensor(3.0, requires_grad=True)
        y = x * x
        z = y + y
        z.backward()
        assert x.grad == pytest.approx(12.0)

    def test_no_grad_blocks_graph(self):
        x = Tensor(1.0, requires_grad=True)
        with ad.no_grad():
            y = x * 2.0
        assert y._parents == ()
        assert ad.grad_enabled()

    def test_deep_chain_survives(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.001
        y.backward()
        assert x.grad == pytest.approx(1.0)


class TestElementwiseGrads:
    def test_arith_and_broadcasting(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="a")
        b = Tensor(rng.normal(size=(4,)) + 3.0, requires_grad=True, name="b")
        check_grads(lambda: ((a * b + a / b - b) * a).sum(), [a, b])

    def test_exp_log_square(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.random(6) + 0.5, requires_grad=True, name="a")
        check_grads(lambda: (ad.tlog(ad.texp(ad.square(a)) + 1.0)).sum(), [a])

    def test_clamp_gradient_zero_outside(self):
        a = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
        ad.clamp(a, 0.0, 1.0).sum().backward()
        assert np.allclose(a.grad, [0.0, 1.0, 0.0])

    def test_mean_matches_numpy(self):
        a = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        m = a.mean()
        assert float(m.data) == pytest.approx(5.5)
        m.backward()
        assert np.allclose(a.grad, 1.0 / 12.0)


class TestShapeOps:
    def test_take_scatters_gradient(self):
        a = Tensor(np.arange(10.0), requires_grad=True)
        a[np.array([1, 1, 3])].sum().backward()
        expect = np.zeros(10)
        expect[1] = 2.0
        expect[3] = 1.0
        assert np.allclose(a.grad, expect)

    def test_transpose_flip_concat_stack(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, name="a")
        b = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, name="b")

        def build():
            x = ad.transpose(a, (2, 0, 1))
            y = ad.transpose(ad.flip(b, (1,)), (2, 0, 1))
            z = ad.concat([x, y], axis=0)
            w = ad.stack([z, z * 2.0], axis=1)
            return ad.square(w).sum()

        check_grads(build, [a, b])

    def test_reshape_roundtrip(self):
        a = Tensor(np.arange(6.0), requires_grad=True)
        ad.square(a.reshape(2, 3)).sum().backward()
        assert np.allclose(a.grad, 2.0 * np.arange(6.0))


class TestNNOps:
    def test_conv2d_matches_fd(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True, name="x")
        k = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True, name="k")
        b = Tensor(rng.normal(size=4), requires_grad=True, name="b")
        check_grads(lambda: ad.square(ad.conv(x, k, b, padding="zero")).sum(),
                    [x, k, b], rtol=1e-5)

    def test_conv3d_valid_shrinks(self):
        x = Tensor(np.zeros((1, 1, 6, 5, 4)))
        k = Tensor(np.zeros((2, 1, 3, 3, 3)))
        out = ad.conv(x, k, padding="valid")
        assert out.shape == (1, 2, 4, 3, 2)

    def test_conv_unbatched_input(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True, name="x")
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True, name="k")
        b = Tensor(rng.normal(size=3), requires_grad=True, name="b")
        out = ad.conv(x, k, b, padding="zero")
        assert out.shape == (3, 4, 4)
        check_grads(lambda: ad.square(ad.conv(x, k, b, padding="zero")).sum(),
                    [x, k, b], rtol=1e-5)

    def test_conv_zero_pad_needs_odd_kernel(self):
        with pytest.raises(ShapeError):
            ad.conv(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_conv_channel_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"channels"):
            ad.conv(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_conv_pad_covers_small_extent(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(1, 1, 4, 4, 1)), requires_grad=True, name="x")
        k = Tensor(rng.normal(size=(2, 1, 3, 3, 3)), requires_grad=True, name="k")
        out = ad.conv(x, k, padding="zero")
        assert out.shape == (1, 2, 4, 4, 1)
        check_grads(lambda: ad.square(ad.conv(x, k, padding="zero")).sum(),
                    [x, k], rtol=1e-5)

    def test_maxpool3d_forward_and_grad(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(2, 3, 4, 4, 2)), requires_grad=True, name="x")
        out = ad.maxpool3d(x, (2, 2, 2))
        assert out.shape == (2, 3, 2, 2, 1)
        assert np.allclose(
            out.data,
            x.data.reshape(2, 3, 2, 2, 2, 2, 1, 2).max(axis=(3, 5, 7)))
        check_grads(lambda: ad.square(ad.maxpool3d(x, (2, 2, 2))).sum(), [x],
                    rtol=1e-5)

    def test_maxpool_tie_routes_once(self):
        x = Tensor(np.zeros((1, 1, 2, 2, 2)), requires_grad=True)
        ad.maxpool3d(x, (2, 2, 2)).sum().backward()
        assert x.grad.sum() == pytest.approx(1.0)

    def test_prelu_channels(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, name="x")
        alpha = Tensor(np.array([0.1, 0.2, 0.3]), requires_grad=True, name="alpha")
        out = ad.prelu(x, alpha, channel_axis=1)
        expect = np.where(x.data > 0, x.data,
                          x.data * alpha.data.reshape(1, 3, 1))
        assert np.allclose(out.data, expect)
        check_grads(lambda: ad.square(ad.prelu(x, alpha, channel_axis=1)).sum(),
                    [x, alpha], rtol=1e-5)

    def test_sigmoid_range_and_grad(self):
        x = Tensor(np.linspace(-20, 20, 11), requires_grad=True, name="x")
        out = ad.sigmoid(x)
        assert np.all(out.data > 0) and np.all(out.data < 1)
        check_grads(lambda: ad.square(ad.sigmoid(x)).sum(), [x], rtol=1e-5)

    def test_cross_entropy_value_and_grad(self):
        p = Tensor(np.array([0.9, 0.2, 0.5]), requires_grad=True, name="p")
        y = np.array([1.0, 0.0, 1.0])
        loss = ad.cross_entropy(p, y)
        expect = -np.mean([np.log(0.9), np.log(0.8), np.log(0.5)])
        assert float(loss.data) == pytest.approx(expect)
        check_grads(lambda: ad.cross_entropy(p, y), [p], rtol=1e-5)

    def test_cross_entropy_clamps_extremes(self):
        p = Tensor(np.array([1.0, 0.0]))
        loss = ad.cross_entropy(p, np.array([0.0, 1.0]))
        assert np.isfinite(float(loss.data))

    def test_cross_entropy_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            ad.cross_entropy(Tensor([0.5]), np.array([2.0]))

    def test_linear_map_adjoint_pair(self):
        rng = np.random.default_rng(8)
        m = rng.normal(size=(5, 3))
        x = Tensor(rng.normal(size=3), requires_grad=True, name="x")
        out = ad.linear_map(x, lambda v: m @ v, lambda v: m.T @ v)
        assert np.allclose(out.data, m @ x.data)
        check_grads(
            lambda: ad.square(ad.linear_map(x, lambda v: m @ v, lambda v: m.T @ v)).sum(),
            [x], rtol=1e-6)

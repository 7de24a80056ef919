import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mscred import _accel
from mscred import autodiff as ad
from mscred.errors import ShapeError


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` with respect to array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def check_grads(build, arrays, rtol=1e-6, atol=1e-8):
    """``build(*tensors)`` returns a scalar Tensor; compare analytic and numeric grads."""
    params = [ad.parameter(a) for a in arrays]
    loss = build(*params)
    ad.backward(loss, params)
    for p in params:
        num = numeric_grad(lambda: float(build(*[ad.constant(q.value) for q in params]).value), p.value)
        np.testing.assert_allclose(p.grad, num, rtol=rtol, atol=atol)


def naive_conv(x, w, b, stride):
    """Six nested loops with explicit same padding."""
    B, H, W, C = x.shape
    k, _, _, F = w.shape
    top = (k - 1) // 2
    ho, wo = -(-H // stride), -(-W // stride)
    out = np.zeros((B, ho, wo, F))
    for n in range(B):
        for i in range(ho):
            for j in range(wo):
                for di in range(k):
                    for dj in range(k):
                        r, c = i * stride + di - top, j * stride + dj - top
                        if 0 <= r < H and 0 <= c < W:
                            out[n, i, j] += x[n, r, c] @ w[di, dj]
    return out + (0 if b is None else b)


class TestConv:
    def test_ones(self):
        out = ad.conv2d(np.ones((5, 5, 1)), np.ones((3, 3, 1, 1))).value[..., 0]
        assert out[2, 2] == 9 and out[0, 0] == 4 and out[0, 2] == 6 and out[4, 4] == 4

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 6, 6, 3))
        w = np.zeros((3, 3, 3, 3))
        w[1, 1] = np.eye(3)
        np.testing.assert_array_equal(ad.conv2d(x, w).value, x)

    @pytest.mark.parametrize("k,stride,size", [(3, 1, 7), (3, 2, 7), (2, 2, 8), (2, 2, 15), (3, 2, 30), (2, 1, 5)])
    def test_matches_naive(self, rng, k, stride, size):
        x = rng.normal(size=(2, size, size, 3))
        w = rng.normal(size=(k, k, 3, 4))
        b = rng.normal(size=4)
        got = ad.conv2d(x, w, b, stride).value
        np.testing.assert_allclose(got, naive_conv(x, w, b, stride), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("size,stride,expected", [(30, 1, 30), (30, 2, 15), (15, 2, 8), (8, 2, 4)])
    def test_output_size(self, size, stride, expected):
        assert ad.conv_output_size(size, stride) == expected

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ad.conv2d(rng.normal(size=(4, 4, 2)), rng.normal(size=(3, 3, 3, 1)))

    @pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (2, 2)])
    def test_gradients(self, rng, k, stride):
        x = rng.normal(size=(2, 5, 5, 2))
        w = rng.normal(size=(k, k, 2, 3))
        b = rng.normal(size=3)
        r = rng.normal(size=(2, -(-5 // stride), -(-5 // stride), 3))
        check_grads(lambda x, w, b: ad.sum_(ad.mul(ad.conv2d(x, w, b, stride), r)), [x, w, b])


class TestDeconv:
    @pytest.mark.parametrize("k,stride,size,target", [(2, 2, 4, 8), (2, 2, 8, 15), (3, 2, 15, 30), (3, 1, 30, 30), (3, 2, 4, 7)])
    def test_adjoint_of_conv(self, rng, k, stride, size, target):
        # <conv(x, w), y> == <x, deconv(y, w^T)> for every x, y
        x = rng.normal(size=(2, target, target, 3))
        w = rng.normal(size=(k, k, 3, 5))
        y = rng.normal(size=(2, size, size, 5))
        lhs = np.sum(ad.conv2d(x, w, stride=stride).value * y)
        rhs = np.sum(x * ad.deconv2d(y, w.transpose(0, 1, 3, 2), stride=stride, target_hw=(target, target)).value)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_unreachable_target(self, rng):
        with pytest.raises(ShapeError, match=r"\[16, 15\]"):
            ad.deconv2d(rng.normal(size=(1, 8, 8, 2)), rng.normal(size=(2, 2, 2, 2)), stride=2, target_hw=(14, 14))

    def test_reachable_sizes(self):
        assert ad.deconv_reachable_sizes(8, 2) == [16, 15]
        assert ad.deconv_reachable_sizes(30, 1) == [30]

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 4, 4, 3))
        w = rng.normal(size=(2, 2, 3, 2))
        b = rng.normal(size=2)
        r = rng.normal(size=(2, 7, 7, 2))
        check_grads(lambda x, w, b: ad.sum_(ad.mul(ad.deconv2d(x, w, b, 2, (7, 7)), r)), [x, w, b])


@pytest.mark.skipif(not _accel.NUMBA_AVAILABLE, reason="numba not importable")
@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (2, 2)])
def test_kernel_backends_agree(rng, k, stride):
    xp = rng.normal(size=(2, 9, 9, 3))
    ho = (9 - k) // stride + 1
    a = _accel._im2col_numba(xp, k, stride, ho, ho)
    b = _accel._im2col_numpy(xp, k, stride, ho, ho)
    np.testing.assert_array_equal(a, b)
    cols = rng.normal(size=a.shape)
    np.testing.assert_allclose(
        _accel._col2im_numba(cols, 2, 9, 9, 3, k, stride, ho, ho),
        _accel._col2im_numpy(cols, 2, 9, 9, 3, k, stride, ho, ho),
        rtol=1e-14,
        atol=1e-14,
    )


class TestElementwise:
    def test_selu_values(self):
        v = ad.selu(np.array([-1.0, 0.0, 2.0])).value
        np.testing.assert_allclose(v, [ad.SELU_LAMBDA * ad.SELU_ALPHA * (np.exp(-1) - 1), 0.0, 2 * ad.SELU_LAMBDA])

    def test_selu_fixed_point(self):
        # SELU keeps zero mean / unit variance for standard normal input
        z = np.random.default_rng(0).standard_normal(2_000_000)
        out = ad.selu(z).value
        assert abs(out.mean()) < 5e-3 and abs(out.var() - 1) < 5e-3

    def test_sigmoid_extremes(self):
        v = ad.sigmoid(np.array([-800.0, 0.0, 800.0])).value
        assert np.all(np.isfinite(v)) and v[1] == 0.5 and v[0] == 0.0 and v[2] == 1.0

    @pytest.mark.parametrize("op", [ad.selu, ad.sigmoid, ad.tanh])
    def test_unary_gradients(self, rng, op):
        x = rng.normal(size=(3, 4)) + 0.05  # keep away from the SELU kink
        x[np.abs(x) < 1e-3] = 0.5
        r = rng.normal(size=(3, 4))
        check_grads(lambda x: ad.sum_(ad.mul(op(x), r)), [x])

    def test_softmax(self, rng):
        x = rng.normal(size=(2, 5)) * 10
        s = ad.softmax(x, axis=1).value
        np.testing.assert_allclose(s.sum(axis=1), 1.0)
        np.testing.assert_allclose(s, np.exp(x) / np.exp(x).sum(axis=1, keepdims=True))
        assert np.all(np.isfinite(ad.softmax(np.array([1000.0, 0.0])).value))
        r = rng.normal(size=(2, 5))
        check_grads(lambda x: ad.sum_(ad.mul(ad.softmax(x, axis=1), r)), [x / 10])

    def test_broadcast_mul_and_add(self, rng):
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4,)), rng.normal(size=(3, 1))
        check_grads(lambda a, b, c: ad.sum_(ad.mul(ad.add(ad.mul(a, b), c), a)), [a, b, c])

    def test_structural_ops(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
        r = rng.normal(size=(2, 2, 5))

        def build(a, b):
            cat = ad.concat([a, b], axis=1)
            st_ = ad.stack([cat, ad.scale(cat, 2.0)], axis=0)
            return ad.sum_(ad.mul(ad.reshape(st_, (2, 2, 5)), r)) + ad.sum_(ad.getitem(a, (slice(None), 1))) - ad.sum_(a, axis=None)

        check_grads(build, [a, b])


class TestBackward:
    def test_reused_node_accumulates(self):
        x = ad.parameter(np.array(3.0))
        y = x * x + x
        ad.backward(y, [x])
        assert x.grad == pytest.approx(7.0)

    def test_non_scalar_loss(self):
        with pytest.raises(ValueError):
            ad.backward(ad.parameter(np.ones(3)))

    def test_unreached_params_zeroed(self):
        x, y = ad.parameter(np.ones(2)), ad.parameter(np.ones(2))
        y.grad = np.full(2, 9.0)
        ad.backward(ad.sum_(x), [x, y])
        assert np.array_equal(y.grad, np.zeros(2))

    def test_deep_chain_does_not_recurse(self):
        x = ad.parameter(np.array(1.0))
        y = x
        for _ in range(5000):
            y = ad.scale(y, 1.0)
        ad.backward(y, [x])
        assert x.grad == 1.0


class TestAdam:
    @settings(max_examples=30)
    @given(g=st.floats(1e-6, 1e6), sign=st.sampled_from([-1.0, 1.0]))
    def test_first_step_is_lr(self, g, sign):
        p = {"w": np.array([0.0])}
        ad.adam_step(p, {"w": np.array([sign * g])}, ad.AdamState(lr=1e-3))
        # bias correction makes the step lr * |g| / (|g| + eps), i.e. ~lr
        assert p["w"][0] == pytest.approx(-sign * 1e-3 * g / (g + 1e-8), rel=1e-9)
        if g > 1e-3:
            assert abs(p["w"][0]) == pytest.approx(1e-3, rel=1e-5)

    def test_matches_reference(self, rng):
        # reference written out with explicit bias-corrected moments
        w = rng.normal(size=4)
        grads = rng.normal(size=(6, 4))
        p = {"w": w.copy()}
        state = ad.AdamState(lr=0.01)
        m = v = np.zeros(4)
        ref = w.copy()
        for t, g in enumerate(grads, start=1):
            ad.adam_step(p, {"w": g}, state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"], ref, rtol=1e-13)
        assert state.step == 6

    def test_minimizes_quadratic(self):
        p = {"w": np.array([3.0, -2.0])}
        state = ad.AdamState(lr=0.05)
        for _ in range(2000):
            ad.adam_step(p, {"w": 2 * p["w"]}, state)
        assert np.all(np.abs(p["w"]) < 1e-2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, ad.AdamState())


class TestGradCheck:
    def test_passes_on_correct_gradient(self, rng):
        w = ad.parameter(rng.normal(size=(3, 3)))
        x = rng.normal(size=(3,))
        rep = ad.grad_check(lambda: ad.sum_(ad.tanh(ad.mul(w, x))), {"w": w})
        assert rep.passed() and rep.checked == 9

    def test_catches_wrong_gradient(self, rng):
        w = ad.parameter(rng.normal(size=4))

        def bad_square(a):
            return ad._op(a.value**2, (a,), lambda g: (g * a.value,))  # missing factor 2

        rep = ad.grad_check(lambda: ad.sum_(bad_square(w)), {"w": w})
        assert not rep.passed()
        assert rep.max_rel_error == pytest.approx(1 / 2, rel=1e-3)

    def test_relative_error_floor(self):
        assert ad.relative_error(1e-9, 2e-9, floor=1e-6) == pytest.approx(1e-3)
        assert ad.relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)

"""Forward correctness and gradients of the tensor-core ops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gunet import functional as F
from gunet import gradcheck
from gunet import tensor as T
from gunet.errors import ConfigError, ShapeError
from gunet.tensor import Tensor, no_grad


def direct_conv(x, w, b, stride, groups, padding):
    """Brute-force reference convolution."""
    B, C, H, W = x.shape
    O, cg, k, _ = w.shape
    p = (k - 1) // 2
    mode = "reflect" if padding == "reflect" else "constant"
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode=mode)
    Ho, Wo = -(-H // stride), -(-W // stride)
    out = np.zeros((B, O, Ho, Wo))
    og = O // groups
    for o in range(O):
        g = o // og
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[:, g * cg:(g + 1) * cg, i * stride:i * stride + k, j * stride:j * stride + k]
                out[:, o, i, j] = np.sum(patch * w[o], axis=(1, 2, 3))
    return out + (0 if b is None else b[None, :, None, None])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv:
    @pytest.mark.parametrize("cin,cout,k,groups,stride,padding", [
        (3, 4, 1, 1, 1, "reflect"),
        (4, 4, 3, 4, 1, "reflect"),
        (4, 4, 5, 4, 1, "zero"),
        (4, 4, 7, 4, 1, "reflect"),
        (2, 2, 3, 2, 2, "reflect"),
        (3, 5, 3, 1, 1, "reflect"),
        (4, 6, 3, 2, 2, "zero"),
        (3, 2, 5, 1, 1, "zero"),
    ])
    def test_matches_direct(self, rng, cin, cout, k, groups, stride, padding):
        x = rng.standard_normal((2, cin, 7, 6))
        w = rng.standard_normal((cout, cin // groups, k, k))
        b = rng.standard_normal(cout)
        p = F.ConvParams(Tensor(w), Tensor(b), stride=stride, groups=groups, padding=padding)
        got = F.conv2d(Tensor(x), p).data
        np.testing.assert_allclose(got, direct_conv(x, w, b, stride, groups, padding), atol=1e-12)

    def test_identity_pointwise(self, rng):
        x = rng.standard_normal((2, 5, 4, 3))
        p = F.ConvParams(Tensor(np.eye(5)[:, :, None, None]), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(F.conv2d(Tensor(x), p).data, x)

    def test_constant_depthwise_reflect(self):
        x = np.full((1, 2, 4, 4), 7.0)
        p = F.ConvParams(Tensor(np.ones((2, 1, 3, 3))), None, groups=2)
        np.testing.assert_array_equal(F.conv2d(Tensor(x), p).data, 63.0)

    def test_output_shape_stride(self, rng):
        p = F.ConvParams(Tensor(rng.standard_normal((3, 1, 3, 3))), None, stride=2, groups=3)
        assert F.conv2d(Tensor(rng.standard_normal((1, 3, 5, 7))), p).shape == (1, 3, 3, 4)

    @pytest.mark.parametrize("h,w", [(1, 1), (1, 4), (2, 3)])
    def test_tiny_inputs_reflect(self, rng, h, w):
        x = rng.standard_normal((1, 2, h, w))
        wt = rng.standard_normal((2, 1, 5, 5))
        p = F.ConvParams(Tensor(wt), None, groups=2)
        assert F.conv2d(Tensor(x), p).shape == (1, 2, h, w)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            F.ConvParams(Tensor(np.zeros((2, 2, 2, 2))), None)

    def test_group_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            F.ConvParams(Tensor(np.zeros((3, 1, 3, 3))), None, groups=2)

    def test_channel_mismatch_rejected(self, rng):
        p = F.ConvParams(Tensor(np.zeros((2, 3, 1, 1))), None)
        with pytest.raises(ConfigError):
            F.conv2d(Tensor(rng.standard_normal((1, 4, 3, 3))), p)

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
    def test_linear_in_input(self, a, b, seed):
        r = np.random.default_rng(seed)
        x1, x2 = r.standard_normal((2, 1, 3, 5, 5))
        p = F.ConvParams(Tensor(r.standard_normal((3, 1, 3, 3))), None, groups=3)
        lhs = F.conv2d(Tensor(a * x1 + b * x2), p).data
        rhs = a * F.conv2d(Tensor(x1), p).data + b * F.conv2d(Tensor(x2), p).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_depthwise_wide_matches_strided_path(self, rng):
        # stride-1 fast path vs the strided-window path used for stride 2
        x = rng.standard_normal((2, 3, 9, 8))
        w = rng.standard_normal((3, 1, 5, 5))
        fast = F.conv2d(Tensor(x), F.ConvParams(Tensor(w), None, groups=3)).data
        ref = direct_conv(x, w, None, 1, 3, "reflect")
        np.testing.assert_allclose(fast, ref, rtol=0, atol=1e-12)


class TestShapeOps:
    def test_shuffle_roundtrip(self, rng):
        x = rng.standard_normal((2, 3, 6, 4))
        np.testing.assert_array_equal(T.pixel_shuffle(T.pixel_unshuffle(Tensor(x), 2), 2).data, x)

    def test_unshuffle_channel_order(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        y = T.pixel_unshuffle(Tensor(x), 2).data
        # channel c*4 + i*2 + j holds x[..., i::2, j::2]
        for i in range(2):
            for j in range(2):
                np.testing.assert_array_equal(y[0, i * 2 + j], x[0, 0, i::2, j::2])

    def test_unshuffle_odd_size_rejected(self, rng):
        with pytest.raises(ShapeError):
            T.pixel_unshuffle(Tensor(rng.standard_normal((1, 1, 3, 4))), 2)

    @pytest.mark.parametrize("mode", ["reflect", "zero"])
    def test_pad_matches_numpy(self, rng, mode):
        x = rng.standard_normal((1, 2, 4, 5))
        got = T.pad2d(Tensor(x), 2, 1, 3, 2, mode).data
        np_mode = "reflect" if mode == "reflect" else "constant"
        np.testing.assert_array_equal(got, np.pad(x, ((0, 0), (0, 0), (2, 1), (3, 2)), mode=np_mode))

    def test_crop_inverts_pad(self, rng):
        x = rng.standard_normal((1, 2, 5, 3))
        np.testing.assert_array_equal(T.crop2d(T.pad2d(Tensor(x), 0, 3, 0, 1), 5, 3).data, x)


class TestNorm:
    def test_eval_identity_stats(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        st = F.NormState.create(3, mode="eval")
        np.testing.assert_allclose(F.batch_norm(Tensor(x), st).data, x / np.sqrt(1 + st.eps), rtol=1e-15)

    def test_two_point_batch(self):
        x = np.empty((2, 1, 1, 1))
        x[0], x[1] = 1.0, 3.0
        st = F.NormState.create(1)
        y = F.batch_norm(Tensor(x), st).data.ravel()
        np.testing.assert_allclose(y, [-1, 1], atol=1e-5)

    def test_running_stats_ema(self, rng):
        x = rng.standard_normal((4, 2, 3, 3)) * 2 + 5
        st = F.NormState.create(2)
        F.batch_norm(Tensor(x), st)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(st.running_mean, 0.1 * mean, rtol=1e-12)
        np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * var, rtol=1e-12)

    def test_ghost_equals_full_bitwise(self, rng):
        x = rng.standard_normal((8, 3, 4, 4))
        a, b = F.NormState.create(3), F.NormState.create(3, ghost_size=8)
        ya, yb = F.batch_norm(Tensor(x), a).data, F.batch_norm(Tensor(x), b).data
        assert ya.tobytes() == yb.tobytes()
        assert a.running_var.tobytes() == b.running_var.tobytes()

    def test_ghost_groups_normalized_separately(self, rng):
        x = rng.standard_normal((4, 2, 3, 3))
        x[2:] += 10
        y = F.batch_norm(Tensor(x), F.NormState.create(2, ghost_size=2)).data
        np.testing.assert_allclose(y[:2].mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(y[2:].mean(axis=(0, 2, 3)), 0, atol=1e-12)

    def test_ghost_not_dividing_batch(self, rng):
        with pytest.raises(ConfigError):
            F.batch_norm(Tensor(rng.standard_normal((6, 2, 2, 2))), F.NormState.create(2, ghost_size=4))

    @pytest.mark.parametrize("mode", ["eval", "frozen"])
    def test_stored_modes_do_not_mutate(self, rng, mode):
        st = F.NormState.create(2, mode=mode)
        st.running_mean[:] = [0.3, -0.1]
        before = (st.running_mean.copy(), st.running_var.copy())
        F.batch_norm(Tensor(rng.standard_normal((3, 2, 4, 4))), st)
        np.testing.assert_array_equal(st.running_mean, before[0])
        np.testing.assert_array_equal(st.running_var, before[1])

    def test_constant_input_finite(self):
        y = F.batch_norm(Tensor(np.full((2, 2, 3, 3), 4.0)), F.NormState.create(2)).data
        assert np.all(np.isfinite(y)) and np.all(y == 0)

    @pytest.mark.parametrize("fn,axes", [(F.layer_norm, (1, 2, 3)), (F.instance_norm, (2, 3))])
    def test_stat_norm_moments(self, rng, fn, axes):
        x = rng.standard_normal((2, 3, 4, 5)) * 3 + 1
        y = fn(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(y.mean(axis=axes), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=axes), 1, atol=1e-4)


class TestFold:
    @pytest.mark.parametrize("k,groups", [(1, 1), (5, 4), (3, 1)])
    def test_fold_equivalence(self, rng, k, groups):
        st = F.NormState.create(4, mode="eval")
        st.running_mean[:] = rng.standard_normal(4)
        st.running_var[:] = rng.uniform(0.5, 2, 4)
        st.gamma.data[:] = rng.standard_normal(4)
        st.beta.data[:] = rng.standard_normal(4)
        conv = F.ConvParams(Tensor(rng.standard_normal((4, 4 // groups, k, k))),
                            Tensor(rng.standard_normal(4)), groups=groups)
        x = Tensor(rng.standard_normal((3, 4, 6, 6)))
        folded = F.fold_norm_into_conv(st, conv)
        np.testing.assert_allclose(folded(x).data, conv(F.batch_norm(x, st)).data, atol=1e-12)

    def test_fold_refuses_train_mode(self, rng):
        conv = F.ConvParams(Tensor(rng.standard_normal((2, 2, 1, 1))), None)
        with pytest.raises(ConfigError):
            F.fold_norm_into_conv(F.NormState.create(2), conv)

    def test_fold_refuses_zero_padding(self, rng):
        conv = F.ConvParams(Tensor(rng.standard_normal((2, 1, 3, 3))), None, groups=2, padding="zero")
        with pytest.raises(ConfigError):
            F.fold_norm_into_conv(F.NormState.create(2, mode="eval"), conv)


class TestPointwiseOps:
    def test_softmax_sums_to_one(self, rng):
        w = F.softmax_over_branches(Tensor(rng.standard_normal((3, 8, 1, 1)) * 50), 2).data
        np.testing.assert_allclose(w[:, :4] + w[:, 4:], 1, rtol=1e-15)
        assert np.all(w >= 0)

    def test_hard_sigmoid_values(self):
        y = F.hard_sigmoid(Tensor(np.array([-4.0, -3.0, 0.0, 1.5, 3.0, 9.0]))).data
        np.testing.assert_allclose(y, [0, 0, 0.5, 0.75, 1, 1])

    def test_gap(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        np.testing.assert_allclose(F.global_avg_pool(Tensor(x)).data[..., 0, 0], x.mean(axis=(2, 3)))

    def test_l1(self, rng):
        a, b = rng.standard_normal((2, 2, 3, 3, 3))
        assert F.l1_loss(Tensor(a), b).item() == pytest.approx(np.abs(a - b).mean(), rel=1e-14)

    def test_channel_conv1d_matches_np(self, rng):
        s = rng.standard_normal((2, 7, 1, 1))
        w = rng.standard_normal(3)
        got = F.channel_conv1d(Tensor(s), Tensor(w)).data[..., 0, 0]
        ref = np.stack([np.correlate(np.pad(v, 1), w, mode="valid") for v in s[..., 0, 0]])
        np.testing.assert_allclose(got, ref, atol=1e-14)


class TestAutograd:
    def test_no_grad_records_nothing(self):
        a = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with no_grad():
            b = a * a
        assert not b.requires_grad

    def test_shared_input_accumulates(self):
        a = Tensor(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
        (a * a + a).backward()
        assert a.grad.item() == 7.0

    def test_grad_shape_matches_data(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True)
        (a * b).backward(np.ones((2, 3, 4, 4)))
        assert a.grad.shape == a.shape and b.grad.shape == b.shape


@pytest.mark.parametrize("case", gradcheck.op_cases(), ids=lambda c: c[0])
def test_op_gradients(case):
    label, fn, inputs = case
    for r in gradcheck.check(fn, inputs, tol=1e-4, label=label):
        assert r.ok, r.line()


def test_block_gradients():
    bad = [r.line() for r in gradcheck.run_blocks() if not r.ok]
    assert not bad, "\n".join(bad)

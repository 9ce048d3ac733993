"""Forward semantics of the tensor ops: oracles, shape formulas, edge cases."""

import numpy as np
import pytest

from volsynth import autodiff as ad
from volsynth.autodiff import Tensor


def conv3d_loop_oracle(x, k, bias, stride, pad):
    """Direct correlation: loops over every output cell and kernel window."""
    n_, c_, d_, h_, w_ = x.shape
    f_, _, kd, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    do = (d_ + 2 * pad - kd) // stride + 1
    ho = (h_ + 2 * pad - kh) // stride + 1
    wo = (w_ + 2 * pad - kw) // stride + 1
    out = np.zeros((n_, f_, do, ho, wo))
    for n in range(n_):
        for f in range(f_):
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        win = xp[n, :, od * stride:od * stride + kd,
                                 oh * stride:oh * stride + kh,
                                 ow * stride:ow * stride + kw]
                        out[n, f, od, oh, ow] = (win * k[f]).sum() + bias[f]
    return out


class TestConv3d:
    def test_identity_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3, 3)))
        k = Tensor(np.ones((1, 1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = ad.conv3d(x, k, b, stride=1, pad=0)
        assert out.data.shape == (1, 1, 3, 3, 3)
        assert np.array_equal(out.data, np.ones((1, 1, 3, 3, 3)))

    def test_shape_formula_halving(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 8, 8, 8)))
        k = Tensor(rng.normal(size=(3, 2, 4, 4, 4)))
        out = ad.conv3d(x, k, None, stride=2, pad=1)
        assert out.data.shape == (1, 3, 4, 4, 4)

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5, 6, 7))
        k = rng.normal(size=(4, 3, 3, 3, 3))
        b = rng.normal(size=4)
        out = ad.conv3d(Tensor(x), Tensor(k), Tensor(b), stride=1, pad=1)
        ref = conv3d_loop_oracle(x, k, b, 1, 1)
        assert np.abs(out.data - ref).max() <= 1e-10

    def test_strided_matches_loop_oracle(self, rng):
        x = rng.normal(size=(2, 2, 9, 8, 7))
        k = rng.normal(size=(3, 2, 4, 4, 4))
        b = rng.normal(size=3)
        out = ad.conv3d(Tensor(x), Tensor(k), Tensor(b), stride=2, pad=1)
        ref = conv3d_loop_oracle(x, k, b, 2, 1)
        assert np.abs(out.data - ref).max() <= 1e-10

    def test_channel_mismatch_raises(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4, 4)))
        k = Tensor(rng.normal(size=(2, 4, 3, 3, 3)))
        with pytest.raises(ad.DimensionError, match=r"\(1, 3, 4, 4, 4\)"):
            ad.conv3d(x, k, None)

    def test_kernel_too_large_raises(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 3, 3, 3)))
        k = Tensor(rng.normal(size=(1, 1, 5, 5, 5)))
        with pytest.raises(ad.DimensionError):
            ad.conv3d(x, k, None, stride=1, pad=0)


class TestConv3dTranspose:
    def test_scalar_kernel_scales_channels(self, rng):
        x = rng.normal(size=(1, 2, 3, 3, 3))
        k = np.zeros((2, 2, 1, 1, 1))
        k[0, 0] = 2.5
        k[1, 1] = 2.5
        out = ad.conv3d_transpose(Tensor(x), Tensor(k), None, stride=1, pad=0)
        assert np.abs(out.data - 2.5 * x).max() == 0.0

    def test_shape_formula_doubling(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 8, 8, 8)))
        k = Tensor(rng.normal(size=(2, 3, 4, 4, 4)))
        out = ad.conv3d_transpose(x, k, None, stride=2, pad=1)
        assert out.data.shape == (1, 3, 16, 16, 16)

    @pytest.mark.parametrize("ksz,stride,pad", [
        (4, 2, 1), (3, 1, 1), (2, 2, 0), (1, 1, 0), (4, 2, 2), (3, 2, 1), (5, 3, 2),
    ])
    def test_adjoint_identity(self, rng, ksz, stride, pad):
        q = 4
        x_sp = (q - 1) * stride - 2 * pad + ksz
        x = rng.normal(size=(2, 3, x_sp, x_sp, x_sp))
        k = rng.normal(size=(5, 3, ksz, ksz, ksz))
        y = rng.normal(size=(2, 5, q, q, q))
        lhs = float((ad.conv3d(Tensor(x), Tensor(k), None, stride, pad).data * y).sum())
        rhs = float((x * ad.conv3d_transpose(Tensor(y), Tensor(k), None, stride, pad).data).sum())
        assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), abs(rhs))

    def test_output_dims_override_for_odd_targets(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 5, 5, 5)))
        k = Tensor(rng.normal(size=(2, 1, 4, 4, 4)))
        out = ad.conv3d_transpose(x, k, None, stride=2, pad=1, output_dims=(9, 9, 9))
        assert out.data.shape == (1, 1, 9, 9, 9)

    def test_channel_mismatch_raises(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4, 4)))
        k = Tensor(rng.normal(size=(2, 4, 3, 3, 3)))
        with pytest.raises(ad.DimensionError):
            ad.conv3d_transpose(x, k, None)


class TestBatchNorm:
    def test_normalizes_to_zero_mean_unit_variance(self, rng):
        # variance deviates by eps/var, so keep the input variance >> 10*eps
        x = Tensor(rng.normal(loc=3.0, scale=5.0, size=(4, 3, 5, 5, 5)))
        state = ad.BatchNormState(3)
        out = ad.batchnorm3d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, True)
        means = out.data.mean(axis=(0, 2, 3, 4))
        variances = out.data.var(axis=(0, 2, 3, 4))
        assert np.abs(means).max() <= 1e-7
        assert np.abs(variances - 1.0).max() <= 1e-6

    def test_constant_channel_maps_to_zero(self):
        x = Tensor(np.full((2, 1, 3, 3, 3), 7.0))
        state = ad.BatchNormState(1)
        out = ad.batchnorm3d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, True)
        assert np.array_equal(out.data, np.zeros_like(x.data))

    def test_running_stats_match_ema_oracle(self, rng):
        momentum = 0.9
        state = ad.BatchNormState(2, momentum=momentum)
        gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
        rm, rv = np.zeros(2), np.ones(2)
        for _ in range(2):
            batch = rng.normal(size=(3, 2, 4, 4, 4))
            ad.batchnorm3d(Tensor(batch), gamma, beta, state, True)
            rm = momentum * rm + (1 - momentum) * batch.mean(axis=(0, 2, 3, 4))
            rv = momentum * rv + (1 - momentum) * batch.var(axis=(0, 2, 3, 4))
        assert np.abs(state.running_mean - rm).max() <= 1e-12
        assert np.abs(state.running_var - rv).max() <= 1e-12

    def test_inference_is_fixed_affine_and_pure(self, rng):
        state = ad.BatchNormState(2)
        gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
        ad.batchnorm3d(Tensor(rng.normal(size=(3, 2, 4, 4, 4))), gamma, beta, state, True)
        saved = (state.running_mean.copy(), state.running_var.copy())
        x = Tensor(rng.normal(size=(2, 2, 4, 4, 4)))
        out1 = ad.batchnorm3d(x, gamma, beta, state, False)
        out2 = ad.batchnorm3d(x, gamma, beta, state, False)
        assert np.array_equal(out1.data, out2.data)
        assert np.array_equal(state.running_mean, saved[0])
        assert np.array_equal(state.running_var, saved[1])

    def test_degenerate_batch_raises(self):
        x = Tensor(np.zeros((1, 2, 1, 1, 1)))
        state = ad.BatchNormState(2)
        with pytest.raises(ad.BatchNormError):
            ad.batchnorm3d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True)


class TestActivations:
    def test_definitions(self):
        x = Tensor(np.array([-2.0, 3.0]))
        assert np.array_equal(ad.relu(x).data, [0.0, 3.0])
        assert ad.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
        assert ad.tanh(Tensor(np.zeros(1))).data[0] == 0.0
        assert ad.leaky_relu(Tensor(np.array([-1.0])), 0.2).data[0] == pytest.approx(-0.2)

    def test_sigmoid_strictly_inside_unit_interval(self, rng):
        x = Tensor(rng.normal(scale=20.0, size=1000))
        out = ad.sigmoid(x).data
        assert out.min() > 0.0 and out.max() < 1.0

    def test_dispatch_and_unknown_kind(self):
        x = Tensor(np.array([1.0]))
        assert ad.activation(x, "relu").data[0] == 1.0
        with pytest.raises(ad.GraphError):
            ad.activation(x, "softplus")

    def test_leaky_alpha_bounds(self):
        with pytest.raises(ad.GraphError):
            ad.leaky_relu(Tensor(np.zeros(1)), alpha=1.5)


class TestDense:
    def test_identity_weight(self, rng):
        x = rng.normal(size=(3, 4))
        out = ad.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.array_equal(out.data, x)

    def test_hand_arithmetic(self):
        x = Tensor(np.array([[1.0, 2.0]]))
        w = Tensor(3.0 * np.eye(2))
        b = Tensor(np.array([1.0, 1.0]))
        out = ad.dense(x, w, b)
        assert np.array_equal(out.data, [[4.0, 7.0]])

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(5, 3))
        b = rng.normal(size=3)
        ref = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                ref[i, j] = sum(x[i, k] * w[k, j] for k in range(5)) + b[j]
        out = ad.dense(Tensor(x), Tensor(w), Tensor(b))
        assert np.abs(out.data - ref).max() <= 1e-12

    def test_mismatch_names_both_shapes(self, rng):
        with pytest.raises(ad.DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
            ad.dense(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))), None)


class TestConcat:
    def test_channel_ordering(self, rng):
        a = rng.normal(size=(1, 1, 2, 2, 2))
        b = rng.normal(size=(1, 1, 2, 2, 2))
        out = ad.concat_channels(Tensor(a), Tensor(b))
        assert np.array_equal(out.data[:, 0], a[:, 0])
        assert np.array_equal(out.data[:, 1], b[:, 0])

    def test_empty_concat_is_identity(self, rng):
        a = rng.normal(size=(1, 2, 2, 2, 2))
        out = ad.concat_channels(Tensor(a), Tensor(np.zeros((1, 0, 2, 2, 2))))
        assert np.array_equal(out.data, a)

    def test_gradient_is_ones_on_first_input(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 1, 2, 2, 2)))
        loss = ad.tsum(ad.concat_channels(a, b))
        grads = ad.backward(loss, {"a": a})
        assert np.array_equal(grads["a"], np.ones_like(a.data))

    def test_spatial_mismatch_raises(self):
        with pytest.raises(ad.DimensionError):
            ad.concat_channels(Tensor(np.zeros((1, 1, 2, 2, 2))),
                               Tensor(np.zeros((1, 1, 3, 2, 2))))


class TestTensorBasics:
    def test_non_finite_leaf_rejected(self):
        with pytest.raises(ad.GraphError):
            Tensor(np.array([1.0, np.nan]))
        with pytest.raises(ad.GraphError):
            Tensor(np.array([np.inf]))

    def test_deterministic_evaluation(self, rng):
        x = rng.normal(size=(2, 2, 6, 6, 6))
        k = rng.normal(size=(3, 2, 4, 4, 4))
        a = ad.conv3d(Tensor(x), Tensor(k), None, 2, 1).data
        b = ad.conv3d(Tensor(x), Tensor(k), None, 2, 1).data
        assert np.array_equal(a, b)

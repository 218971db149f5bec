"""Layer tests: operational layers, batchnorm wrapper, initialization."""

import numpy as np
import pytest

from osegnet.layers import (BatchNormLayer, Conv2DLayer, Oper2DLayer,
                            Oper2DTransposeLayer, glorot_uniform)
from osegnet.tensor import Tensor, conv2d_transpose


def rand_input(rng, shape):
    return Tensor(rng.uniform(-1, 1, shape).astype(np.float32))


class TestInit:
    def test_glorot_bound_holds_over_many_draws(self):
        rng = np.random.default_rng(0)
        limit = np.sqrt(6.0 / (20 + 30))
        w = glorot_uniform(rng, (10000,), fan_in=20, fan_out=30)
        assert w.dtype == np.float32
        assert np.abs(w).max() <= limit
        assert abs(w.mean()) < limit * 0.05  # roughly centered

    def test_same_rng_seed_gives_identical_layers(self):
        a = Oper2DLayer(np.random.default_rng(7), 3, 4, 3, 2)
        b = Oper2DLayer(np.random.default_rng(7), 3, 4, 3, 2)
        assert np.array_equal(a.kernel.data, b.kernel.data)
        assert np.array_equal(a.bias.data, b.bias.data)

    def test_bias_starts_at_zero(self):
        layer = Conv2DLayer(np.random.default_rng(1), 2, 5, 3)
        assert np.array_equal(layer.bias.data, np.zeros(5, np.float32))


class TestOper2D:
    def test_kernel_shape_scales_with_order(self):
        for q in (1, 2, 3, 5):
            layer = Oper2DLayer(np.random.default_rng(0), 3, 8, 3, q)
            assert layer.kernel.shape == (8, 3 * q, 3, 3)
            assert layer.bias.shape == (8,)

    def test_hand_example_polynomial_of_input(self):
        # 1x1 kernel, one channel, order 2, weights (1, 2), bias 0.1:
        # y = 1*0.5 + 2*0.25 + 0.1 = 1.1
        layer = Oper2DLayer(np.random.default_rng(0), 1, 1, 1, 2)
        layer.kernel.data[:] = np.array([1.0, 2.0], np.float32).reshape(1, 2, 1, 1)
        layer.bias.data[:] = 0.1
        x = Tensor(np.full((1, 1, 1, 1), 0.5, dtype=np.float32))
        out = layer(x)
        assert np.isclose(out.data.item(), 1.1, atol=1e-6)

    def test_zero_input_yields_bias(self):
        layer = Oper2DLayer(np.random.default_rng(2), 2, 3, 3, 4)
        layer.bias.data[:] = np.array([0.5, -0.25, 2.0], np.float32)
        out = layer(Tensor(np.zeros((1, 2, 4, 4), np.float32)))
        for c, b in enumerate([0.5, -0.25, 2.0]):
            assert np.allclose(out.data[0, c], b)

    def test_linear_in_weights(self):
        rng = np.random.default_rng(3)
        layer = Oper2DLayer(rng, 2, 3, 3, 3)
        x = rand_input(rng, (2, 2, 6, 6))
        base = layer(x).data.copy()
        layer.kernel.data *= 2.0
        layer.bias.data[:] = 0.0
        doubled = layer(x).data
        assert np.abs(doubled - 2.0 * base).max() < 1e-5

    def test_order_one_matches_plain_conv(self):
        rng = np.random.default_rng(4)
        for trial in range(8):
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 5))
            k = int(rng.choice([1, 3]))
            oper = Oper2DLayer(np.random.default_rng(trial), cin, cout, k, 1)
            conv = Conv2DLayer(np.random.default_rng(trial), cin, cout, k)
            x = rand_input(rng, (2, cin, 6, 6))
            assert np.abs(oper(x).data - conv(x).data).max() < 1e-6

    def test_stride_supported(self):
        layer = Oper2DLayer(np.random.default_rng(5), 1, 2, 3, 2, stride=2)
        out = layer(Tensor(np.zeros((1, 1, 8, 8), np.float32)))
        assert out.shape == (1, 2, 4, 4)

    def test_param_count_closed_form(self):
        for cin, cout, k, q in ((3, 8, 3, 2), (1, 1, 1, 1), (4, 6, 3, 5)):
            layer = Oper2DLayer(np.random.default_rng(0), cin, cout, k, q)
            total = sum(t.data.size for _, t in layer.params())
            assert total == cout * (k * k * cin * q + 1)

    def test_rejects_bad_order(self):
        with pytest.raises(ValueError):
            Oper2DLayer(np.random.default_rng(0), 1, 1, 3, 0)


class TestOper2DTranspose:
    def test_kernel_shape(self):
        layer = Oper2DTransposeLayer(np.random.default_rng(0), 4, 6, 3, 3, stride=2)
        assert layer.kernel.shape == (4 * 3, 6, 3, 3)

    def test_upsamples_by_stride(self):
        layer = Oper2DTransposeLayer(np.random.default_rng(1), 2, 3, 3, 2, stride=2)
        out = layer(Tensor(np.zeros((2, 2, 5, 5), np.float32)))
        assert out.shape == (2, 3, 10, 10)

    def test_order_one_matches_plain_transpose(self):
        rng = np.random.default_rng(6)
        for trial in range(8):
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 5))
            layer = Oper2DTransposeLayer(np.random.default_rng(trial), cin, cout, 3, 1,
                                         stride=2)
            x = rand_input(rng, (1, cin, 4, 4))
            a = layer(x).data
            b = conv2d_transpose(x, layer.kernel, layer.bias, stride=2).data
            assert np.abs(a - b).max() < 1e-6

    def test_zero_input_yields_bias(self):
        layer = Oper2DTransposeLayer(np.random.default_rng(7), 2, 2, 3, 3, stride=2)
        layer.bias.data[:] = np.array([1.0, -1.0], np.float32)
        out = layer(Tensor(np.zeros((1, 2, 3, 3), np.float32)))
        assert np.allclose(out.data[0, 0], 1.0)
        assert np.allclose(out.data[0, 1], -1.0)


class TestBatchNormLayer:
    def test_normalizes_then_scales(self):
        rng = np.random.default_rng(8)
        layer = BatchNormLayer(3)
        x = Tensor((rng.uniform(-1, 1, (4, 3, 6, 6)) * 2 + 0.5).astype(np.float32))
        out = layer(x, training=True)
        assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(out.data.var(axis=(0, 2, 3)) - 1.0).max() < 1e-3

    def test_zero_gamma_collapses_to_beta(self):
        layer = BatchNormLayer(2)
        layer.gamma.data[:] = 0.0
        layer.beta.data[:] = np.array([0.3, -0.7], np.float32)
        x = rand_input(np.random.default_rng(9), (2, 2, 4, 4))
        out = layer(x, training=True)
        assert np.allclose(out.data[:, 0], 0.3)
        assert np.allclose(out.data[:, 1], -0.7)

    def test_momentum_schedule_matches_by_hand(self):
        layer = BatchNormLayer(1, momentum=0.9)
        x = Tensor(np.full((1, 1, 2, 2), 2.0, dtype=np.float32))
        layer(x, training=True)
        assert np.isclose(layer.running_mean[0], 0.1 * 2.0)
        layer(x, training=True)
        assert np.isclose(layer.running_mean[0], 0.9 * 0.2 + 0.1 * 2.0)

    def test_inference_mode_is_deterministic_affine(self):
        layer = BatchNormLayer(1)
        layer.running_mean[:] = 1.0
        layer.running_var[:] = 4.0
        x = Tensor(np.full((1, 1, 1, 1), 5.0, dtype=np.float32))
        out = layer(x, training=False)
        assert np.isclose(out.data.item(), (5.0 - 1.0) / np.sqrt(4.0 + layer.eps), atol=1e-6)

    def test_params_and_buffers_split(self):
        layer = BatchNormLayer(4)
        names = [n for n, _ in layer.params()]
        buffer_names = [n for n, _ in layer.buffers()]
        assert names == ["bn.gamma", "bn.beta"]
        assert buffer_names == ["bn.running_mean", "bn.running_var"]

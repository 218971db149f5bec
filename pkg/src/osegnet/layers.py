"""Network layers: plain and operational convolutions, batch normalization.

An operational layer generalizes a convolution by feeding it the first Q
elementwise powers of each input channel, so every kernel tap learns the
coefficients of a degree-Q polynomial in its input. Q=1 is exactly a plain
convolution.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, batchnorm, conv2d, conv2d_transpose, power_expand


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Conv2DLayer:
    """Strided 2-D convolution with bias; kernels (Cout, Cin, k, k)."""

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int,
                 kernel_size: int, stride: int = 1, padding: str = "same"):
        k = kernel_size
        self.stride = stride
        self.padding = padding
        self.kernel = Tensor(glorot_uniform(rng, (out_channels, in_channels, k, k),
                                            fan_in=k * k * in_channels,
                                            fan_out=k * k * out_channels))
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)

    def params(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def buffers(self):
        return []


class Oper2DLayer:
    """Operational convolution: power expansion to Cin*Q channels, then conv.

    The kernel slice for source channel c, power q sits at input channel
    c*Q + q - 1, so the Q=1 kernel is laid out exactly like a plain conv's.
    """

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int,
                 kernel_size: int, q_order: int, stride: int = 1, padding: str = "same"):
        if q_order < 1:
            raise ValueError(f"q_order must be >= 1, got {q_order}")
        k = kernel_size
        self.q_order = q_order
        self.stride = stride
        self.padding = padding
        self.kernel = Tensor(glorot_uniform(rng, (out_channels, in_channels * q_order, k, k),
                                            fan_in=k * k * in_channels * q_order,
                                            fan_out=k * k * out_channels))
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return conv2d(power_expand(x, self.q_order), self.kernel, self.bias,
                      stride=self.stride, padding=self.padding)

    def params(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def buffers(self):
        return []


class Oper2DTransposeLayer:
    """Operational transposed convolution; kernels (Cin*Q, Cout, k, k)."""

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int,
                 kernel_size: int, q_order: int, stride: int = 1):
        if q_order < 1:
            raise ValueError(f"q_order must be >= 1, got {q_order}")
        k = kernel_size
        self.q_order = q_order
        self.stride = stride
        self.kernel = Tensor(glorot_uniform(rng, (in_channels * q_order, out_channels, k, k),
                                            fan_in=k * k * in_channels * q_order,
                                            fan_out=k * k * out_channels))
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return conv2d_transpose(power_expand(x, self.q_order), self.kernel, self.bias,
                                stride=self.stride)

    def params(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def buffers(self):
        return []


class BatchNormLayer:
    """Per-channel batch normalization with running statistics.

    gamma/beta are trainable; running_mean/running_var are plain arrays
    updated in place during training-mode forward passes and consumed in
    inference mode.
    """

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32))
        self.beta = Tensor(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         self.momentum, self.eps, training)

    def params(self):
        return [("bn.gamma", self.gamma), ("bn.beta", self.beta)]

    def buffers(self):
        return [("bn.running_mean", self.running_mean), ("bn.running_var", self.running_var)]

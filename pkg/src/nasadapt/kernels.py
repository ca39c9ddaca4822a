"""Reference numpy kernels executed by the measured latency provider.

Tensors are single images in (C, H, W) layout, float32.  The same functions run
a whole network end to end (``forward``) and one layer at a time, so a
composed per-layer estimate and a direct measurement exercise identical code.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


_SELU_ALPHA = 1.6732632423543772
_SELU_SCALE = 1.0507009873554805

ACTIVATION_FNS = {
    "relu": lambda x: np.maximum(x, 0),
    "relu6": lambda x: np.clip(x, 0, 6),
    "leakyrelu": lambda x: np.where(x > 0, x, x * DTYPE(0.01)),
    "elu": _elu,
    "selu": lambda x: _SELU_SCALE * np.where(x > 0, x, _SELU_ALPHA * np.expm1(np.minimum(x, 0))),
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "identity": lambda x: x,
}


def conv2d(x, weight, bias, padding: str, stride: int = 1):
    """Direct convolution as one GEMM over the k x k input windows."""
    out_c, in_c, k, _ = weight.shape
    if padding == "same":
        lo = k // 2
        hi = k - 1 - lo
        if k > 1:
            x = np.pad(x, ((0, 0), (lo, hi), (lo, hi)))
    windows = sliding_window_view(x, (k, k), axis=(1, 2))  # C, H', W', k, k
    if stride > 1:
        windows = windows[:, ::stride, ::stride]
    oh, ow = windows.shape[1:3]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(in_c * k * k, oh * ow)
    out = weight.reshape(out_c, -1) @ cols
    out += bias[:, None]
    return out.reshape(out_c, oh, ow)


def maxpool_ceil(x, stride: int):
    """Non-overlapping stride x stride max-pool; a ragged edge forms a smaller window."""
    if stride == 1:
        return x
    c, h, w = x.shape
    ph, pw = -h % stride, -w % stride
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    out = x[:, ::stride, ::stride].copy()
    for i in range(stride):
        for j in range(stride):
            if i or j:
                np.maximum(out, x[:, i::stride, j::stride], out=out)
    return out


def adaptive_avgpool(x, n: int):
    c, h, w = x.shape
    out = np.empty((c, n, n), dtype=x.dtype)
    for i in range(n):
        h0, h1 = (i * h) // n, -((-(i + 1) * h) // n)
        for j in range(n):
            w0, w1 = (j * w) // n, -((-(j + 1) * w) // n)
            out[:, i, j] = x[:, h0:h1, w0:w1].mean(axis=(1, 2))
    return out


def linear(x, weight, bias):
    return weight @ x.reshape(-1) + bias


class ConvOp:
    """Weights for one conv site, plus the norm scale/shift folded in at inference."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        shape = (cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel)
        self.weight = (rng.standard_normal(shape) * (1.0 / np.sqrt(np.prod(shape[1:])))).astype(DTYPE)
        self.bias = rng.standard_normal(cfg.out_channels).astype(DTYPE) * DTYPE(0.1)
        self.scale = np.ones((cfg.out_channels, 1, 1), dtype=DTYPE)
        self.act = ACTIVATION_FNS[cfg.activation]

    def __call__(self, x):
        cfg = self.cfg
        if cfg.op == "shortcut":
            # projection: downsample the block input, 1x1 conv, add to the main path
            main, x = x
            x = maxpool_ceil(x, cfg.stride) if cfg.downsample == "maxpool" else x[:, :: cfg.stride, :: cfg.stride]
            return main + conv2d(x, self.weight, self.bias, "same")
        stride = cfg.stride if cfg.downsample == "strided" else 1
        y = conv2d(x, self.weight, self.bias, cfg.padding, stride)
        y = self.act(y * self.scale)
        if cfg.downsample == "maxpool":
            y = maxpool_ceil(y, cfg.stride)
        return y


class PoolOp:
    def __init__(self, cfg, rng=None):
        self.cfg = cfg

    def __call__(self, x):
        return adaptive_avgpool(x, self.cfg.kernel)


class LinearOp:
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.weight = (rng.standard_normal((cfg.out_channels, cfg.in_channels)) /
                       np.sqrt(cfg.in_channels)).astype(DTYPE)
        self.bias = np.zeros(cfg.out_channels, dtype=DTYPE)

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


def build_op(cfg, rng):
    if cfg.op in ("conv", "shortcut"):
        return ConvOp(cfg, rng)
    if cfg.op == "pool":
        return PoolOp(cfg, rng)
    if cfg.op == "linear":
        return LinearOp(cfg, rng)
    raise ValueError(f"no kernel for op {cfg.op!r}")


def example_input(cfg, rng):
    """An input tensor shaped for ``cfg``; shortcuts take (main path, block input)."""
    if cfg.op == "linear":
        return rng.standard_normal(cfg.in_channels).astype(DTYPE)
    x = rng.standard_normal((cfg.in_channels, cfg.in_h, cfg.in_w)).astype(DTYPE)
    if cfg.op == "shortcut":
        h, w = cfg.output_hw()
        return (rng.standard_normal((cfg.out_channels, h, w)).astype(DTYPE), x)
    return x

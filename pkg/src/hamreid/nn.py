"""Convolution, batch norm, pooling, linear layers and activations on the tape.

Every op takes ``N×C×H×W`` batches; ``pool2d`` and ``global_pools`` also take a
single ``C×H×W`` map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor, make_op, relu, sigmoid  # noqa: F401  (re-exported activations)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


@dataclass(frozen=True)
class Conv2dParams:
    weight: Tensor  # C_out x C_in x kh x kw
    bias: Tensor | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS


@dataclass(frozen=True)
class LinearParams:
    weight: Tensor  # out x in
    bias: Tensor | None = None


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _conv2d_raw(x: Tensor, w: Tensor, stride, padding) -> Tensor:
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cin}")
    sh, sw = stride
    ph, pw = padding
    ho, wo = conv_out_size(h, kh, sh, ph), conv_out_size(wd, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output extent < 1 for input {x.shape} and kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    cols = _windows(xp, kh, kw, sh, sw, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = np.ascontiguousarray((g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
                                     .transpose(4, 5, 0, 3, 1, 2))
        if kh == kw == 1 and sh == sw == 1:
            return gcols[0, 0], gw
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += gcols[i, j]
        gx = gxp[:, :, ph : ph + h, pw : pw + wd]
        return gx, gw

    return make_op("conv2d", (x, w), np.ascontiguousarray(out), bw)


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Zero-padded cross-correlation, ``N×C_in×H×W -> N×C_out×H'×W'``."""
    out = _conv2d_raw(x, p.weight, _pair(p.stride), _pair(p.padding))
    if p.bias is not None:
        out = out + T.reshape(p.bias, (1, -1, 1, 1))
    return out


def linear(x: Tensor, p: LinearParams) -> Tensor:
    out = T.matmul(x, T.transpose(p.weight))
    if p.bias is not None:
        out = out + p.bias
    return out


def batchnorm(x: Tensor, p: BatchNormParams, train: bool, update: bool = True) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    Train mode normalizes by the biased batch variance and, when ``update`` is
    set, folds the batch mean and unbiased variance into the running stats.
    """
    c = x.shape[1]
    if p.gamma.shape != (c,):
        raise ValueError(f"batchnorm expects {p.gamma.shape[0]} channels, got {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if train:
        mu = T.mean(x, axes, keepdims=True)
        xc = x - mu
        var = T.mean(T.square(xc), axes, keepdims=True)
        if update:
            n = x.data.size // c
            unbiased = var.data.reshape(c) * (n / (n - 1) if n > 1 else 1.0)
            p.running_mean *= 1 - p.momentum
            p.running_mean += p.momentum * mu.data.reshape(c)
            p.running_var *= 1 - p.momentum
            p.running_var += p.momentum * unbiased
        xhat = xc * T.reciprocal(T.sqrt(var + p.eps))
    else:
        inv = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = (x - p.running_mean.reshape(bshape)) * inv.reshape(bshape)
    return xhat * T.reshape(p.gamma, bshape) + T.reshape(p.beta, bshape)


def _as4d(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected a C×H×W or N×C×H×W map, got shape {x.shape}")
    return x, False


def pool2d(x: Tensor, kind: str, window, stride=None) -> Tensor:
    """Max or average pooling without padding."""
    x4, squeeze = _as4d(x)
    n, c, h, w = x4.shape
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    if kh > h or kw > w:
        raise ValueError(f"pool window {(kh, kw)} larger than input {(h, w)}")
    ho, wo = conv_out_size(h, kh, sh, 0), conv_out_size(w, kw, sw, 0)
    win = _windows(x4.data, kh, kw, sh, sw, ho, wo).reshape(n, c, ho, wo, kh * kw)
    if kind == "max":
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    elif kind == "avg":
        out = win.mean(axis=-1)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")

    def bw(g):
        gx = np.zeros((n, c, h, w))
        for i in range(kh):
            for j in range(kw):
                if kind == "max":
                    contrib = g * (arg == i * kw + j)
                else:
                    contrib = g / (kh * kw)
                gx[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += contrib
        return (gx,)

    out = make_op(f"{kind}pool2d", (x4,), out, bw)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def global_pools(x: Tensor) -> tuple[Tensor, Tensor]:
    """Spatial (max, mean) per channel: ``[N×C]`` for batches, ``[C]`` for one map."""
    axes = (-2, -1)
    return T.amax(x, axes), T.mean(x, axes)


# ---------------------------------------------------------------------------
# initialization


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape)

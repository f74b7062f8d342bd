"""
Convolutional building blocks on (batch, channel, height, width) tensors.

Each function is a graph op from autodiff with a hand-written backward.
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, _result, as_tensor, concat, index, take
from .errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects (batch, channel, height, width), got {x.shape}")


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 'same' convolution with an odd square kernel and zero padding.

    Args:
        x: (B, C, H, W)
        weight: (O, C, k, k), k odd
        bias: optional (O,)

    Returns:
        (B, O, H, W)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_4d(x, "conv2d")
    out_ch, in_ch, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {k}x{k2}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, kernel expects {in_ch}")
    pad = k // 2
    B, _, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    out = np.zeros((B, H, W, out_ch), dtype=x.data.dtype)
    for di in range(k):
        for dj in range(k):
            window = xp[:, :, di:di + H, dj:dj + W]
            out += np.tensordot(window, weight.data[:, :, di, dj], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weight.data)
        g_last = g.transpose(0, 2, 3, 1)
        for di in range(k):
            for dj in range(k):
                window = xp[:, :, di:di + H, dj:dj + W]
                dw[:, :, di, dj] = np.tensordot(g, window, axes=([0, 2, 3], [0, 2, 3]))
                dxp[:, :, di:di + H, dj:dj + W] += np.tensordot(
                    g_last, weight.data[:, :, di, dj], axes=([3], [0])).transpose(0, 3, 1, 2)
        grads = [dxp[:, :, pad:pad + H, pad:pad + W], dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, "conv2d", parents, backward)


def conv_transpose2d(x, weight, bias=None) -> Tensor:
    """2x2 transpose convolution with stride 2 (exact upsampling by two).

    Args:
        x: (B, C, H, W)
        weight: (C, O, 2, 2)
        bias: optional (O,)

    Returns:
        (B, O, 2H, 2W)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_4d(x, "conv_transpose2d")
    if weight.shape[0] != x.shape[1] or weight.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2d kernel {weight.shape} does not fit input {x.shape}")
    B, _, H, W = x.shape
    out_ch = weight.shape[1]
    out = np.einsum("bchw,copq->bohpwq", x.data, weight.data).reshape(B, out_ch, 2 * H, 2 * W)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        g6 = g.reshape(B, out_ch, H, 2, W, 2)
        grads = [np.einsum("bohpwq,copq->bchw", g6, weight.data),
                 np.einsum("bchw,bohpwq->copq", x.data, g6)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, "conv_transpose2d", parents, backward)


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling with stride 2; backward routes each gradient to the first maximum."""
    x = as_tensor(x)
    _check_4d(x, "maxpool2x2")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 needs even height and width, got {H}x{W}; "
                         "reflect-pad the slices before the encoder")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, H // 2, W // 2, 4)
    winner = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, winner[..., None], g[..., None], axis=-1)
        routed = routed.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(B, C, H, W),)

    return _result(out, "maxpool2x2", (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batchnorm layer."""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batchnorm2d(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    statistics move by `momentum` (unbiased variance); in eval mode the running
    statistics are used and left untouched.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_4d(x, "batchnorm2d")
    shape = (1, -1, 1, 1)
    axes = (0, 2, 3)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        mu, var = state.running_mean, state.running_var
        count = None
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        d_gamma = np.sum(g * xhat, axis=axes)
        d_beta = np.sum(g, axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if count is None:
            dx = dxhat * inv_std.reshape(shape)
        else:
            dx = (inv_std.reshape(shape) / count) * (
                count * dxhat - dxhat.sum(axis=axes, keepdims=True)
                - xhat * np.sum(dxhat * xhat, axis=axes, keepdims=True))
        return dx, d_gamma, d_beta

    return _result(out, "batchnorm2d", (x, gamma, beta), backward)


def concat_channels(a, b) -> Tensor:
    return concat([a, b], axis=1)


def padded_size(size: int, multiple: int) -> int:
    return int(math.ceil(size / multiple) * multiple)


def reflect_indices(size: int, pad: int) -> np.ndarray:
    """Source indices of a trailing reflect pad (edge not repeated)."""
    if pad == 0:
        return np.arange(size)
    if size == 1:
        return np.zeros(size + pad, dtype=np.int64)
    return np.pad(np.arange(size), (0, pad), mode="reflect")


def pad_reflect(x, pad_h: int, pad_w: int) -> Tensor:
    """Reflect-pad the last two axes at their far end."""
    x = as_tensor(x)
    if pad_h:
        x = take(x, reflect_indices(x.shape[-2], pad_h), axis=x.ndim - 2)
    if pad_w:
        x = take(x, reflect_indices(x.shape[-1], pad_w), axis=x.ndim - 1)
    return x


def crop(x, height: int, width: int) -> Tensor:
    """Keep the leading height x width corner of the last two axes."""
    x = as_tensor(x)
    if x.shape[-2] == height and x.shape[-1] == width:
        return x
    return index(x, (slice(None),) * (x.ndim - 2) + (slice(0, height), slice(0, width)))


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))

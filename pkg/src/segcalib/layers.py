"""Convolution, ReLU, and inverted-dropout primitives.

Feature maps are ``(channels, height, width)`` float64 arrays. Convolutions
are stride-1 with zero padding and are computed by flattening each padded
receptive field into a row (``im2col``) followed by one matrix product.
The weight layout is ``(out_channels, in_channels, kh, kw)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """Flatten receptive fields: (C, H, W) -> (H*W, C*kh*kw)."""
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    return windows.transpose(1, 2, 0, 3, 4).reshape(h * w, c * kh * kw)


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, pad: int):
    """Padded stride-1 convolution. Returns (output, cols) where ``cols`` is
    the im2col matrix needed for the weight gradient."""
    out_ch, _, kh, kw = weights.shape
    h, w = x.shape[1], x.shape[2]
    cols = im2col(x, kh, kw, pad)
    out = cols @ weights.reshape(out_ch, -1).T + bias
    return out.T.reshape(out_ch, h, w), cols


def conv2d_input_grad(dout: np.ndarray, weights: np.ndarray, pad: int) -> np.ndarray:
    """Gradient w.r.t. the convolution input.

    Equals a convolution of ``dout`` with the channel-transposed, spatially
    flipped kernels, padded so the output matches the input shape.
    """
    kh, kw = weights.shape[2], weights.shape[3]
    flipped = np.ascontiguousarray(weights.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    zero_bias = np.zeros(flipped.shape[0])
    dx, _ = conv2d(dout, flipped, zero_bias, kh - 1 - pad)
    return dx


def conv2d_param_grads(cols: np.ndarray, dout: np.ndarray, weight_shape):
    """Gradients w.r.t. weights and bias from cached ``cols`` and ``dout``."""
    out_ch = dout.shape[0]
    dout_mat = dout.reshape(out_ch, -1)
    dw = (dout_mat @ cols).reshape(weight_shape)
    db = dout_mat.sum(axis=1)
    return dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(dout: np.ndarray, pre_activation: np.ndarray) -> np.ndarray:
    return dout * (pre_activation > 0.0)


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Scaled keep mask for inverted dropout: entries are 0 or 1/(1-rate),
    so the expected activation is unchanged."""
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)

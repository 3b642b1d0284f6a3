"""Differentiable numeric primitives for the weight-decoded video network.

Activations are numpy arrays shaped ``(channels, height, width)``; every
operation also accepts a stacked batch ``(n, channels, height, width)`` and
returns an array of matching rank.  Forward and backward passes follow the
dtype of their inputs: production code runs float32, the gradient-check suite
reruns the identical code in float64 to separate algorithmic error from
rounding.  All functions are pure; there is no shared mutable state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Base of the geometric frequency ladder of the time positional encoding.
PE_FREQUENCY_BASE = 1.25


@dataclass
class ConvLayerParams:
    """One convolution layer: weight ``(out_ch, in_ch, k, k)`` and bias ``(out_ch,)``."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ConfigurationError(f"weight must be (out, in, k, k); got {self.weight.shape}")
        if self.kernel not in (1, 3):
            raise ConfigurationError(f"kernel size must be 1 or 3; got {self.kernel}")
        if self.bias.shape != (self.out_channels,):
            raise ConfigurationError(
                f"bias shape {self.bias.shape} does not match {self.out_channels} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def astype(self, dtype) -> "ConvLayerParams":
        return ConvLayerParams(self.weight.astype(dtype), self.bias.astype(dtype))

    def copy(self) -> "ConvLayerParams":
        return ConvLayerParams(self.weight.copy(), self.bias.copy())


def _as_batch(x: np.ndarray):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ConfigurationError(f"expected a (C, H, W) or (B, C, H, W) array; got shape {x.shape}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold ``(B, C, H, W)`` into columns ``(C*k*k, B*H*W)`` with zero 'same' padding.

    The batch is folded into the column axis so one GEMM covers all frames.
    """
    b, c, h, w = x.shape
    if k == 1:
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, b * h * w)
    pad = (k - 1) // 2
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = x
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    # (B, C, H, W, k, k) -> (C, k, k, B, H, W) -> (C*k*k, B*H*W)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, b * h * w)


def conv2d_forward(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """2-D convolution, stride 1, zero 'same' padding: output keeps the spatial size."""
    xb, squeeze = _as_batch(x)
    b, c, h, w = xb.shape
    if c != params.in_channels:
        raise ConfigurationError(
            f"input has {c} channels but the layer expects {params.in_channels}"
        )
    k = params.kernel
    o = params.out_channels
    cols = _im2col(xb, k)
    w2 = params.weight.reshape(o, c * k * k)
    out = np.matmul(w2, cols)
    out += params.bias[:, None]
    out = np.ascontiguousarray(out.reshape(o, b, h, w).transpose(1, 0, 2, 3))
    return out[0] if squeeze else out


def conv2d_backward(x: np.ndarray, params: ConvLayerParams, grad_out: np.ndarray):
    """Gradients of ``sum(grad_out * conv2d_forward(x, params))``.

    Returns ``(grad_input, grad_weight, grad_bias)`` with the shapes of
    ``x``, ``params.weight`` and ``params.bias``.
    """
    xb, squeeze = _as_batch(x)
    gb, gsqueeze = _as_batch(grad_out)
    if squeeze != gsqueeze or gb.shape != (xb.shape[0], params.out_channels) + xb.shape[2:]:
        raise ConfigurationError(
            f"grad_out shape {np.shape(grad_out)} does not match the forward output"
        )
    if xb.shape[1] != params.in_channels:
        raise ConfigurationError(
            f"input has {xb.shape[1]} channels but the layer expects {params.in_channels}"
        )
    b, c, h, w = xb.shape
    k = params.kernel
    o = params.out_channels

    grad_bias = gb.sum(axis=(0, 2, 3))

    cols = _im2col(xb, k)
    gflat = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(o, b * h * w)
    grad_weight = np.matmul(gflat, cols.T).reshape(o, c, k, k)

    # grad wrt input: convolve grad_out with channel-transposed, 180deg-flipped kernels
    wt = params.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    flipped = ConvLayerParams(np.ascontiguousarray(wt), np.zeros(c, dtype=params.bias.dtype))
    grad_input = conv2d_forward(gb, flipped)

    if squeeze:
        grad_input = grad_input[0]
    return grad_input, grad_weight, grad_bias


def pixel_shuffle(x: np.ndarray, r_h: int, r_w: int) -> np.ndarray:
    """Rearrange ``(C*r_h*r_w, H, W)`` into ``(C, H*r_h, W*r_w)``.

    ``out[c, r_h*y + dy, r_w*x + dx] = in[c*r_h*r_w + dy*r_w + dx, y, x]``;
    the anisotropic factors support stride plans whose height and width differ.
    """
    xb, squeeze = _as_batch(x)
    b, c, h, w = xb.shape
    if c % (r_h * r_w) != 0:
        raise ConfigurationError(f"{c} channels not divisible by r_h*r_w = {r_h * r_w}")
    c_out = c // (r_h * r_w)
    out = xb.reshape(b, c_out, r_h, r_w, h, w)
    out = out.transpose(0, 1, 4, 2, 5, 3).reshape(b, c_out, h * r_h, w * r_w)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def pixel_unshuffle(x: np.ndarray, r_h: int, r_w: int) -> np.ndarray:
    """Exact inverse of :func:`pixel_shuffle`."""
    xb, squeeze = _as_batch(x)
    b, c, h, w = xb.shape
    if h % r_h != 0 or w % r_w != 0:
        raise ConfigurationError(f"spatial size {h}x{w} not divisible by factors {r_h}x{r_w}")
    out = xb.reshape(b, c, h // r_h, r_h, w // r_w, r_w)
    out = out.transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r_h * r_w, h // r_h, w // r_w)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def pixel_shuffle_backward(grad_out: np.ndarray, r_h: int, r_w: int) -> np.ndarray:
    """Adjoint of the shuffle permutation: simply the inverse index mapping."""
    return pixel_unshuffle(grad_out, r_h, r_w)


def gelu(x):
    """Exact Gaussian-CDF GELU: ``x * Phi(x)`` with Phi the standard normal CDF."""
    x = np.asarray(x)
    return (x * ndtr(x)).astype(x.dtype, copy=False)


def gelu_with_cdf(x):
    """GELU plus the CDF factor, so a later backward pass can reuse it."""
    x = np.asarray(x)
    cdf = ndtr(x).astype(x.dtype, copy=False)
    return x * cdf, cdf


def gelu_backward(x, grad_out, cdf=None):
    """Derivative ``Phi(x) + x * phi(x)`` applied to ``grad_out``.

    ``cdf`` may pass a precomputed ``Phi(x)`` from :func:`gelu_with_cdf`.
    """
    x = np.asarray(x)
    if cdf is None:
        cdf = ndtr(x)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * np.square(x, dtype=np.float64))
    return (grad_out * (cdf + x * pdf)).astype(x.dtype, copy=False)


def time_positional_encoding(
    frame_index: int,
    clip_len: int,
    dim: int,
    base: float = PE_FREQUENCY_BASE,
    dtype=np.float32,
) -> np.ndarray:
    """Sinusoidal encoding of a frame's position within its clip.

    With ``t = frame_index / clip_len``, emits the interleaved pairs
    ``[sin(base^i * pi * t), cos(base^i * pi * t)]`` for ``i = 0 .. dim/2 - 1``
    as a ``(dim, 1, 1)`` tensor, ready to feed the first network layer.
    """
    if dim % 2 != 0:
        raise ConfigurationError(f"positional encoding dim must be even; got {dim}")
    if not 0 <= frame_index < clip_len:
        raise ConfigurationError(f"frame index {frame_index} outside clip of length {clip_len}")
    t = frame_index / clip_len
    angles = (base ** np.arange(dim // 2, dtype=np.float64)) * np.pi * t
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out.astype(dtype).reshape(dim, 1, 1)

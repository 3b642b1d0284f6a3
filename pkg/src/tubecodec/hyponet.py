"""Patch-decoder network assembly and the base/unique/modulated parameter families.

The decoder network maps a time positional encoding to one RGB patch frame
through a stack of (conv -> pixel shuffle -> GELU) layers, no activation after
the last layer.  Its effective weights are never stored directly: a shared,
video-agnostic *base* parameter set is element-wise modulated by per-clip
*unique* token matrices (tiled cyclically to the weight size) and rescaled so
the modulated tensor keeps the base tensor's RMS.  Biases are never modulated.

The analytic backward pass here is the heart of the encoder: it chains exactly
through GELU, the shuffle permutation, the convolutions, the RMS-normalized
modulation and the cyclic token expansion, yielding gradients with respect to
unique tokens (and optionally base parameters for corpus pretraining).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateModulationError
from .kernels import (
    ConvLayerParams,
    conv2d_backward,
    conv2d_forward,
    gelu_backward,
    gelu_with_cdf,
    pixel_shuffle,
    pixel_shuffle_backward,
    time_positional_encoding,
)


@dataclass
class HypoNetConfig:
    """Topology of the patch decoder.

    ``strides_h`` / ``strides_w`` are the per-layer pixel-shuffle factors; their
    products are the patch height and width.  ``token_counts[l] x token_dims[l]``
    is the unique-parameter budget of layer ``l`` (0 on unmodulated layers; the
    final layer is always 0).
    """

    pe_dim: int
    channel_width: int
    kernel_sizes: tuple
    strides_h: tuple
    strides_w: tuple
    token_counts: tuple
    token_dims: tuple
    clip_len: int = 8

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.strides_h = tuple(int(s) for s in self.strides_h)
        self.strides_w = tuple(int(s) for s in self.strides_w)
        self.token_counts = tuple(int(n) for n in self.token_counts)
        self.token_dims = tuple(int(d) for d in self.token_dims)
        n = self.num_layers
        for name in ("strides_h", "strides_w", "token_counts", "token_dims"):
            if len(getattr(self, name)) != n:
                raise ConfigurationError(f"{name} must list one entry per layer ({n})")
        if self.pe_dim < 2 or self.pe_dim % 2 != 0:
            raise ConfigurationError(f"pe_dim must be even and >= 2; got {self.pe_dim}")
        if any(k not in (1, 3) for k in self.kernel_sizes):
            raise ConfigurationError(f"kernel sizes must be 1 or 3; got {self.kernel_sizes}")
        if any(s < 1 for s in self.strides_h + self.strides_w):
            raise ConfigurationError("pixel-shuffle factors must be >= 1")
        if self.clip_len < 1:
            raise ConfigurationError("clip_len must be >= 1")
        if self.token_counts[-1] != 0 or self.token_dims[-1] != 0:
            raise ConfigurationError("the final layer carries no unique tokens")
        for l, (cnt, dim) in enumerate(zip(self.token_counts, self.token_dims)):
            if (cnt == 0) != (dim == 0):
                raise ConfigurationError(f"layer {l}: token count and dim must both be 0 or both set")

    @property
    def num_layers(self) -> int:
        return len(self.kernel_sizes)

    @property
    def patch_h(self) -> int:
        return int(np.prod(self.strides_h))

    @property
    def patch_w(self) -> int:
        return int(np.prod(self.strides_w))

    def in_channels(self, layer: int) -> int:
        return self.pe_dim if layer == 0 else self.channel_width

    def conv_out_channels(self, layer: int) -> int:
        width = self.channel_width if layer < self.num_layers - 1 else 3
        return width * self.strides_h[layer] * self.strides_w[layer]

    def weight_shape(self, layer: int):
        k = self.kernel_sizes[layer]
        return (self.conv_out_channels(layer), self.in_channels(layer), k, k)

    def weight_size(self, layer: int) -> int:
        return int(np.prod(self.weight_shape(layer)))

    def modulated_layers(self):
        """Indices of layers that carry unique tokens."""
        return [l for l in range(self.num_layers) if self.token_counts[l] > 0]

    def unique_param_count(self) -> int:
        return sum(n * d for n, d in zip(self.token_counts, self.token_dims))

    def base_param_count(self) -> int:
        return sum(self.weight_size(l) + self.conv_out_channels(l) for l in range(self.num_layers))

    def to_dict(self) -> dict:
        return {
            "pe_dim": self.pe_dim,
            "channel_width": self.channel_width,
            "kernel_sizes": list(self.kernel_sizes),
            "strides_h": list(self.strides_h),
            "strides_w": list(self.strides_w),
            "token_counts": list(self.token_counts),
            "token_dims": list(self.token_dims),
            "clip_len": self.clip_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HypoNetConfig":
        return cls(
            pe_dim=int(d["pe_dim"]),
            channel_width=int(d["channel_width"]),
            kernel_sizes=tuple(d["kernel_sizes"]),
            strides_h=tuple(d["strides_h"]),
            strides_w=tuple(d["strides_w"]),
            token_counts=tuple(d["token_counts"]),
            token_dims=tuple(d["token_dims"]),
            clip_len=int(d.get("clip_len", 8)),
        )


def expand_unique(tokens: np.ndarray, target_count: int) -> np.ndarray:
    """Flatten a token matrix row-major, tile it cyclically and cut to ``target_count``."""
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        if target_count > 0:
            raise ConfigurationError("cannot expand an empty token matrix")
        return np.zeros(0, dtype=tokens.dtype)
    return np.resize(tokens.ravel(), target_count)


def expand_unique_backward(grad_expanded: np.ndarray, tokens_shape) -> np.ndarray:
    """Fold gradients of the expanded vector back onto the cyclically tiled tokens."""
    n = int(np.prod(tokens_shape))
    g = np.asarray(grad_expanded).ravel()
    pad = (-len(g)) % n
    if pad:
        g = np.concatenate([g, np.zeros(pad, dtype=g.dtype)])
    return g.reshape(-1, n).sum(axis=0).reshape(tokens_shape)


def _rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(a))))


def modulate(base_layer: ConvLayerParams, expanded: np.ndarray) -> ConvLayerParams:
    """Element-wise weight modulation followed by RMS renormalization.

    The product ``base_weight * expanded`` is rescaled so its RMS matches the
    base weight's RMS; a constant positive token vector is therefore an exact
    no-op.  The bias is copied from the base unchanged.
    """
    w = base_layer.weight
    expanded = np.asarray(expanded)
    if expanded.size != w.size:
        raise ConfigurationError(
            f"expanded vector has {expanded.size} entries, weight needs {w.size}"
        )
    m = w * expanded.reshape(w.shape).astype(w.dtype, copy=False)
    rms_base = _rms(w)
    if rms_base == 0.0:
        return ConvLayerParams(m, base_layer.bias.copy())
    rms_m = _rms(m)
    if rms_m == 0.0:
        raise DegenerateModulationError("modulated weights collapsed to zero RMS")
    scale = np.array(rms_base / rms_m, dtype=w.dtype)
    return ConvLayerParams(m * scale, base_layer.bias.copy())


def modulate_backward(
    base_layer: ConvLayerParams,
    expanded: np.ndarray,
    grad_weight: np.ndarray,
    wrt_base: bool = False,
):
    """Chain gradients on the modulated weight back to ``expanded`` (and the base).

    With ``m = b * e``, ``s = rms(b) / rms(m)`` and modulated ``w = s * m``:

        dL/dm = s*g - (g.m) * rms(b) * m / (K * rms(m)^3)
        dL/de = dL/dm * b
        dL/db = dL/dm * e + (g.m) * b / (K * rms(b) * rms(m))   [via rms(b)]

    where ``g`` is the incoming gradient and ``K`` the entry count.
    """
    b = base_layer.weight.ravel()
    e = np.asarray(expanded).ravel()
    g = np.asarray(grad_weight).ravel()
    k = b.size
    m = b * e
    rms_b = _rms(base_layer.weight)
    if rms_b == 0.0:
        grad_e = g * b
        grad_b = (g * e) if wrt_base else None
        return grad_e, grad_b
    rms_m = _rms(m)
    if rms_m == 0.0:
        raise DegenerateModulationError("modulated weights collapsed to zero RMS")
    gm = float(np.dot(g, m))
    grad_m = (rms_b / rms_m) * g - (gm * rms_b / (k * rms_m**3)) * m
    grad_e = grad_m * b
    grad_b = None
    if wrt_base:
        grad_b = grad_m * e + (gm / (k * rms_b * rms_m)) * b
    return grad_e, grad_b


@dataclass
class ParamSet:
    """Base and unique parameters plus the eagerly derived modulated layers.

    ``unique[l]`` is a ``(token_counts[l], token_dims[l])`` matrix or ``None``
    on layers without modulation.  Treat instances as immutable: build a fresh
    ParamSet whenever the tokens change so the modulated cache stays honest.
    """

    config: HypoNetConfig
    base: list
    unique: list
    modulated: list = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        if len(self.base) != cfg.num_layers or len(self.unique) != cfg.num_layers:
            raise ConfigurationError("base/unique must list one entry per layer")
        for l in range(cfg.num_layers):
            if self.base[l].weight.shape != cfg.weight_shape(l):
                raise ConfigurationError(
                    f"layer {l}: base weight {self.base[l].weight.shape} "
                    f"!= expected {cfg.weight_shape(l)}"
                )
            want = (cfg.token_counts[l], cfg.token_dims[l])
            if cfg.token_counts[l] == 0:
                if self.unique[l] is not None:
                    raise ConfigurationError(f"layer {l} carries no tokens")
            elif np.shape(self.unique[l]) != want:
                raise ConfigurationError(
                    f"layer {l}: token matrix {np.shape(self.unique[l])} != expected {want}"
                )
        if not self.modulated:
            self.modulated = [
                self.base[l]
                if self.unique[l] is None
                else modulate(self.base[l], expand_unique(self.unique[l], cfg.weight_size(l)))
                for l in range(cfg.num_layers)
            ]

    def with_unique(self, unique: list) -> "ParamSet":
        return ParamSet(self.config, self.base, unique)


def init_base(config: HypoNetConfig, rng: np.random.Generator, dtype=np.float32) -> list:
    """Uniform fan-in initialization of all base conv layers."""
    layers = []
    for l in range(config.num_layers):
        shape = config.weight_shape(l)
        bound = 1.0 / np.sqrt(shape[1] * shape[2] * shape[3])
        w = rng.uniform(-bound, bound, size=shape).astype(dtype)
        b = rng.uniform(-bound, bound, size=shape[0]).astype(dtype)
        layers.append(ConvLayerParams(w, b))
    return layers


def init_unique(config: HypoNetConfig, dtype=np.float32) -> list:
    """All-ones token matrices: modulation starts as an exact identity."""
    return [
        np.ones((n, d), dtype=dtype) if n > 0 else None
        for n, d in zip(config.token_counts, config.token_dims)
    ]


def _pe_batch(config: HypoNetConfig, frame_indices, dtype) -> np.ndarray:
    return np.stack(
        [
            time_positional_encoding(int(t), config.clip_len, config.pe_dim, dtype=dtype)
            for t in frame_indices
        ]
    )


def _forward(config: HypoNetConfig, modulated: list, frame_indices, dtype, keep_cache: bool):
    x = _pe_batch(config, frame_indices, dtype)
    cache = []
    last = config.num_layers - 1
    for l in range(config.num_layers):
        a = conv2d_forward(x, modulated[l])
        z = pixel_shuffle(a, config.strides_h[l], config.strides_w[l])
        cdf = None
        if l < last:
            out, cdf = gelu_with_cdf(z)
        else:
            out = z
        if keep_cache:
            cache.append((x, z, cdf))
        x = out
    return x, cache


def synthesize_clip(config: HypoNetConfig, params: ParamSet, frame_indices=None) -> np.ndarray:
    """Run the decoder for the given frame indices (default: the whole clip).

    Returns ``(n, 3, patch_h, patch_w)``.  Output is not clamped; clamping to
    [0, 1] happens only at the metrics / file-format boundary.
    """
    if frame_indices is None:
        frame_indices = range(config.clip_len)
    dtype = params.modulated[0].weight.dtype
    out, _ = _forward(config, params.modulated, frame_indices, dtype, keep_cache=False)
    return out


def synthesize_frame(config: HypoNetConfig, params: ParamSet, frame_index: int) -> np.ndarray:
    """Synthesize a single ``(3, patch_h, patch_w)`` patch frame."""
    return synthesize_clip(config, params, [frame_index])[0]


def _backward_layers(config: HypoNetConfig, modulated: list, cache: list, g: np.ndarray):
    """Run the layer-reversed backward pass; returns per-layer (grad_w, grad_b)."""
    grads = [None] * config.num_layers
    last = config.num_layers - 1
    for l in range(last, -1, -1):
        x_in, z, cdf = cache[l]
        if l < last:
            g = gelu_backward(z, g, cdf)
        g = pixel_shuffle_backward(g, config.strides_h[l], config.strides_w[l])
        g, gw, gb = conv2d_backward(x_in, modulated[l], g)
        grads[l] = (gw, gb)
    return grads


def clip_backward(config: HypoNetConfig, params: ParamSet, grad_output: np.ndarray, frame_indices=None):
    """Backpropagate a gradient on the synthesized clip to the modulated layers.

    Returns per-layer ``(grad_weight, grad_bias)`` pairs for the modulated
    parameters.  ``grad_output`` must match the synthesis output shape.
    """
    if frame_indices is None:
        frame_indices = range(config.clip_len)
    dtype = params.modulated[0].weight.dtype
    out, cache = _forward(config, params.modulated, frame_indices, dtype, keep_cache=True)
    if np.shape(grad_output) != out.shape:
        raise ConfigurationError(
            f"grad_output shape {np.shape(grad_output)} != synthesis shape {out.shape}"
        )
    g = np.asarray(grad_output, dtype=dtype)
    return _backward_layers(config, params.modulated, cache, g)


def modulated_grads_to_unique(config: HypoNetConfig, params: ParamSet, layer_grads, wrt_base=False):
    """Push modulated-layer gradients through modulation and token expansion.

    Returns ``(grad_tokens, grad_base)``: grad_tokens lists one matrix per
    layer (``None`` where the layer carries no tokens); grad_base lists
    ``(grad_weight, grad_bias)`` per layer when ``wrt_base`` else ``None``.
    """
    grad_tokens = [None] * config.num_layers
    grad_base = [None] * config.num_layers if wrt_base else None
    for l in range(config.num_layers):
        gw, gb = layer_grads[l]
        if params.unique[l] is None:
            if wrt_base:
                grad_base[l] = (gw, gb)
            continue
        expanded = expand_unique(params.unique[l], config.weight_size(l))
        g_exp, g_bw = modulate_backward(params.base[l], expanded, gw, wrt_base=wrt_base)
        grad_tokens[l] = expand_unique_backward(g_exp, params.unique[l].shape)
        if wrt_base:
            grad_base[l] = (g_bw.reshape(params.base[l].weight.shape), gb)
    return grad_tokens, grad_base


def clip_mse_and_gradients(
    config: HypoNetConfig,
    params: ParamSet,
    target_clip: np.ndarray,
    wrt_base: bool = False,
):
    """Mean squared error of the synthesized clip plus its exact gradients.

    Returns ``(mse, grad_tokens, grad_base)``; gradients are with respect to
    the unique token matrices and, when requested, the base weights/biases.
    """
    target = np.asarray(target_clip)
    n = target.shape[0]
    expect = (n, 3, config.patch_h, config.patch_w)
    if target.shape != expect:
        raise ConfigurationError(f"target clip shape {target.shape} != expected {expect}")
    dtype = params.modulated[0].weight.dtype
    frame_indices = range(n)
    out, cache = _forward(config, params.modulated, frame_indices, dtype, keep_cache=True)
    diff = out - target.astype(dtype, copy=False)
    mse = float(np.mean(np.square(diff)))
    g = (2.0 / diff.size) * diff
    grads = _backward_layers(config, params.modulated, cache, g)
    grad_tokens, grad_base = modulated_grads_to_unique(config, params, grads, wrt_base=wrt_base)
    return mse, grad_tokens, grad_base

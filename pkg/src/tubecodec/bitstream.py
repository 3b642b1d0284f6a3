"""Weight compression: uniform quantization, residual streams and the container.

Residual streams are closed-loop: each residual is taken against the
*dequantized* reconstruction of its reference, so per-clip error stays bounded
by the current quantizer step instead of accumulating along the sequence.
With quantization bypassed (``bits=None``) residual entries store modular
deltas of the IEEE-754 bit patterns, which makes decoding reproduce the
original float sequence exactly, bit for bit, in every mode.

Container layout (version 1, all integers little-endian; the bit-exact
interop surface):

========  ===========================================================
bytes     field
========  ===========================================================
4         magic ``TCNV``
u16       version (= 1)
u32 x4    height, width, frames, clip_len
u16 x3    pe_dim, channel_width, num_layers
per layer u8 kernel, u8 stride_h, u8 stride_w, u32 token_count, u32 token_dim
u32 x4    patch_h, patch_w, overlap_h, overlap_w
u8        fusion (0 tile, 1 crop, 2 blend)
u8        conv padding mode (0 = zero fill)
u8        trailing-clip mode (0 = repeat last frame, surplus discarded)
u8        residual mode (0 none, 1 from_first, 2 from_previous)
u32       keyframe interval (0 = never)
u8        quantization bits (4..8)
u32       number of streams
--- per stream, ordered by position id ---
u32 x2    position id, entry count
per entry u8 kind (0 full, 1 residual), then f64 scale + f64 offset per
          token-bearing layer
u32 x2^b  smoothed symbol histogram
u32       payload byte count, then the arithmetic-coded payload
--- trailer ---
u32       CRC32 over every byte after the 6-byte magic+version prefix
========  ===========================================================

Bits-per-pixel accounting counts the arithmetic payloads plus the per-stream
histograms (per-video side information); the global header and the shared
base parameters, which are installed in the decoder, are excluded.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .arith import arithmetic_decode, arithmetic_encode, build_histogram
from .errors import BitstreamError, ChecksumError, ConfigurationError
from .hyponet import HypoNetConfig

MAGIC = b"TCNV"
VERSION = 1

_MODE_CODES = {"none": 0, "from_first": 1, "from_previous": 2}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}
_FUSION_CODES = {"tile": 0, "crop": 1, "blend": 2}
_FUSION_NAMES = {v: k for k, v in _FUSION_CODES.items()}

_U32_MOD = 1 << 32


@dataclass
class QuantizedTensor:
    """Uniformly quantized tensor: ``value ~= offset + level * scale``."""

    levels: np.ndarray
    bits: int
    scale: float
    offset: float
    shape: tuple

    def __post_init__(self):
        self.shape = tuple(self.shape)


def quantize(values: np.ndarray, bits: int) -> QuantizedTensor:
    """Uniform quantization to ``2^bits`` levels spanning [min, max].

    ``scale = (max - min) / (2^bits - 1)``; a constant tensor degenerates to
    scale 0 with all levels 0.
    """
    if not 4 <= bits <= 8:
        raise ConfigurationError(f"quantization bits must be in 4..8; got {bits}")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise ConfigurationError("quantize requires a non-empty, finite tensor")
    lo = float(v.min())
    hi = float(v.max())
    nlevels = (1 << bits) - 1
    scale = (hi - lo) / nlevels
    if scale == 0.0:
        levels = np.zeros(v.shape, dtype=np.int64)
    else:
        levels = np.clip(np.rint((v - lo) / scale), 0, nlevels).astype(np.int64)
    return QuantizedTensor(levels=levels, bits=bits, scale=scale, offset=lo, shape=v.shape)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct float32 values ``offset + level * scale`` (computed in float64)."""
    return (q.offset + q.levels * q.scale).astype(np.float32)


@dataclass
class StreamEntry:
    """One clip's coded tensors.

    ``kind`` is ``"full"`` or ``"residual"``.  Tensors are QuantizedTensor in
    quantized streams; in exact streams a full entry holds raw float32 arrays
    and a residual entry holds uint32 modular bit-pattern deltas.
    """

    kind: str
    tensors: list


@dataclass
class ResidualStream:
    """Per-position sequence of full parameters and residuals against them."""

    position_id: int
    mode: str
    keyframe_interval: int | None
    bits: int | None
    entries: list = field(default_factory=list)

    @property
    def num_clips(self) -> int:
        return len(self.entries)


def _bit_delta(value: np.ndarray, ref: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(value, dtype=np.float32).view(np.uint32).astype(np.int64)
    r = np.ascontiguousarray(ref, dtype=np.float32).view(np.uint32).astype(np.int64)
    return ((a - r) % _U32_MOD).astype(np.uint32)


def _bit_apply(ref: np.ndarray, delta: np.ndarray) -> np.ndarray:
    r = np.ascontiguousarray(ref, dtype=np.float32).view(np.uint32).astype(np.int64)
    out = ((r + delta.astype(np.int64)) % _U32_MOD).astype(np.uint32)
    return out.view(np.float32)


def _is_keyframe(index: int, mode: str, keyframe_interval: int | None) -> bool:
    if index == 0 or mode == "none":
        return True
    return keyframe_interval is not None and index % keyframe_interval == 0


def encode_stream(
    sequence: list,
    mode: str,
    bits: int | None = None,
    keyframe_interval: int | None = None,
    position_id: int = 0,
) -> ResidualStream:
    """Code a per-clip sequence of float32 array lists into a residual stream.

    Entry 0 (and every keyframe) stores full parameters; other entries store
    the difference against the previous clip's reconstruction
    (``from_previous``) or the latest keyframe's reconstruction
    (``from_first``).  With quantization active the reference is always the
    dequantized reconstruction, so error never accumulates across clips.
    """
    if mode not in _MODE_CODES:
        raise ConfigurationError(f"residual mode must be one of {sorted(_MODE_CODES)}")
    if not sequence:
        raise ConfigurationError("cannot encode an empty sequence")
    shapes = [np.shape(a) for a in sequence[0]]
    for i, arrs in enumerate(sequence):
        if [np.shape(a) for a in arrs] != shapes:
            raise ConfigurationError(f"clip {i} has inconsistent tensor shapes")

    stream = ResidualStream(position_id, mode, keyframe_interval, bits)
    recon_prev = None
    recon_ref = None  # latest keyframe reconstruction (from_first reference)
    for i, arrs in enumerate(sequence):
        arrs = [np.asarray(a, dtype=np.float32) for a in arrs]
        if _is_keyframe(i, mode, keyframe_interval):
            if bits is None:
                tensors = [a.copy() for a in arrs]
                recon = [a.copy() for a in arrs]
            else:
                tensors = [quantize(a, bits) for a in arrs]
                recon = [dequantize(q) for q in tensors]
            entry = StreamEntry("full", tensors)
            recon_ref = recon
        else:
            ref = recon_prev if mode == "from_previous" else recon_ref
            if bits is None:
                tensors = [_bit_delta(a, r) for a, r in zip(arrs, ref)]
                recon = [_bit_apply(r, d) for r, d in zip(ref, tensors)]
            else:
                tensors = [quantize(a.astype(np.float64) - r, bits) for a, r in zip(arrs, ref)]
                recon = [r + dequantize(q) for r, q in zip(ref, tensors)]
            entry = StreamEntry("residual", tensors)
        recon_prev = recon
        stream.entries.append(entry)
    return stream


def decode_stream(stream: ResidualStream) -> list:
    """Reverse the encoding recursion; returns one list of float32 arrays per clip.

    Reproduces the encoder's reconstruction sequence bit for bit; with
    ``bits=None`` that sequence is the original input itself.
    """
    out = []
    recon_prev = None
    recon_ref = None
    for i, entry in enumerate(stream.entries):
        if entry.kind == "full":
            if stream.bits is None:
                recon = [np.array(a, dtype=np.float32) for a in entry.tensors]
            else:
                recon = [dequantize(q) for q in entry.tensors]
            recon_ref = recon
        elif entry.kind == "residual":
            if recon_prev is None:
                raise BitstreamError("stream starts with a residual entry")
            ref = recon_prev if stream.mode == "from_previous" else recon_ref
            if stream.bits is None:
                recon = [_bit_apply(r, d) for r, d in zip(ref, entry.tensors)]
            else:
                recon = [r + dequantize(q) for r, q in zip(ref, entry.tensors)]
        else:
            raise BitstreamError(f"unknown entry kind {entry.kind!r}")
        recon_prev = recon
        out.append([r.copy() for r in recon])
    return out


@dataclass
class ContainerMeta:
    """Everything the decoder needs besides the installed base parameters."""

    height: int
    width: int
    frames: int
    config: HypoNetConfig
    overlap_h: int = 0
    overlap_w: int = 0
    fusion: str = "tile"
    residual_mode: str = "from_previous"
    keyframe_interval: int | None = None
    bits: int = 4


def _pack_header(meta: ContainerMeta, num_streams: int) -> bytes:
    cfg = meta.config
    parts = [
        struct.pack("<4I", meta.height, meta.width, meta.frames, cfg.clip_len),
        struct.pack("<3H", cfg.pe_dim, cfg.channel_width, cfg.num_layers),
    ]
    for l in range(cfg.num_layers):
        parts.append(
            struct.pack(
                "<3B2I",
                cfg.kernel_sizes[l],
                cfg.strides_h[l],
                cfg.strides_w[l],
                cfg.token_counts[l],
                cfg.token_dims[l],
            )
        )
    parts.append(struct.pack("<4I", cfg.patch_h, cfg.patch_w, meta.overlap_h, meta.overlap_w))
    parts.append(
        struct.pack(
            "<4B",
            _FUSION_CODES[meta.fusion],
            0,  # conv padding: zero fill
            0,  # trailing clip: repeat last frame
            _MODE_CODES[meta.residual_mode],
        )
    )
    parts.append(struct.pack("<IBI", meta.keyframe_interval or 0, meta.bits, num_streams))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise BitstreamError("container truncated")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BitstreamError("container truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def _unpack_header(r: _Reader):
    height, width, frames, clip_len = r.take("<4I")
    pe_dim, channel_width, num_layers = r.take("<3H")
    kernels, sh, sw, tc, td = [], [], [], [], []
    for _ in range(num_layers):
        k, h, w, n, d = r.take("<3B2I")
        kernels.append(k)
        sh.append(h)
        sw.append(w)
        tc.append(n)
        td.append(d)
    cfg = HypoNetConfig(
        pe_dim=pe_dim,
        channel_width=channel_width,
        kernel_sizes=tuple(kernels),
        strides_h=tuple(sh),
        strides_w=tuple(sw),
        token_counts=tuple(tc),
        token_dims=tuple(td),
        clip_len=clip_len,
    )
    patch_h, patch_w, overlap_h, overlap_w = r.take("<4I")
    if (patch_h, patch_w) != (cfg.patch_h, cfg.patch_w):
        raise BitstreamError("header patch size disagrees with the stride plan")
    fusion, padding, trailing, mode = r.take("<4B")
    if padding != 0 or trailing != 0:
        raise BitstreamError("unsupported padding/trailing mode")
    if fusion not in _FUSION_NAMES or mode not in _MODE_NAMES:
        raise BitstreamError("unknown fusion or residual mode code")
    kf, bits, num_streams = r.take("<IBI")
    meta = ContainerMeta(
        height=height,
        width=width,
        frames=frames,
        config=cfg,
        overlap_h=overlap_h,
        overlap_w=overlap_w,
        fusion=_FUSION_NAMES[fusion],
        residual_mode=_MODE_NAMES[mode],
        keyframe_interval=kf or None,
        bits=bits,
    )
    return meta, num_streams


def write_container(streams: list, meta: ContainerMeta) -> bytes:
    """Serialize quantized residual streams plus metadata to container bytes."""
    if not 4 <= meta.bits <= 8:
        raise ConfigurationError("container bits must be in 4..8")
    streams = sorted(streams, key=lambda s: s.position_id)
    body = [_pack_header(meta, len(streams))]
    for s in streams:
        if s.bits != meta.bits:
            raise ConfigurationError("all streams must share the container's bit depth")
        if s.mode != meta.residual_mode:
            raise ConfigurationError("all streams must share the container's residual mode")
        body.append(struct.pack("<2I", s.position_id, len(s.entries)))
        symbols = []
        for entry in s.entries:
            body.append(struct.pack("<B", 0 if entry.kind == "full" else 1))
            for q in entry.tensors:
                body.append(struct.pack("<2d", q.scale, q.offset))
                symbols.append(q.levels.ravel())
        symbols = np.concatenate(symbols) if symbols else np.zeros(0, dtype=np.int64)
        hist = build_histogram(symbols, 1 << meta.bits)
        payload = arithmetic_encode(symbols, hist)
        body.append(hist.astype("<u4").tobytes())
        body.append(struct.pack("<I", len(payload)))
        body.append(payload)
    blob = b"".join(body)
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    return MAGIC + struct.pack("<H", VERSION) + blob + struct.pack("<I", crc)


def read_container(data: bytes):
    """Parse container bytes back into ``(streams, meta)``; verifies magic and CRC."""
    if len(data) < 10 or data[:4] != MAGIC:
        raise BitstreamError("bad magic: not a TCNV container")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise BitstreamError(f"unsupported container version {version}")
    (crc_stored,) = struct.unpack_from("<I", data, len(data) - 4)
    blob = data[6 : len(data) - 4]
    if zlib.crc32(blob) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError("container CRC mismatch")

    r = _Reader(blob)
    meta, num_streams = _unpack_header(r)
    cfg = meta.config
    shapes = [(cfg.token_counts[l], cfg.token_dims[l]) for l in cfg.modulated_layers()]
    per_entry = sum(n * d for n, d in shapes)
    streams = []
    for _ in range(num_streams):
        position_id, num_entries = r.take("<2I")
        kinds = []
        scales = []
        for _ in range(num_entries):
            (kind,) = r.take("<B")
            kinds.append("full" if kind == 0 else "residual")
            scales.append([r.take("<2d") for _ in shapes])
        hist = np.frombuffer(r.take_bytes((1 << meta.bits) * 4), dtype="<u4").astype(np.int64)
        (payload_len,) = r.take("<I")
        payload = r.take_bytes(payload_len)
        symbols = arithmetic_decode(payload, hist, num_entries * per_entry)
        stream = ResidualStream(
            position_id, meta.residual_mode, meta.keyframe_interval, meta.bits
        )
        k = 0
        for e in range(num_entries):
            tensors = []
            for (scale, offset), shape in zip(scales[e], shapes):
                n = shape[0] * shape[1]
                tensors.append(
                    QuantizedTensor(
                        levels=symbols[k : k + n].reshape(shape),
                        bits=meta.bits,
                        scale=scale,
                        offset=offset,
                        shape=shape,
                    )
                )
                k += n
            stream.entries.append(StreamEntry(kinds[e], tensors))
        streams.append(stream)
    if r.pos != len(blob):
        raise BitstreamError(f"{len(blob) - r.pos} trailing bytes after the last stream")
    return streams, meta


def container_sizes(data: bytes) -> dict:
    """Structural scan of a container: payload and histogram byte totals.

    Independent of the decode path: only the layout is walked, payloads are
    not entropy-decoded.
    """
    if len(data) < 10 or data[:4] != MAGIC:
        raise BitstreamError("bad magic: not a TCNV container")
    r = _Reader(data[6 : len(data) - 4])
    meta, num_streams = _unpack_header(r)
    n_tensors = len(meta.config.modulated_layers())
    hist_bytes = (1 << meta.bits) * 4
    payload_total = 0
    histogram_total = 0
    for _ in range(num_streams):
        _, num_entries = r.take("<2I")
        for _ in range(num_entries):
            r.take("<B")
            r.take_bytes(16 * n_tensors)
        r.take_bytes(hist_bytes)
        histogram_total += hist_bytes
        (payload_len,) = r.take("<I")
        r.take_bytes(payload_len)
        payload_total += payload_len
    return {
        "payload_bytes": payload_total,
        "histogram_bytes": histogram_total,
        "total_bytes": len(data),
    }


def compute_bpp(data: bytes, height: int, width: int, frames: int) -> float:
    """Bits per pixel: coded payloads plus histograms over ``frames * height * width``."""
    sizes = container_sizes(data)
    return 8.0 * (sizes["payload_bytes"] + sizes["histogram_bytes"]) / (frames * height * width)

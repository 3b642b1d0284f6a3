"""End-to-end codec runs: pretrain, encode, decode and rate-distortion sweeps.

Tubelet positions are independent: fitting fans out over a worker pool and
results merge deterministically by position id, so thread count never changes
the output bytes.  Encoded containers carry everything the decoder needs
except the shared base parameters, which ship separately (installed once,
excluded from bitrate).
"""
from __future__ import annotations

import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import bitstream
from .encoder import EncoderConfig, FitResult, fit_sequence_with_coherence, pretrain_base, unique_payload, payload_unique
from .errors import ConfigurationError
from .hyponet import HypoNetConfig, ParamSet, synthesize_clip
from .kernels import ConvLayerParams
from .metrics import psnr, ssim
from .tubelet import TubeletGrid, extract_tubelet, plan_grid, reassemble_video, split_into_clips
from .videoio import atomic_write_bytes

# short CLI names <-> internal residual mode names
MODE_FROM_CLI = {"none": "none", "first": "from_first", "previous": "from_previous"}
MODE_TO_CLI = {v: k for k, v in MODE_FROM_CLI.items()}

PRESETS = {
    # 3-layer decoder for 32x32 patches: the desk-scale default
    "tiny-32": {
        "hyponet": {
            "pe_dim": 8,
            "channel_width": 12,
            "kernel_sizes": [1, 3, 3],
            "strides_h": [4, 4, 2],
            "strides_w": [4, 4, 2],
            "token_counts": [4, 24, 0],
            "token_dims": [32, 48, 0],
            "clip_len": 8,
        },
        "encoder": {"iterations": 300, "finetune_iterations": 300, "learning_rate": 5e-3},
    },
    # 4-layer decoder for 320x160 patches (width x height), production scale
    "patch-320x160": {
        "hyponet": {
            "pe_dim": 14,
            "channel_width": 14,
            "kernel_sizes": [1, 3, 3, 3],
            "strides_h": [5, 4, 4, 2],
            "strides_w": [5, 4, 4, 4],
            "token_counts": [5, 56, 4, 0],
            "token_dims": [196, 252, 196, 0],
            "clip_len": 8,
        },
        "encoder": {"iterations": 500, "finetune_iterations": 500, "learning_rate": 5e-3},
    },
}


def resolve_config(source) -> tuple[HypoNetConfig, EncoderConfig]:
    """Build configs from a preset name, a JSON file path, or a parsed dict."""
    if isinstance(source, str):
        if source in PRESETS:
            source = PRESETS[source]
        else:
            try:
                with open(source) as f:
                    source = json.load(f)
            except OSError as exc:
                raise ConfigurationError(
                    f"config {source!r} is neither a preset ({', '.join(PRESETS)}) "
                    f"nor a readable JSON file"
                ) from exc
    hypo = HypoNetConfig.from_dict(source["hyponet"])
    enc = EncoderConfig.from_dict(source.get("encoder", {}))
    return hypo, enc


def save_base(path: str, config: HypoNetConfig, base: list):
    """Persist base parameters (npz: per-layer arrays plus the config as JSON)."""
    buf = io.BytesIO()
    arrays = {f"w{l}": base[l].weight for l in range(config.num_layers)}
    arrays.update({f"b{l}": base[l].bias for l in range(config.num_layers)})
    np.savez(buf, config=json.dumps(config.to_dict()), **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_base(path: str) -> tuple[HypoNetConfig, list]:
    with np.load(path, allow_pickle=False) as data:
        config = HypoNetConfig.from_dict(json.loads(str(data["config"])))
        base = [
            ConvLayerParams(data[f"w{l}"], data[f"b{l}"]) for l in range(config.num_layers)
        ]
    return config, base


def _check_base(config: HypoNetConfig, base: list):
    if len(base) != config.num_layers:
        raise ConfigurationError("base parameters do not match the network depth")
    for l in range(config.num_layers):
        if base[l].weight.shape != config.weight_shape(l):
            raise ConfigurationError(
                f"base layer {l} weight {base[l].weight.shape} does not match "
                f"the configured {config.weight_shape(l)}"
            )


def collect_tubelets(video: np.ndarray, grid: TubeletGrid, clip_len: int) -> list:
    """Per-position lists of tubelet clips covering the whole video."""
    clips = split_into_clips(video, clip_len)
    return [
        [extract_tubelet(clip, origin, grid.patch_h, grid.patch_w) for clip in clips]
        for origin in grid.origins
    ]


def pretrain_on_videos(
    videos: list,
    config: HypoNetConfig,
    epochs: int = 400,
    learning_rate: float = 1e-2,
    seed: int = 0,
    max_tubelets: int = 32,
):
    """Build a pretraining corpus from whole videos and fit shared base parameters.

    Tubelets are gathered from every grid position and clip of every video,
    then deterministically subsampled to ``max_tubelets`` to bound the
    full-batch step cost.
    """
    corpus = []
    for video in videos:
        grid = plan_grid(video.shape[2], video.shape[3], config.patch_h, config.patch_w, fusion="crop")
        for seq in collect_tubelets(video, grid, config.clip_len):
            corpus.extend(seq)
    if not corpus:
        raise ConfigurationError("no tubelets gathered for pretraining")
    if len(corpus) > max_tubelets:
        keep = np.random.default_rng(seed).choice(len(corpus), size=max_tubelets, replace=False)
        corpus = [corpus[i] for i in sorted(keep)]
    return pretrain_base(corpus, config, epochs, learning_rate, seed)


@dataclass
class EncodeStats:
    bpp: float
    seconds: float
    fit_seconds: float
    coding_seconds: float
    num_positions: int
    num_clips: int
    mean_final_mse: float
    weight_delta_l1: float


@dataclass
class DecodeStats:
    seconds: float
    frames: int
    height: int
    width: int


def fit_positions(
    tubelets_by_position: list,
    base: list,
    enc_cfg: EncoderConfig,
    hypo_cfg: HypoNetConfig,
    threads: int = 1,
) -> list:
    """Fit every tubelet position; positions are independent workers."""
    if threads <= 1:
        return [
            fit_sequence_with_coherence(seq, base, enc_cfg, hypo_cfg)
            for seq in tubelets_by_position
        ]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [
            pool.submit(fit_sequence_with_coherence, seq, base, enc_cfg, hypo_cfg)
            for seq in tubelets_by_position
        ]
        return [f.result() for f in futures]


def code_fits(
    fits: list,
    hypo_cfg: HypoNetConfig,
    meta: bitstream.ContainerMeta,
) -> bytes:
    """Quantize fitted token sequences into residual streams and pack the container."""
    streams = []
    for pos, fit in enumerate(fits):
        payload = [unique_payload(hypo_cfg, u) for u in fit.unique_per_clip]
        streams.append(
            bitstream.encode_stream(
                payload,
                meta.residual_mode,
                bits=meta.bits,
                keyframe_interval=meta.keyframe_interval,
                position_id=pos,
            )
        )
    return bitstream.write_container(streams, meta)


def encode_video(
    video: np.ndarray,
    hypo_cfg: HypoNetConfig,
    enc_cfg: EncoderConfig,
    base: list,
    bits: int = 4,
    overlap=(0, 0),
    fusion: str = "crop",
    threads: int = 1,
) -> tuple[bytes, EncodeStats]:
    """Fit unique parameters for every tubelet position and emit a coded container."""
    _check_base(hypo_cfg, base)
    t, c, h, w = video.shape
    grid = plan_grid(h, w, hypo_cfg.patch_h, hypo_cfg.patch_w, overlap[0], overlap[1], fusion)
    tubelets = collect_tubelets(video, grid, hypo_cfg.clip_len)

    t0 = time.perf_counter()
    fits = fit_positions(tubelets, base, enc_cfg, hypo_cfg, threads)
    t1 = time.perf_counter()
    meta = bitstream.ContainerMeta(
        height=h,
        width=w,
        frames=t,
        config=hypo_cfg,
        overlap_h=overlap[0],
        overlap_w=overlap[1],
        fusion=fusion,
        residual_mode=enc_cfg.residual_mode,
        keyframe_interval=enc_cfg.keyframe_interval,
        bits=bits,
    )
    blob = code_fits(fits, hypo_cfg, meta)
    t2 = time.perf_counter()
    stats = EncodeStats(
        bpp=bitstream.compute_bpp(blob, h, w, t),
        seconds=t2 - t0,
        fit_seconds=t1 - t0,
        coding_seconds=t2 - t1,
        num_positions=grid.num_patches,
        num_clips=len(tubelets[0]),
        mean_final_mse=float(np.mean([f.final_mse for f in fits])),
        weight_delta_l1=float(np.sum([f.weight_delta_l1 for f in fits])),
    )
    return blob, stats


def decode_video(container: bytes, base: list, threads: int = 1) -> tuple[np.ndarray, DecodeStats]:
    """Decode a container back into a ``(T, 3, H, W)`` video using installed base params."""
    t0 = time.perf_counter()
    streams, meta = bitstream.read_container(container)
    cfg = meta.config
    _check_base(cfg, base)
    grid = plan_grid(
        meta.height, meta.width, cfg.patch_h, cfg.patch_w, meta.overlap_h, meta.overlap_w, meta.fusion
    )
    if len(streams) != grid.num_patches:
        raise ConfigurationError(
            f"container has {len(streams)} streams but the grid has {grid.num_patches} positions"
        )

    def decode_position(stream):
        clips = []
        for arrays in bitstream.decode_stream(stream):
            params = ParamSet(cfg, base, payload_unique(cfg, arrays))
            clips.append(synthesize_clip(cfg, params))
        return clips

    streams = sorted(streams, key=lambda s: s.position_id)
    if threads <= 1:
        position_clips = [decode_position(s) for s in streams]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            position_clips = list(pool.map(decode_position, streams))
    video = reassemble_video(position_clips, grid, meta.frames, cfg.clip_len)
    stats = DecodeStats(
        seconds=time.perf_counter() - t0,
        frames=meta.frames,
        height=meta.height,
        width=meta.width,
    )
    return video, stats


@dataclass
class RDPoint:
    """One operating point of the rate-distortion surface."""

    bits: int
    lambda_temp: float
    mode: str
    psnr_db: float
    ssim: float
    bpp: float
    encode_s: float
    decode_s: float


RD_CSV_HEADER = "bits,lambda,mode,psnr_db,ssim,bpp,encode_s,decode_s"


def write_rd_csv(path: str, points: list):
    lines = [RD_CSV_HEADER]
    for p in points:
        lines.append(
            f"{p.bits},{p.lambda_temp},{MODE_TO_CLI[p.mode]},"
            f"{p.psnr_db:.4f},{p.ssim:.6f},{p.bpp:.6f},{p.encode_s:.3f},{p.decode_s:.3f}"
        )
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def rd_sweep(
    video: np.ndarray,
    hypo_cfg: HypoNetConfig,
    enc_cfg: EncoderConfig,
    base: list,
    bits_list=(4, 5, 6, 7, 8),
    lambda_list=(0.1,),
    mode_list=("from_previous",),
    overlap=(0, 0),
    fusion: str = "crop",
    threads: int = 1,
) -> list:
    """Sweep quantization depth, coherence strength and residual mode.

    The expensive per-position fit depends only on lambda, so it runs once per
    lambda; each (bits, mode) point reuses it.  A point's ``encode_s`` charges
    the full fit time plus that point's own stream-coding time, matching what
    a standalone encode at those settings would cost.
    """
    _check_base(hypo_cfg, base)
    t, c, h, w = video.shape
    grid = plan_grid(h, w, hypo_cfg.patch_h, hypo_cfg.patch_w, overlap[0], overlap[1], fusion)
    tubelets = collect_tubelets(video, grid, hypo_cfg.clip_len)

    points = []
    for lam in lambda_list:
        cfg_l = replace(enc_cfg, lambda_temp=float(lam))
        t0 = time.perf_counter()
        fits = fit_positions(tubelets, base, cfg_l, hypo_cfg, threads)
        fit_s = time.perf_counter() - t0
        for mode in mode_list:
            for bits in bits_list:
                meta = bitstream.ContainerMeta(
                    height=h,
                    width=w,
                    frames=t,
                    config=hypo_cfg,
                    overlap_h=overlap[0],
                    overlap_w=overlap[1],
                    fusion=fusion,
                    residual_mode=mode,
                    keyframe_interval=cfg_l.keyframe_interval,
                    bits=bits,
                )
                t0 = time.perf_counter()
                blob = code_fits(fits, hypo_cfg, meta)
                code_s = time.perf_counter() - t0
                decoded, dstats = decode_video(blob, base, threads)
                points.append(
                    RDPoint(
                        bits=bits,
                        lambda_temp=float(lam),
                        mode=mode,
                        psnr_db=psnr(video, decoded),
                        ssim=ssim(video, decoded),
                        bpp=bitstream.compute_bpp(blob, h, w, t),
                        encode_s=fit_s + code_s,
                        decode_s=dstats.seconds,
                    )
                )
    return points

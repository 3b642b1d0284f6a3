"""HTTP service exposing the codec: encode, decode, eval, sweeps and pretraining.

The service is the single place the heavy pipeline runs; clients (including
the bundled CLI) talk JSON.  Video, base-parameter and container files are
referenced by server-local paths, so the service pairs with clients that share
its filesystem; all outputs are written atomically.
"""
from __future__ import annotations

import time

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__, bitstream, pipeline
from .errors import CodecError
from .metrics import psnr, ssim
from .synthetic import PATTERNS, SyntheticSpec, generate_synthetic
from .videoio import atomic_write_bytes, read_video, write_video

app = FastAPI(title="tubecodec", version=__version__)


@app.exception_handler(CodecError)
async def codec_error_handler(request, exc: CodecError):
    return JSONResponse(status_code=400, content={"detail": f"{type(exc).__name__}: {exc}"})


@app.exception_handler(FileNotFoundError)
async def missing_file_handler(request, exc: FileNotFoundError):
    return JSONResponse(status_code=400, content={"detail": f"file not found: {exc.filename}"})


class HealthResponse(BaseModel):
    status: str
    version: str


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


class SynthRequest(BaseModel):
    pattern: str = Field("moving_sinusoid", description=f"one of {PATTERNS}")
    speed: float = 1.0
    frames: int = 32
    height: int = 64
    width: int = 64
    seed: int = 0
    out: str


class SynthResponse(BaseModel):
    path: str
    frames: int
    height: int
    width: int


@app.post("/synth", response_model=SynthResponse)
def synth(req: SynthRequest) -> SynthResponse:
    spec = SyntheticSpec(req.pattern, req.speed, req.frames, req.height, req.width, req.seed)
    video = generate_synthetic(spec)
    write_video(req.out, video)
    return SynthResponse(path=req.out, frames=req.frames, height=req.height, width=req.width)


class PretrainRequest(BaseModel):
    videos: list[str]
    config: str = "tiny-32"
    epochs: int = 400
    learning_rate: float = 1e-2
    seed: int = 0
    max_tubelets: int = 32
    out: str


class PretrainResponse(BaseModel):
    base: str
    initial_mse: float
    final_mse: float
    seconds: float


@app.post("/pretrain", response_model=PretrainResponse)
def pretrain(req: PretrainRequest) -> PretrainResponse:
    hypo, _ = pipeline.resolve_config(req.config)
    t0 = time.perf_counter()
    videos = [read_video(p) for p in req.videos]
    result = pipeline.pretrain_on_videos(
        videos, hypo, req.epochs, req.learning_rate, req.seed, req.max_tubelets
    )
    pipeline.save_base(req.out, hypo, result.base)
    trace = result.loss_trace
    return PretrainResponse(
        base=req.out,
        initial_mse=float(trace[0]) if len(trace) else float("nan"),
        final_mse=float(trace[-1]) if len(trace) else float("nan"),
        seconds=time.perf_counter() - t0,
    )


class EncodeRequest(BaseModel):
    video: str
    config: str = "tiny-32"
    base: str
    out: str
    bits: int = Field(4, ge=4, le=8)
    lambda_temp: float = 0.1
    residual_mode: str = Field("previous", description="none | first | previous")
    keyframe_interval: int | None = None
    overlap: tuple[int, int] = (0, 0)
    fusion: str = "crop"
    seed: int = 0
    threads: int = 1
    iterations: int | None = None
    finetune_iterations: int | None = None
    learning_rate: float | None = None


class EncodeResponse(BaseModel):
    container: str
    bpp: float
    encode_s: float
    num_positions: int
    num_clips: int
    mean_final_mse: float


def _encoder_overrides(req, enc):
    from dataclasses import replace

    updates = {
        "lambda_temp": req.lambda_temp,
        "residual_mode": pipeline.MODE_FROM_CLI.get(req.residual_mode, req.residual_mode),
        "keyframe_interval": req.keyframe_interval,
        "seed": req.seed,
    }
    if req.iterations is not None:
        updates["iterations"] = req.iterations
    if req.finetune_iterations is not None:
        updates["finetune_iterations"] = req.finetune_iterations
    if req.learning_rate is not None:
        updates["learning_rate"] = req.learning_rate
    return replace(enc, **updates)


@app.post("/encode", response_model=EncodeResponse)
def encode(req: EncodeRequest) -> EncodeResponse:
    hypo, enc = pipeline.resolve_config(req.config)
    enc = _encoder_overrides(req, enc)
    base_cfg, base = pipeline.load_base(req.base)
    video = read_video(req.video)
    blob, stats = pipeline.encode_video(
        video,
        hypo,
        enc,
        base,
        bits=req.bits,
        overlap=tuple(req.overlap),
        fusion=req.fusion,
        threads=req.threads,
    )
    atomic_write_bytes(req.out, blob)
    return EncodeResponse(
        container=req.out,
        bpp=stats.bpp,
        encode_s=stats.seconds,
        num_positions=stats.num_positions,
        num_clips=stats.num_clips,
        mean_final_mse=stats.mean_final_mse,
    )


class DecodeRequest(BaseModel):
    container: str
    base: str
    out: str
    threads: int = 1


class DecodeResponse(BaseModel):
    video: str
    decode_s: float
    frames: int
    height: int
    width: int


@app.post("/decode", response_model=DecodeResponse)
def decode(req: DecodeRequest) -> DecodeResponse:
    _, base = pipeline.load_base(req.base)
    with open(req.container, "rb") as f:
        blob = f.read()
    video, stats = pipeline.decode_video(blob, base, threads=req.threads)
    write_video(req.out, video)
    return DecodeResponse(
        video=req.out,
        decode_s=stats.seconds,
        frames=stats.frames,
        height=stats.height,
        width=stats.width,
    )


class EvalRequest(BaseModel):
    reference: str
    candidate: str
    container: str | None = None


class EvalResponse(BaseModel):
    psnr_db: float
    ssim: float
    bpp: float | None = None


@app.post("/eval", response_model=EvalResponse)
def evaluate(req: EvalRequest) -> EvalResponse:
    ref = read_video(req.reference)
    cand = read_video(req.candidate)
    bpp = None
    if req.container is not None:
        with open(req.container, "rb") as f:
            blob = f.read()
        t, _, h, w = ref.shape
        bpp = bitstream.compute_bpp(blob, h, w, t)
    return EvalResponse(psnr_db=psnr(ref, cand), ssim=ssim(ref, cand), bpp=bpp)


class SweepRequest(BaseModel):
    video: str
    config: str = "tiny-32"
    base: str
    out: str
    bits: list[int] = [4, 5, 6, 7, 8]
    lambdas: list[float] = [0.1]
    modes: list[str] = ["previous"]
    overlap: tuple[int, int] = (0, 0)
    fusion: str = "crop"
    seed: int = 0
    threads: int = 1
    iterations: int | None = None
    finetune_iterations: int | None = None
    learning_rate: float | None = None


class RDPointModel(BaseModel):
    bits: int
    lambda_temp: float
    mode: str
    psnr_db: float
    ssim: float
    bpp: float
    encode_s: float
    decode_s: float


class SweepResponse(BaseModel):
    csv: str
    points: list[RDPointModel]


@app.post("/rd_sweep", response_model=SweepResponse)
def rd_sweep(req: SweepRequest) -> SweepResponse:
    from dataclasses import replace

    hypo, enc = pipeline.resolve_config(req.config)
    updates = {"seed": req.seed}
    if req.iterations is not None:
        updates["iterations"] = req.iterations
    if req.finetune_iterations is not None:
        updates["finetune_iterations"] = req.finetune_iterations
    if req.learning_rate is not None:
        updates["learning_rate"] = req.learning_rate
    enc = replace(enc, **updates)
    _, base = pipeline.load_base(req.base)
    video = read_video(req.video)
    modes = [pipeline.MODE_FROM_CLI.get(m, m) for m in req.modes]
    points = pipeline.rd_sweep(
        video,
        hypo,
        enc,
        base,
        bits_list=tuple(req.bits),
        lambda_list=tuple(req.lambdas),
        mode_list=tuple(modes),
        overlap=tuple(req.overlap),
        fusion=req.fusion,
        threads=req.threads,
    )
    pipeline.write_rd_csv(req.out, points)
    return SweepResponse(
        csv=req.out,
        points=[
            RDPointModel(
                bits=p.bits,
                lambda_temp=p.lambda_temp,
                mode=pipeline.MODE_TO_CLI[p.mode],
                psnr_db=p.psnr_db,
                ssim=p.ssim,
                bpp=p.bpp,
                encode_s=p.encode_s,
                decode_s=p.decode_s,
            )
            for p in points
        ],
    )

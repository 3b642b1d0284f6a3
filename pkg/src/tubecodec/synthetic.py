"""Deterministic synthetic test videos: desk-scale stand-ins for real corpora."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

PATTERNS = ("moving_sinusoid", "drifting_gradient", "bouncing_box", "static")


@dataclass
class SyntheticSpec:
    """Recipe for one synthetic video; identical specs generate identical pixels."""

    pattern: str = "moving_sinusoid"
    speed: float = 1.0
    frames: int = 32
    height: int = 64
    width: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigurationError(f"pattern must be one of {PATTERNS}; got {self.pattern!r}")
        if self.frames < 1 or self.height < 1 or self.width < 1:
            raise ConfigurationError("frames/height/width must be >= 1")


def _plaid(spec: SyntheticSpec, rng: np.random.Generator, speed: float) -> np.ndarray:
    y, x = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    wl_x = rng.uniform(0.4, 0.9) * spec.width
    wl_y = rng.uniform(0.5, 1.2) * spec.height
    phases = rng.uniform(0, 2 * np.pi, size=3)
    amp = rng.uniform(0.3, 0.45)
    out = np.empty((spec.frames, 3, spec.height, spec.width), dtype=np.float32)
    for t in range(spec.frames):
        arg = 2 * np.pi * ((x - speed * t) / wl_x + y / wl_y)
        for c in range(3):
            out[t, c] = 0.5 + amp * np.sin(arg + phases[c])
    return np.clip(out, 0.0, 1.0, out=out)


def _drifting_gradient(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    # triangle wave keeps the drifting ramp continuous at the wrap point
    y, x = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    slopes = rng.uniform(0.5, 1.5, size=3)
    offsets = rng.uniform(0, 1, size=3)
    out = np.empty((spec.frames, 3, spec.height, spec.width), dtype=np.float32)
    for t in range(spec.frames):
        u = (x + spec.speed * t) / spec.width + 0.5 * y / spec.height
        for c in range(3):
            phase = slopes[c] * u + offsets[c]
            out[t, c] = np.abs(2.0 * (phase % 1.0) - 1.0)
    return out


def _bouncing_box(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    bg = rng.uniform(0.1, 0.4, size=3)
    fg = rng.uniform(0.6, 0.95, size=3)
    bh = max(2, spec.height // 4)
    bw = max(2, spec.width // 4)
    span_y = max(spec.height - bh, 1)
    span_x = max(spec.width - bw, 1)
    p0 = rng.uniform(0, [span_y, span_x])
    angle = rng.uniform(0, 2 * np.pi)
    vel = spec.speed * np.array([np.sin(angle), np.cos(angle)])

    def fold(u: float, span: float) -> int:
        period = 2.0 * span
        u = u % period
        return int(round(period - u if u > span else u))

    out = np.empty((spec.frames, 3, spec.height, spec.width), dtype=np.float32)
    for t in range(spec.frames):
        frame = np.broadcast_to(
            np.asarray(bg, dtype=np.float32)[:, None, None], (3, spec.height, spec.width)
        ).copy()
        by = fold(p0[0] + vel[0] * t, span_y)
        bx = fold(p0[1] + vel[1] * t, span_x)
        frame[:, by : by + bh, bx : bx + bw] = np.asarray(fg, dtype=np.float32)[:, None, None]
        out[t] = frame
    return out


def generate_synthetic(spec: SyntheticSpec) -> np.ndarray:
    """Render the spec into a float32 ``(T, 3, H, W)`` video in [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    if spec.pattern == "moving_sinusoid":
        return _plaid(spec, rng, spec.speed)
    if spec.pattern == "static":
        return _plaid(spec, rng, 0.0)
    if spec.pattern == "drifting_gradient":
        return _drifting_gradient(spec, rng)
    return _bouncing_box(spec, rng)

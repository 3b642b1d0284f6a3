"""Video file I/O: binary PPM frame sequences and raw planar RGB8 with a JSON sidecar.

In-memory videos are float32 ``(T, 3, H, W)`` arrays in [0, 1]; on disk each
sample is one byte, ``value = byte / 255`` on read and
``byte = round(clamp(value) * 255)`` on write, which round-trips every byte
exactly.  A path ending in ``.rgb`` selects the raw format (frame-major, one
R/G/B plane per frame, with ``<path>.json`` carrying frames/height/width/fps);
any other path is treated as a directory of ``frame_NNNNNN.ppm`` files.

All writers go through write-to-temp-then-rename, so a crashed run never
leaves a partial output file.
"""
from __future__ import annotations

import json
import os
import re
import tempfile

import numpy as np

from .errors import BitstreamError, ConfigurationError

_FRAME_RE = re.compile(r"frame_(\d+)\.ppm$")


def atomic_write_bytes(path: str, data: bytes):
    """Write a file atomically: temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def video_to_bytes(video: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and convert to uint8 with round-to-nearest."""
    if video.ndim != 4 or video.shape[1] != 3:
        raise ConfigurationError(f"video must be (T, 3, H, W); got {video.shape}")
    return np.rint(np.clip(video, 0.0, 1.0) * 255.0).astype(np.uint8)


def bytes_to_video(data: np.ndarray) -> np.ndarray:
    """Inverse byte conversion: float32 values ``byte / 255``."""
    return data.astype(np.float32) / np.float32(255.0)


def write_ppm(path: str, frame: np.ndarray):
    """Write one ``(3, H, W)`` frame as a binary P6 PPM with maxval 255."""
    data = video_to_bytes(frame[None])[0]
    h, w = data.shape[1:]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + data.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary P6 PPM (maxval 255) into a float32 ``(3, H, W)`` frame."""
    with open(path, "rb") as f:
        blob = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            nl = blob.find(b"\n", pos)
            pos = len(blob) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise BitstreamError(f"{path}: malformed PPM header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise BitstreamError(f"{path}: not a binary P6 PPM")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise BitstreamError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise BitstreamError(f"{path}: only maxval 255 is supported")
    need = w * h * 3
    raw = blob[pos : pos + need]
    if len(raw) < need:
        raise BitstreamError(f"{path}: truncated PPM payload")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return bytes_to_video(pixels)


def _write_ppm_sequence(directory: str, video: np.ndarray):
    os.makedirs(directory, exist_ok=True)
    for t in range(video.shape[0]):
        write_ppm(os.path.join(directory, f"frame_{t:06d}.ppm"), video[t])


def _read_ppm_sequence(directory: str) -> np.ndarray:
    names = sorted(
        (int(m.group(1)), m.string) for m in map(_FRAME_RE.search, os.listdir(directory)) if m
    )
    if not names:
        raise BitstreamError(f"{directory}: no frame_NNNNNN.ppm files found")
    frames = [read_ppm(os.path.join(directory, name)) for _, name in names]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise BitstreamError(f"{directory}: frames disagree on size: {sorted(shapes)}")
    return np.stack(frames)


def write_video(path: str, video: np.ndarray, fps: float = 30.0):
    """Write a video: ``.rgb`` raw planar + sidecar, otherwise a PPM directory."""
    if path.endswith(".rgb"):
        data = video_to_bytes(video)
        atomic_write_bytes(path, data.tobytes())
        t, _, h, w = video.shape
        sidecar = {"frames": t, "height": h, "width": w, "fps": fps}
        atomic_write_bytes(path + ".json", json.dumps(sidecar, indent=2).encode("ascii"))
    else:
        _write_ppm_sequence(path, video)


def read_video(path: str) -> np.ndarray:
    """Read a ``.rgb`` raw file (via its sidecar) or a PPM frame directory."""
    if path.endswith(".rgb"):
        try:
            with open(path + ".json") as f:
                meta = json.load(f)
            t, h, w = int(meta["frames"]), int(meta["height"]), int(meta["width"])
        except (OSError, KeyError, ValueError) as exc:
            raise BitstreamError(f"{path}.json: missing or malformed sidecar") from exc
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) != t * 3 * h * w:
            raise BitstreamError(
                f"{path}: expected {t * 3 * h * w} bytes for {t}x3x{h}x{w}, found {len(raw)}"
            )
        return bytes_to_video(np.frombuffer(raw, dtype=np.uint8).reshape(t, 3, h, w))
    if os.path.isdir(path):
        return _read_ppm_sequence(path)
    raise BitstreamError(f"{path}: not a .rgb file or a PPM frame directory")

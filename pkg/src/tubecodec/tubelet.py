"""Patch-tubelet grids: planning, extraction and fusing decoded patches back.

Videos are numpy arrays shaped ``(T, 3, H, W)`` with values in [0, 1].  A grid
covers every pixel with fixed-size patches; when patches overlap, decoded
outputs are fused either by cropping (each pixel owned by exactly one patch)
or by blending (normalized linear-ramp weights).  Planning and extraction are
pure; fusion writes disjoint regions in crop/tile mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

FUSION_MODES = ("tile", "crop", "blend")


def _axis_origins(dim: int, patch: int, overlap: int) -> list:
    """Origins along one axis: stride ``patch - overlap``, last origin clamped."""
    if patch > dim:
        raise ConfigurationError(f"patch ({patch}) larger than frame ({dim})")
    if not 0 <= overlap < patch:
        raise ConfigurationError(f"overlap must satisfy 0 <= overlap < patch; got {overlap}")
    stride = patch - overlap
    n = -(-(dim - patch) // stride) + 1  # ceil division
    return [min(i * stride, dim - patch) for i in range(n)]


@dataclass
class TubeletGrid:
    """Placement of patches over an ``H x W`` frame plus the fusion policy."""

    height: int
    width: int
    patch_h: int
    patch_w: int
    overlap_h: int = 0
    overlap_w: int = 0
    fusion: str = "tile"

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigurationError(f"fusion must be one of {FUSION_MODES}; got {self.fusion!r}")
        if self.fusion == "tile":
            if self.overlap_h or self.overlap_w:
                raise ConfigurationError("tile fusion requires zero overlap")
            if self.height % self.patch_h or self.width % self.patch_w:
                raise ConfigurationError(
                    f"tile fusion requires the patch ({self.patch_h}x{self.patch_w}) to divide "
                    f"the frame ({self.height}x{self.width}); use crop or blend otherwise"
                )
        self.origins_y = _axis_origins(self.height, self.patch_h, self.overlap_h)
        self.origins_x = _axis_origins(self.width, self.patch_w, self.overlap_w)

    @property
    def origins(self) -> list:
        """All (y, x) patch origins, row-major."""
        return [(y, x) for y in self.origins_y for x in self.origins_x]

    @property
    def num_patches(self) -> int:
        return len(self.origins_y) * len(self.origins_x)


def plan_grid(
    height: int,
    width: int,
    patch_h: int,
    patch_w: int,
    overlap_h: int = 0,
    overlap_w: int = 0,
    fusion: str = "tile",
) -> TubeletGrid:
    """Plan a covering grid of ``patch_h x patch_w`` patches with the given overlap."""
    return TubeletGrid(height, width, patch_h, patch_w, overlap_h, overlap_w, fusion)


def extract_tubelet(clip: np.ndarray, origin, patch_h: int, patch_w: int) -> np.ndarray:
    """Copy the ``(N, 3, patch_h, patch_w)`` sub-volume at ``origin = (y, x)``."""
    y, x = origin
    if clip.ndim != 4:
        raise ConfigurationError(f"clip must be (N, 3, H, W); got shape {clip.shape}")
    if y < 0 or x < 0 or y + patch_h > clip.shape[2] or x + patch_w > clip.shape[3]:
        raise ConfigurationError(f"origin {origin} puts the patch outside the clip")
    return np.ascontiguousarray(clip[:, :, y : y + patch_h, x : x + patch_w])


def split_into_clips(video: np.ndarray, clip_len: int) -> list:
    """Split ``(T, 3, H, W)`` into ceil(T / clip_len) clips of exactly ``clip_len`` frames.

    A trailing partial clip is padded by repeating the last frame; decoded
    surplus frames are discarded on reassembly.
    """
    t = video.shape[0]
    if t < 1:
        raise ConfigurationError("video must contain at least one frame")
    clips = []
    for start in range(0, t, clip_len):
        chunk = video[start : start + clip_len]
        if chunk.shape[0] < clip_len:
            pad = np.repeat(chunk[-1:], clip_len - chunk.shape[0], axis=0)
            chunk = np.concatenate([chunk, pad], axis=0)
        clips.append(chunk)
    return clips


def _crop_spans(origins: list, patch: int, dim: int) -> list:
    """Per-patch owned interval [start, stop) along one axis.

    For each adjacent pair the earlier patch keeps ceil(o/2) pixels of their
    overlap and the later keeps floor(o/2); first/last extend to the borders.
    """
    n = len(origins)
    starts = [0]
    for i in range(1, n):
        o = origins[i - 1] + patch - origins[i]
        starts.append(origins[i] + (o + 1) // 2)
    stops = starts[1:] + [dim]
    return list(zip(starts, stops))


def _check_patches(patches, grid: TubeletGrid):
    if len(patches) != grid.num_patches:
        raise ConfigurationError(
            f"got {len(patches)} patches for a grid of {grid.num_patches} origins"
        )
    want = (3, grid.patch_h, grid.patch_w)
    for i, p in enumerate(patches):
        if p.shape != want:
            raise ConfigurationError(f"patch {i} has shape {p.shape}; expected {want}")


def fuse_crop(patches, grid: TubeletGrid) -> np.ndarray:
    """Reassemble one frame, each pixel taken from exactly one patch.

    ``patches`` lists one ``(3, patch_h, patch_w)`` array per grid origin in
    row-major origin order.  With zero overlap this is plain tiling.
    """
    _check_patches(patches, grid)
    spans_y = _crop_spans(grid.origins_y, grid.patch_h, grid.height)
    spans_x = _crop_spans(grid.origins_x, grid.patch_w, grid.width)
    out = np.empty((3, grid.height, grid.width), dtype=patches[0].dtype)
    idx = 0
    for oy, (y0, y1) in zip(grid.origins_y, spans_y):
        for ox, (x0, x1) in zip(grid.origins_x, spans_x):
            out[:, y0:y1, x0:x1] = patches[idx][:, y0 - oy : y1 - oy, x0 - ox : x1 - ox]
            idx += 1
    return out


def _ramp_weights(origins: list, patch: int) -> list:
    """Per-patch 1-D blend weights: linear 0..1 ramps across overlapped margins."""
    n = len(origins)
    weights = []
    for i in range(n):
        w = np.ones(patch, dtype=np.float64)
        if i > 0:
            o = origins[i - 1] + patch - origins[i]
            if o > 0:
                w[:o] = np.arange(1, o + 1, dtype=np.float64) / (o + 1)
        if i < n - 1:
            o = origins[i] + patch - origins[i + 1]
            if o > 0:
                w[patch - o :] = np.minimum(
                    w[patch - o :], np.arange(o, 0, -1, dtype=np.float64) / (o + 1)
                )
        weights.append(w)
    return weights


def fuse_blend(patches, grid: TubeletGrid) -> np.ndarray:
    """Reassemble one frame by normalized weighted averaging over overlaps.

    Each patch's 2-D weight is the product of its per-axis ramps; the output
    pixel is sum(w_i * p_i) / sum(w_i), so the normalized weights form a
    partition of unity at every pixel.
    """
    _check_patches(patches, grid)
    wy = _ramp_weights(grid.origins_y, grid.patch_h)
    wx = _ramp_weights(grid.origins_x, grid.patch_w)
    acc = np.zeros((3, grid.height, grid.width), dtype=np.float64)
    norm = np.zeros((grid.height, grid.width), dtype=np.float64)
    idx = 0
    for iy, oy in enumerate(grid.origins_y):
        for ix, ox in enumerate(grid.origins_x):
            w2 = wy[iy][:, None] * wx[ix][None, :]
            acc[:, oy : oy + grid.patch_h, ox : ox + grid.patch_w] += patches[idx] * w2
            norm[oy : oy + grid.patch_h, ox : ox + grid.patch_w] += w2
            idx += 1
    if not np.all(norm > 0):
        raise AssertionError("blend weights vanished at some pixel; grid coverage is broken")
    return (acc / norm).astype(patches[0].dtype)


def fuse_frame(patches, grid: TubeletGrid) -> np.ndarray:
    """Dispatch on the grid's fusion mode (tile behaves as crop with no overlap)."""
    if grid.fusion == "blend":
        return fuse_blend(patches, grid)
    return fuse_crop(patches, grid)


def reassemble_video(position_clips, grid: TubeletGrid, total_frames: int, clip_len: int) -> np.ndarray:
    """Fuse per-position decoded clips into a ``(T, 3, H, W)`` video in [0, 1].

    ``position_clips[p]`` lists the decoded ``(clip_len, 3, patch_h, patch_w)``
    clips of grid position ``p`` in time order; every position must supply
    ceil(T / clip_len) clips.  Surplus frames of the final padded clip are
    discarded and the result is clamped to [0, 1].
    """
    num_clips = -(-total_frames // clip_len)
    if len(position_clips) != grid.num_patches:
        raise ConfigurationError(
            f"expected clips for {grid.num_patches} positions; got {len(position_clips)}"
        )
    for p, clips in enumerate(position_clips):
        if len(clips) != num_clips:
            raise ConfigurationError(
                f"position {p} supplies {len(clips)} clips; expected {num_clips}"
            )
    frames = np.empty((total_frames, 3, grid.height, grid.width), dtype=np.float32)
    for t in range(total_frames):
        ci, fi = divmod(t, clip_len)
        patches = [position_clips[p][ci][fi] for p in range(grid.num_patches)]
        frames[t] = fuse_frame(patches, grid)
    np.clip(frames, 0.0, 1.0, out=frames)
    return frames

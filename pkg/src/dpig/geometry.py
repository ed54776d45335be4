"""Keypoint heatmaps, coarse pose masks and body regions-of-interest.

Normalized coordinates map onto pixel centres with the align-corners
convention: x = -1 is the centre of column 0, x = +1 the centre of column
W - 1 (same for y and rows).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import NUM_KEYPOINTS, NUM_ROIS, PoseAnnotation

# 17 limbs of the 18-keypoint skeleton.
SKELETON = (
    (1, 2), (2, 3), (3, 4),
    (1, 5), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10),
    (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)

ROI_NAMES = ("head", "torso", "r_arm", "l_arm", "r_leg", "l_leg", "whole")
ROI_GROUPS = (
    (0, 1, 14, 15, 16, 17),
    (1, 2, 5, 8, 11),
    (2, 3, 4),
    (5, 6, 7),
    (8, 9, 10),
    (11, 12, 13),
    tuple(range(NUM_KEYPOINTS)),
)


def to_pixels(coords: np.ndarray, h: int, w: int) -> np.ndarray:
    """Normalized (x, y) -> pixel (u, v) = (column, row), as floats."""
    coords = np.asarray(coords, dtype=np.float64)
    u = (coords[..., 0] + 1.0) * 0.5 * (w - 1)
    v = (coords[..., 1] + 1.0) * 0.5 * (h - 1)
    return np.stack([u, v], axis=-1)


def to_normalized(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    x = 2.0 * pixels[..., 0] / max(w - 1, 1) - 1.0
    y = 2.0 * pixels[..., 1] / max(h - 1, 1) - 1.0
    return np.stack([x, y], axis=-1)


def render_heatmaps(p: PoseAnnotation, h: int, w: int, sigma: float) -> np.ndarray:
    """18 x H x W unnormalized Gaussians peaking at 1; invisible channels are zero."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    maps = np.zeros((NUM_KEYPOINTS, h, w), dtype=np.float64)
    px = to_pixels(p.coords, h, w)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    for i in np.flatnonzero(p.visibility):
        u, v = px[i]
        maps[i] = np.exp(-((cols - u) ** 2 + (rows - v) ** 2) / (2.0 * sigma ** 2))
    return maps


def _segment_distance(rows, cols, a, b):
    """Distance from every pixel centre to the segment a-b (points given as (u, v))."""
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(b, dtype=np.float64) - a
    denom = float(d @ d)
    pu, pv = cols - a[0], rows - a[1]
    if denom == 0.0:
        t = 0.0
    else:
        t = np.clip((pu * d[0] + pv * d[1]) / denom, 0.0, 1.0)
    du, dv = pu - t * d[0], pv - t * d[1]
    return np.sqrt(du * du + dv * dv)


# Absorbs round-off from the normalized <-> pixel conversion on disk boundaries.
_TOL = 1e-9


def make_pose_mask(p: PoseAnnotation, h: int, w: int, radius: int) -> np.ndarray:
    """Binary mask: disks around visible keypoints plus thickened skeleton limbs."""
    if radius < 1:
        raise ValueError("radius must be at least 1")
    mask = np.zeros((h, w), dtype=bool)
    px = to_pixels(p.coords, h, w)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    vis = p.visibility.astype(bool)
    for i in np.flatnonzero(vis):
        mask |= (cols - px[i, 0]) ** 2 + (rows - px[i, 1]) ** 2 <= radius * radius + _TOL
    for a, b in SKELETON:
        if vis[a] and vis[b]:
            mask |= _segment_distance(rows, cols, px[a], px[b]) <= radius + _TOL
    return mask.astype(np.uint8)


def inverse_mask(m: np.ndarray) -> np.ndarray:
    return (1 - np.asarray(m)).astype(np.uint8)


@dataclass(frozen=True)
class RoiSet:
    """Seven (x0, y0, x1, y1) half-open pixel boxes with validity flags."""

    boxes: np.ndarray
    valid: np.ndarray


def compute_body_rois(p: PoseAnnotation, h: int, w: int, margin: float) -> RoiSet:
    if margin < 0:
        raise ValueError("margin must be non-negative")
    px = np.rint(to_pixels(p.coords, h, w))
    vis = p.visibility.astype(bool)
    boxes = np.zeros((NUM_ROIS, 4), dtype=np.int64)
    valid = np.zeros(NUM_ROIS, dtype=np.uint8)
    for r, group in enumerate(ROI_GROUPS):
        members = [i for i in group if vis[i]]
        if len(members) < 2:
            boxes[r] = (0, 0, w, h)
            continue
        pts = px[members]
        u0, v0 = pts.min(axis=0)
        u1, v1 = pts.max(axis=0) + 1.0
        pad_u = margin * (u1 - u0)
        pad_v = margin * (v1 - v0)
        x0 = int(np.clip(np.floor(u0 - pad_u), 0, w))
        x1 = int(np.clip(np.ceil(u1 + pad_u), 0, w))
        y0 = int(np.clip(np.floor(v0 - pad_v), 0, h))
        y1 = int(np.clip(np.ceil(v1 + pad_v), 0, h))
        x0, x1 = _widen(x0, x1, w)
        y0, y1 = _widen(y0, y1, h)
        boxes[r] = (x0, y0, x1, y1)
        valid[r] = 1
    return RoiSet(boxes, valid)


def _widen(lo: int, hi: int, size: int, minimum: int = 2) -> tuple[int, int]:
    minimum = min(minimum, size)
    while hi - lo < minimum:
        if hi < size:
            hi += 1
        if hi - lo < minimum and lo > 0:
            lo -= 1
    return lo, hi


def extract_roi_patch(fmap, box, out_size: int):
    """Crop a C x H x W map to ``box`` and resize bilinearly (align-corners) to out_size^2."""
    x0, y0, x1, y1 = (int(b) for b in box)
    is_numpy = isinstance(fmap, np.ndarray)
    t = torch.as_tensor(fmap)
    _, h, w = t.shape
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate box {tuple(box)}")
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"box {tuple(box)} outside a {h}x{w} map")
    crop = t[:, y0:y1, x0:x1]
    if crop.shape[1:] == (out_size, out_size):
        out = crop.clone()
    else:
        out = F.interpolate(crop[None], size=(out_size, out_size), mode="bilinear",
                            align_corners=True)[0]
    return out.numpy() if is_numpy else out


def roi_sampling_grid(boxes: np.ndarray, h: int, w: int, out_size: int) -> torch.Tensor:
    """Sampling grids (N x S x S x 2) reproducing extract_roi_patch via grid_sample.

    ``boxes`` is N x 4. Used to crop every ROI of a batch in a single call.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    steps = np.linspace(0.0, 1.0, out_size) if out_size > 1 else np.zeros(1)
    grids = np.empty((len(boxes), out_size, out_size, 2))
    for n, (x0, y0, x1, y1) in enumerate(boxes):
        cols = x0 + steps * (x1 - 1 - x0)
        rows = y0 + steps * (y1 - 1 - y0)
        gx = 2.0 * cols / max(w - 1, 1) - 1.0
        gy = 2.0 * rows / max(h - 1, 1) - 1.0
        grids[n, :, :, 0] = gx[None, :]
        grids[n, :, :, 1] = gy[:, None]
    return torch.from_numpy(grids)


def roi_patches(fmaps: torch.Tensor, grids: torch.Tensor) -> torch.Tensor:
    """Batched ROI crop: fmaps B x C x H x W, grids (B*7) x S x S x 2 -> (B*7) x C x S x S."""
    b = fmaps.shape[0]
    per = grids.shape[0] // b
    src = fmaps.repeat_interleave(per, dim=0)
    return F.grid_sample(src, grids.to(fmaps.dtype), mode="bilinear",
                         padding_mode="border", align_corners=True)

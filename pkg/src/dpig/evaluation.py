"""Image-quality, distribution and retrieval metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import FactorKind, PoseAnnotation
from .stage1 import Stage1, compose_batch, images_to_tensor, pose_tensors
from .stage2 import Stage2, map_noise_batch

SSIM_WIN = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DYNAMIC_RANGE = 2.0  # pixels live in [-1, 1]


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Valid-mode weighted window sums of an H x W array."""
    patches = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.einsum("ijkl,kl->ij", patches, win)


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-channel local SSIM over valid 7x7 Gaussian windows; returns C x H' x W'."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}")
    win = gaussian_window()
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter(x, win), _filter(y, win)
        vx = _filter(x * x, win) - mx * mx
        vy = _filter(y * y, win) - my * my
        cxy = _filter(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        maps.append(num / den)
    return np.stack(maps)


def ssim(a, b) -> float:
    return float(ssim_map(a, b).mean())


def mask_ssim(a, b, m) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if a.shape != b.shape or a.shape[:2] != m.shape:
        raise ValueError(f"shape mismatch: {a.shape}, {b.shape}, mask {m.shape}")
    return ssim(a * m[..., None], b * m[..., None])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def embedding_frechet(real, fake) -> float:
    """Frechet distance between Gaussian fits of two K-d sample sets."""
    real, fake = np.asarray(real, dtype=np.float64), np.asarray(fake, dtype=np.float64)
    real = real[:, None] if real.ndim == 1 else real
    fake = fake[:, None] if fake.ndim == 1 else fake
    k = real.shape[1]
    if fake.shape[1] != k:
        raise ValueError(f"dimension mismatch: {k} vs {fake.shape[1]}")
    if real.shape[0] < k + 1 or fake.shape[0] < k + 1:
        raise ValueError(f"need at least {k + 1} samples per set, got {real.shape[0]} and {fake.shape[0]}")
    mu_r, mu_f = real.mean(0), fake.mean(0)
    cov_r = np.atleast_2d(np.cov(real, rowvar=False))
    cov_f = np.atleast_2d(np.cov(fake, rowvar=False))
    s = _psd_sqrt(cov_r)
    cross = np.linalg.eigvalsh((s @ cov_f @ s + (s @ cov_f @ s).T) / 2)
    tr_cross = float(np.sqrt(np.clip(cross, 0, None)).sum())
    d = float(((mu_r - mu_f) ** 2).sum() + np.trace(cov_r) + np.trace(cov_f) - 2 * tr_cross)
    return max(d, 0.0)


@dataclass
class RetrievalResult:
    rank1: float
    mAP: float
    average_precisions: list = field(default_factory=list)


def reid_evaluate(query_feats, query_labels, gallery_feats, gallery_labels) -> RetrievalResult:
    """Rank gallery items by Euclidean distance; ties resolve by gallery index."""
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    ql, gl = np.asarray(query_labels), np.asarray(gallery_labels)
    missing = sorted(set(ql.tolist()) - set(gl.tolist()))
    if missing:
        raise ValueError(f"query label {missing[0]!r} does not appear in the gallery")
    dist = np.sqrt(np.maximum(((q[:, None, :] - g[None, :, :]) ** 2).sum(-1), 0.0))
    aps, hits = [], 0
    for i in range(len(q)):
        order = np.argsort(dist[i], kind="stable")
        match = gl[order] == ql[i]
        hits += bool(match[0])
        ranks = np.flatnonzero(match) + 1
        aps.append(float(np.mean(np.arange(1, len(ranks) + 1) / ranks)))
    n = max(len(q), 1)
    return RetrievalResult(hits / n, float(np.mean(aps)) if aps else 0.0, aps)


@dataclass
class DisentanglementReport:
    fg_in_out: float  # in-mask / out-of-mask change when the foreground is resampled
    bg_out_in: float  # out-of-mask / in-mask change when the background is resampled
    fg_in: float
    fg_out: float
    bg_in: float
    bg_out: float
    fg_ratio_per_probe: float
    bg_ratio_per_probe: float


_EPS = 1e-12


def _ratio(num, den) -> float:
    return float((num + _EPS) / (den + _EPS))


def region_change(changed: np.ndarray, base: np.ndarray, masks: np.ndarray):
    """Mean absolute pixel change inside / outside each mask -> two arrays of length N."""
    diff = np.abs(changed - base).mean(-1)
    m = masks.astype(bool)
    inside = np.array([d[mm].mean() if mm.any() else 0.0 for d, mm in zip(diff, m)])
    outside = np.array([d[~mm].mean() if (~mm).any() else 0.0 for d, mm in zip(diff, m)])
    return inside, outside


@torch.no_grad()
def disentanglement_score(stage1: Stage1, stage2: Stage2, images: np.ndarray,
                          poses: list[PoseAnnotation], fg_masks: np.ndarray,
                          seed: int = 0, batch: int = 32) -> DisentanglementReport:
    """Resample one factor at a time and measure where the pixels change."""
    if len(poses) == 0:
        raise ValueError("disentanglement_score needs a non-empty probe set")
    cfg = stage1.cfg
    rng = np.random.default_rng(seed)
    base_all, fg_all, bg_all = [], [], []
    for s in range(0, len(poses), batch):
        ps = list(poses[s:s + batch])
        pt = pose_tensors(ps, cfg, stage1.dtype)
        fg, bg = stage1.encode(images_to_tensor(images[s:s + batch], stage1.dtype), pt.masks, pt.grids)
        fg, bg = fg.numpy(), bg.numpy()
        fg_new = map_noise_batch(rng.standard_normal((len(ps), cfg.fg_dim)), FactorKind.FG, stage2)
        bg_new = map_noise_batch(rng.standard_normal((len(ps), cfg.bg_dim)), FactorKind.BG, stage2)
        base_all.append(compose_batch(fg, bg, ps, stage1))
        fg_all.append(compose_batch(fg_new, bg, ps, stage1))
        bg_all.append(compose_batch(fg, bg_new, ps, stage1))
    return _score(np.concatenate(base_all), np.concatenate(fg_all), np.concatenate(bg_all), fg_masks)


def _score(base, fg_changed, bg_changed, masks) -> DisentanglementReport:
    fi, fo = region_change(fg_changed, base, masks)
    bi, bo = region_change(bg_changed, base, masks)
    return DisentanglementReport(
        fg_in_out=_ratio(fi.mean(), fo.mean()),
        bg_out_in=_ratio(bo.mean(), bi.mean()),
        fg_in=float(fi.mean()), fg_out=float(fo.mean()),
        bg_in=float(bi.mean()), bg_out=float(bo.mean()),
        fg_ratio_per_probe=float(np.mean([_ratio(a, b) for a, b in zip(fi, fo)])),
        bg_ratio_per_probe=float(np.mean([_ratio(b, a) for a, b in zip(bi, bo)])),
    )


# --- reports ------------------------------------------------------------------------

def write_report(records: list[dict], out_dir) -> tuple[Path, Path]:
    """Line-delimited JSON records plus an aligned plain-text summary table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl = out_dir / "report.jsonl"
    jsonl.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    width = max([len(r["metric"]) for r in records] + [6])
    lines = [f"{'metric':<{width}}  value", "-" * (width + 14)]
    for r in records:
        v = r["value"]
        lines.append(f"{r['metric']:<{width}}  {v:.6g}" if isinstance(v, (int, float)) else
                     f"{r['metric']:<{width}}  {v}")
    summary = out_dir / "summary.txt"
    summary.write_text("\n".join(lines) + "\n")
    return jsonl, summary

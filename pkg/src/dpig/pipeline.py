"""Sampling, manipulation, interpolation, inversion and virtual-dataset synthesis."""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .core import (FactorEmbedding, FactorKind, PipelineConfig, PoseAnnotation,
                   pose_to_vector, vector_to_pose)
from .data_io import format_pose, write_image, write_manifest
from .stage1 import Stage1, compose_batch, encode_factors, pose_decode, pose_encode
from .stage2 import Stage2, map_noise, map_noise_batch

log = logging.getLogger(__name__)


class MissingModelError(RuntimeError):
    pass


class Mode(str, enum.Enum):
    SAMPLED = "sampled"
    CONDITIONED = "conditioned"
    FIXED = "fixed"


@dataclass(frozen=True)
class FactorSource:
    """Where one factor comes from.

    SAMPLED takes an explicit code ``z`` or a ``seed``; CONDITIONED takes an
    (image, pose) pair; FIXED takes an embedding, or for the pose factor a raw
    PoseAnnotation that bypasses the pose decoder.
    """

    mode: Mode
    z: np.ndarray | None = None
    seed: int | None = None
    image: np.ndarray | None = None
    pose: PoseAnnotation | None = None
    embedding: FactorEmbedding | None = None

    @classmethod
    def sampled(cls, seed: int | None = None, z=None) -> "FactorSource":
        return cls(Mode.SAMPLED, z=None if z is None else np.asarray(z, dtype=np.float64), seed=seed)

    @classmethod
    def conditioned(cls, image, pose: PoseAnnotation) -> "FactorSource":
        return cls(Mode.CONDITIONED, image=np.asarray(image), pose=pose)

    @classmethod
    def fixed(cls, value) -> "FactorSource":
        if isinstance(value, PoseAnnotation):
            return cls(Mode.FIXED, pose=value)
        return cls(Mode.FIXED, embedding=value)


def _digest(values) -> str:
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def compose(fg: FactorEmbedding, bg: FactorEmbedding, pose: PoseAnnotation, stage1: Stage1) -> np.ndarray:
    cfg = stage1.cfg
    fg.check_dim(cfg)
    bg.check_dim(cfg)
    if fg.kind is not FactorKind.FG or bg.kind is not FactorKind.BG:
        raise ValueError("compose expects (fg, bg) embeddings")
    return compose_batch(fg.values[None], bg.values[None], [pose], stage1)[0]


def _draw(kind: FactorKind, src: FactorSource, cfg: PipelineConfig, rng) -> np.ndarray:
    if src.z is not None:
        return src.z
    gen = np.random.default_rng(src.seed) if src.seed is not None else rng
    return gen.standard_normal(cfg.embedding_dim(kind))


def _resolve(kind: FactorKind, src: FactorSource, stage1: Stage1, stage2: Stage2 | None, rng):
    """-> (embedding or None, pose or None, provenance entry)."""
    cfg = stage1.cfg
    rec = {"mode": src.mode.value}
    if src.mode is Mode.SAMPLED:
        if stage2 is None or not stage2.has(kind):
            raise MissingModelError(f"sampling {kind.value} needs a trained stage-II mapper")
        z = _draw(kind, src, cfg, rng)
        rec["z"] = z.tolist()
        e = map_noise(z, kind, stage2)
    elif src.mode is Mode.CONDITIONED:
        if kind is FactorKind.POSE:
            rec["pose"] = pose_to_vector(src.pose).tolist()
            return None, src.pose, rec
        fg, bg = encode_factors(src.image, src.pose, stage1)
        e = fg if kind is FactorKind.FG else bg
    else:
        if kind is FactorKind.POSE and src.pose is not None:
            rec["pose"] = pose_to_vector(src.pose).tolist()
            return None, src.pose, rec
        e = src.embedding
        if e is None or e.kind is not kind:
            raise ValueError(f"FIXED {kind.value} source needs a {kind.value} embedding")
    rec["embedding"] = e.values.tolist()
    rec["hash"] = _digest(e.values)
    if kind is FactorKind.POSE:
        pose = vector_to_pose(pose_decode(e, stage1))
        rec["pose"] = pose_to_vector(pose).tolist()
        return e, pose, rec
    return e, None, rec


def generate(sources: Mapping, stage1: Stage1, stage2: Stage2 | None = None, rng=None):
    """Compose one image from a source per factor. Returns (image, provenance)."""
    rng = rng if rng is not None else np.random.default_rng()
    srcs = {FactorKind(k): v for k, v in sources.items()}
    missing = [k.value for k in FactorKind if k not in srcs]
    if missing:
        raise ValueError(f"no source for factor(s): {', '.join(missing)}")
    fg, _, fg_rec = _resolve(FactorKind.FG, srcs[FactorKind.FG], stage1, stage2, rng)
    bg, _, bg_rec = _resolve(FactorKind.BG, srcs[FactorKind.BG], stage1, stage2, rng)
    _, pose, pose_rec = _resolve(FactorKind.POSE, srcs[FactorKind.POSE], stage1, stage2, rng)
    pose_rec["hash"] = pose_rec.get("hash", _digest(pose_to_vector(pose)))
    image = compose(fg, bg, pose, stage1)
    return image, {"fg": fg_rec, "bg": bg_rec, "pose": pose_rec}


def interpolation_codes(z1, z2, steps: int) -> list[np.ndarray]:
    if steps < 2:
        raise ValueError("steps must be at least 2")
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    ts = np.linspace(0.0, 1.0, steps)
    return [(1.0 - t) * z1 + t * z2 for t in ts]


def interpolate_gaussian(z1, z2, steps: int, kind, stage1: Stage1, stage2: Stage2,
                         held: Mapping) -> list[np.ndarray]:
    """Frames for linearly interpolated codes of ``kind``; the other two factors come from ``held``."""
    kind = FactorKind(kind)
    frames = []
    for z in interpolation_codes(z1, z2, steps):
        sources = dict(held)
        sources[kind] = FactorSource.sampled(z=z)
        frames.append(generate(sources, stage1, stage2)[0])
    return frames


@dataclass
class InversionResult:
    z: np.ndarray
    residual: float
    residual_log: list  # (step, residual) every 100 steps


INVERT_BANK = 4096  # Gaussian draws screened for extra starting points


def _starting_points(mapper, target, k: int, restarts: int, seed: int, dtype) -> torch.Tensor:
    """z = 0 first, then the bank draws whose images lie nearest the target."""
    starts = torch.zeros(restarts, k, dtype=dtype)
    if restarts > 1:
        bank = torch.as_tensor(np.random.default_rng(seed).standard_normal((INVERT_BANK, k)), dtype=dtype)
        with torch.no_grad():
            dist = (mapper(bank) - target).norm(dim=1)
        starts[1:] = bank[torch.argsort(dist)[:restarts - 1]]
    return starts


def invert_embedding(e_target: FactorEmbedding, kind, stage2: Stage2, steps: int | None = None,
                     lr: float | None = None, prior: float | None = None,
                     restarts: int | None = None, seed: int = 0) -> InversionResult:
    """Find z with mapper(z) close to e_target by minimizing ||mapper(z) - e||^2 + prior * ||z||^2 with Adam.

    The objective is non-convex, so ``restarts`` > 1 runs several starting points side by
    side (z = 0 plus the nearest draws of a seeded Gaussian bank) and keeps the one with
    the lowest final residual. Residuals are relative: ||mapper(z) - e|| / ||e||.
    """
    kind = FactorKind(kind)
    cfg = stage2.cfg
    steps = cfg.invert_steps if steps is None else steps
    lr = cfg.invert_lr if lr is None else lr
    prior = cfg.invert_prior if prior is None else prior
    restarts = cfg.invert_restarts if restarts is None else restarts
    if e_target.kind is not kind:
        raise ValueError(f"target is a {e_target.kind.value} embedding, not {kind.value}")
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    mapper = stage2.mapper(kind)
    dtype = stage2.dtype
    target = torch.as_tensor(e_target.values, dtype=dtype)
    norm = float(target.norm()) or 1.0
    z = _starting_points(mapper, target, cfg.embedding_dim(kind), restarts, seed, dtype).requires_grad_(True)
    # rows are independent terms of one sum, and Adam is per-coordinate, so this
    # matches running each start on its own
    opt = torch.optim.Adam([z], lr=lr)
    for p in mapper.parameters():
        p.requires_grad_(False)
    residual_log = []

    def residuals():
        with torch.no_grad():
            return (mapper(z) - target).norm(dim=1) / norm

    try:
        for step in range(steps):
            if step % 100 == 0:
                residual_log.append((step, float(residuals().min())))
            obj = ((mapper(z) - target) ** 2).sum() + prior * (z ** 2).sum()
            if not torch.isfinite(obj):
                raise FloatingPointError(f"non-finite inversion objective at step {step}")
            opt.zero_grad()
            obj.backward()
            opt.step()
    finally:
        for p in mapper.parameters():
            p.requires_grad_(True)
    final = residuals()
    best = int(torch.argmin(final))
    residual_log.append((steps, float(final[best])))
    return InversionResult(z[best].detach().numpy().astype(np.float64), float(final[best]), residual_log)


def encode_all(x, p: PoseAnnotation, stage1: Stage1) -> dict:
    fg, bg = encode_factors(x, p, stage1)
    return {FactorKind.FG: fg, FactorKind.BG: bg,
            FactorKind.POSE: pose_encode(pose_to_vector(p), stage1)}


def inverse_interpolate(x1, p1, x2, p2, steps: int, stage1: Stage1, stage2: Stage2,
                        inv_steps: int | None = None) -> list[np.ndarray]:
    """Encode both inputs, invert every factor to a Gaussian code, interpolate codes, regenerate."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    codes = {}
    for kind in FactorKind:
        e1 = encode_all(x1, p1, stage1)[kind]
        e2 = encode_all(x2, p2, stage1)[kind]
        z1 = invert_embedding(e1, kind, stage2, steps=inv_steps).z
        z2 = z1 if e2.values.tobytes() == e1.values.tobytes() else \
            invert_embedding(e2, kind, stage2, steps=inv_steps).z
        codes[kind] = interpolation_codes(z1, z2, steps)
    frames = []
    for i in range(steps):
        sources = {k: FactorSource.sampled(z=codes[k][i]) for k in FactorKind}
        frames.append(generate(sources, stage1, stage2)[0])
    return frames


def extract_reid_feature(x, p: PoseAnnotation, stage1: Stage1) -> np.ndarray:
    fg, _ = encode_factors(x, p, stage1)
    return normalize_feature(fg.values)


def normalize_feature(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero-norm feature")
    return v / n


# --- virtual re-ID dataset -------------------------------------------------------------

@dataclass
class VirtualIdentitySpec:
    n_identities: int
    images_per_identity: int
    pose_pool: Sequence[PoseAnnotation]
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 1 or self.images_per_identity < 1:
            raise ValueError("n_identities and images_per_identity must be at least 1")
        if len(self.pose_pool) == 0:
            raise ValueError("pose_pool must be non-empty")


VIRTUAL_MANIFEST = "virtual.tsv"
VIRTUAL_HEADER = "identity\tfile\tfg_code_hash\tpose_index\tbg_seed"


def _bg_seed(seed: int, ident: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, ident, index]).generate_state(1)[0])


def generate_virtual_dataset(spec: VirtualIdentitySpec, stage1: Stage1, stage2: Stage2, root) -> Path:
    """One sampled foreground code per identity; fresh background code and a pooled pose per image."""
    for kind in (FactorKind.FG, FactorKind.BG):
        if not stage2.has(kind):
            raise MissingModelError(f"virtual dataset needs a trained {kind.value} mapper")
    cfg = stage1.cfg
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    pool = list(spec.pose_pool)
    rows, std_rows = [VIRTUAL_HEADER], []
    fg_codes = np.zeros((spec.n_identities, cfg.fg_dim))
    for ident in range(spec.n_identities):
        rng = np.random.default_rng([spec.seed, ident])
        z_fg = rng.standard_normal(cfg.fg_dim)
        fg_codes[ident] = z_fg
        fg = map_noise_batch(z_fg[None], FactorKind.FG, stage2)
        pose_idx = rng.integers(0, len(pool), size=spec.images_per_identity)
        bg_seeds = [_bg_seed(spec.seed, ident, i) for i in range(spec.images_per_identity)]
        z_bg = np.stack([np.random.default_rng(s).standard_normal(cfg.bg_dim) for s in bg_seeds])
        bg = map_noise_batch(z_bg, FactorKind.BG, stage2)
        poses = [pool[j] for j in pose_idx]
        images = compose_batch(np.repeat(fg, len(poses), axis=0), bg, poses, stage1)
        fg_hash = _digest(z_fg)
        for i, img in enumerate(images):
            name = f"images/{ident:04d}_{i:02d}.png"
            write_image(root / name, img)
            rows.append(f"{ident}\t{name}\t{fg_hash}\t{int(pose_idx[i])}\t{bg_seeds[i]}")
            std_rows.append((name, poses[i], ident, None))
    (root / VIRTUAL_MANIFEST).write_text("\n".join(rows) + "\n", encoding="utf-8")
    # Same images in the standard manifest format so load_dataset can read them back.
    write_manifest(root, std_rows)
    (root / "pose_pool.tsv").write_text("\n".join(format_pose(p) for p in pool) + "\n")
    np.savez(root / "codes.npz", fg_codes=fg_codes)
    return root


def read_virtual_manifest(root) -> list[dict]:
    lines = (Path(root) / VIRTUAL_MANIFEST).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != VIRTUAL_HEADER:
        raise ValueError(f"{root}: malformed virtual manifest header")
    out = []
    for line in lines[1:]:
        ident, name, fg_hash, pose_idx, bg_seed = line.split("\t")
        out.append({"identity": int(ident), "file": name, "fg_code_hash": fg_hash,
                    "pose_index": int(pose_idx), "bg_seed": int(bg_seed)})
    return out

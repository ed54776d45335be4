"""Dataset manifests, the synthetic stick-figure generator, and checkpoint files."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image

from .core import NUM_KEYPOINTS, PoseAnnotation
from .geometry import SKELETON, _segment_distance, to_normalized

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "image\tpose\tidentity\tfg_mask"


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# --- image helpers -------------------------------------------------------------------

def to_uint8(x: np.ndarray) -> np.ndarray:
    """[-1, 1] float image -> uint8."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64) / 127.5 - 1.0


def write_image(path, x: np.ndarray) -> None:
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_mask(path, m: np.ndarray) -> None:
    Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


# --- manifests -----------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetRecord:
    image_path: Path
    pose: PoseAnnotation
    identity: int | None = None
    mask_path: Path | None = None


def format_pose(p: PoseAnnotation) -> str:
    vals = []
    for (x, y), v in zip(p.coords, p.visibility):
        vals += [repr(float(x)), repr(float(y)), str(int(v))]
    return " ".join(vals)


def parse_pose(text: str) -> PoseAnnotation:
    parts = text.split()
    if len(parts) % 3 or len(parts) // 3 != NUM_KEYPOINTS:
        raise DatasetError(f"expected {NUM_KEYPOINTS} keypoints (x y v each), got {len(parts) / 3:g}")
    arr = np.array([float(t) for t in parts]).reshape(NUM_KEYPOINTS, 3)
    return PoseAnnotation(arr[:, :2], arr[:, 2].astype(np.uint8))


def write_manifest(root, rows) -> Path:
    """rows: iterable of (image_rel, pose, identity or None, mask_rel or None)."""
    path = Path(root) / MANIFEST
    lines = [MANIFEST_HEADER]
    for image, pose, ident, mask in rows:
        lines.append("\t".join([str(image), format_pose(pose),
                                "-" if ident is None else str(int(ident)),
                                "-" if mask is None else str(mask)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_dataset(root) -> Iterator[DatasetRecord]:
    """Stream records in manifest order, validating each pose and file reference."""
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise DatasetError(f"no {MANIFEST} in {root}")
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if lineno == 1 and line == MANIFEST_HEADER:
                continue
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise DatasetError(f"{path} line {lineno}: expected 4 tab-separated fields, got {len(fields)}")
            image, pose_text, ident, mask = fields
            try:
                pose = parse_pose(pose_text)
                identity = None if ident == "-" else int(ident)
            except ValueError as exc:
                raise DatasetError(f"{path} line {lineno}: {exc}") from None
            image_path = root / image
            mask_path = None if mask == "-" else root / mask
            for p in (image_path, mask_path):
                if p is not None and not p.exists():
                    raise DatasetError(f"{path} line {lineno}: missing file {p}")
            yield DatasetRecord(image_path, pose, identity, mask_path)


@dataclass
class ArrayDataset:
    images: np.ndarray  # N x H x W x 3 in [-1, 1]
    poses: list
    identities: list
    fg_masks: np.ndarray | None = None  # N x H x W ground truth (synthetic only)

    def __len__(self):
        return len(self.poses)

    def subset(self, idx) -> "ArrayDataset":
        idx = list(idx)
        return ArrayDataset(self.images[idx], [self.poses[i] for i in idx],
                            [self.identities[i] for i in idx],
                            None if self.fg_masks is None else self.fg_masks[idx])


def load_arrays(root) -> ArrayDataset:
    records = list(load_dataset(root))
    if not records:
        return ArrayDataset(np.zeros((0, 0, 0, 3)), [], [], None)
    images = np.stack([read_image(r.image_path) for r in records])
    masks = None
    if all(r.mask_path is not None for r in records):
        masks = np.stack([read_mask(r.mask_path) for r in records])
    return ArrayDataset(images, [r.pose for r in records], [r.identity for r in records], masks)


# --- synthetic dataset ---------------------------------------------------------------

@dataclass
class SynthConfig:
    n_images: int = 200
    image_h: int = 64
    image_w: int = 32
    # 0 -> identity-free; otherwise palettes are shared by image index modulo n_identities
    n_identities: int = 0
    bg_noise: float = 0.02
    occlusion_prob: float = 0.05
    body_scale: tuple = (0.70, 0.85)
    arm_angle: float = 45.0  # degrees of swing per arm segment
    leg_angle: float = 20.0
    head_turn: float = 15.0
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 0:
            raise ValueError("n_images must be non-negative")
        if self.image_h <= 0 or self.image_w <= 0:
            raise ValueError("image dims positive")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must lie in [0, 1]")
        if self.bg_noise < 0:
            raise ValueError("bg_noise must be non-negative")


# Part radii as fractions of image height; all below the default coarse-mask
# radius (8/128) so the figure always lies inside the pose mask.
_RADIUS = {"torso": 0.055, "arm": 0.024, "leg": 0.030, "head": 0.05}
_PART_OF_EDGE = {
    (1, 2): "torso", (1, 5): "torso", (1, 8): "torso", (1, 11): "torso",
    (2, 3): "arm", (3, 4): "arm", (5, 6): "arm", (6, 7): "arm",
    (8, 9): "leg", (9, 10): "leg", (11, 12): "leg", (12, 13): "leg",
}
_PALETTE_SLOT = {"torso": 0, "arm": 0, "leg": 1, "head": 2}


def _sample_palette(rng) -> np.ndarray:
    """shirt, trousers, head colours in [-1, 1]."""
    pal = rng.uniform(-0.9, 0.9, size=(3, 3))
    skin = rng.uniform(0.0, 0.7)
    pal[2] = [skin + 0.2, skin, skin - 0.2]
    return np.clip(pal, -1, 1)


def _sample_skeleton(cfg: SynthConfig, rng) -> np.ndarray:
    """18 x 2 keypoint pixel positions (u, v) from a simple articulated prior."""
    h, w = cfg.image_h, cfg.image_w
    body = rng.uniform(*cfg.body_scale) * h
    cu = rng.uniform(0.4, 0.6) * (w - 1)
    top = rng.uniform(0.02, 0.98 - cfg.body_scale[1]) * h + 0.13 * body
    pts = np.zeros((NUM_KEYPOINTS, 2))

    def at(parent, length, angle_deg):
        a = math.radians(angle_deg)
        return pts[parent] + length * body * np.array([math.cos(a), math.sin(a)])

    lean = rng.uniform(-6, 6)
    pts[1] = (cu, top)
    pts[0] = at(1, 0.11, -90 + lean + rng.uniform(-cfg.head_turn, cfg.head_turn))
    pts[14] = pts[0] + body * np.array([-0.025, -0.02])
    pts[15] = pts[0] + body * np.array([0.025, -0.02])
    pts[16] = pts[0] + body * np.array([-0.05, 0.0])
    pts[17] = pts[0] + body * np.array([0.05, 0.0])
    pts[2] = pts[1] + body * np.array([-0.10, 0.01])
    pts[5] = pts[1] + body * np.array([0.10, 0.01])
    for s, e, wr, side in ((2, 3, 4, -1), (5, 6, 7, 1)):
        upper = 90 - side * 15 + rng.uniform(-cfg.arm_angle, cfg.arm_angle)
        pts[e] = at(s, 0.16, upper)
        pts[wr] = at(e, 0.14, upper + rng.uniform(-cfg.arm_angle, cfg.arm_angle))
    pts[8] = at(1, 0.31, 90 + 10 + lean)
    pts[11] = at(1, 0.31, 90 - 10 + lean)
    for hip, knee, ankle in ((8, 9, 10), (11, 12, 13)):
        thigh = 90 + rng.uniform(-cfg.leg_angle, cfg.leg_angle)
        pts[knee] = at(hip, 0.23, thigh)
        pts[ankle] = at(knee, 0.23, thigh + rng.uniform(-cfg.leg_angle, cfg.leg_angle))
    return pts


def _render_figure(pts: np.ndarray, vis: np.ndarray, palette: np.ndarray, h: int, w: int):
    """Capsules along visible limbs plus a head disk. Returns (colour image, coverage mask)."""
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    img = np.zeros((h, w, 3))
    cover = np.zeros((h, w), dtype=bool)
    # legs first, then arms/torso, then head on top
    order = sorted(_PART_OF_EDGE.items(), key=lambda kv: {"leg": 0, "torso": 1, "arm": 2}[kv[1]])
    for (a, b), part in order:
        if not (vis[a] and vis[b]):
            continue
        hit = _segment_distance(rows, cols, pts[a], pts[b]) <= _RADIUS[part] * h
        img[hit] = palette[_PALETTE_SLOT[part]]
        cover |= hit
    if vis[0]:
        hit = (cols - pts[0, 0]) ** 2 + (rows - pts[0, 1]) ** 2 <= (_RADIUS["head"] * h) ** 2
        img[hit] = palette[2]
        cover |= hit
    return img, cover


def _render_background(cfg: SynthConfig, rng) -> np.ndarray:
    h, w = cfg.image_h, cfg.image_w
    c0, c1 = rng.uniform(-0.9, 0.9, size=(2, 3))
    theta = rng.uniform(0, 2 * math.pi)
    rows = np.linspace(-1, 1, h)[:, None]
    cols = np.linspace(-1, 1, w)[None, :]
    t = np.clip(0.5 + 0.5 * (math.cos(theta) * cols + math.sin(theta) * rows), 0, 1)[..., None]
    bg = (1 - t) * c0 + t * c1
    bg = bg + cfg.bg_noise * rng.standard_normal((h, w, 3))
    return np.clip(bg, -1, 1)


def synth_sample(cfg: SynthConfig) -> ArrayDataset:
    """Render the synthetic dataset in memory (quantized exactly as it is stored)."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.image_h, cfg.image_w
    palettes = [_sample_palette(rng) for _ in range(cfg.n_identities)]
    images = np.zeros((cfg.n_images, h, w, 3))
    masks = np.zeros((cfg.n_images, h, w), dtype=np.uint8)
    poses, idents = [], []
    for n in range(cfg.n_images):
        ident = n % cfg.n_identities if cfg.n_identities else None
        palette = palettes[ident] if ident is not None else _sample_palette(rng)
        pts = _sample_skeleton(cfg, rng)
        inside = (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)
        vis = inside & (rng.uniform(size=NUM_KEYPOINTS) >= cfg.occlusion_prob)
        # store coordinates at 1e-6 resolution so manifests round-trip exactly
        coords = np.round(to_normalized(pts, h, w), 6)
        pose = PoseAnnotation.from_arrays(np.clip(coords, -1, 1), vis)
        fig, cover = _render_figure(pts, vis, palette, h, w)
        bg = _render_background(cfg, rng)
        img = np.where(cover[..., None], fig, bg)
        images[n] = from_uint8(to_uint8(img))
        masks[n] = cover
        poses.append(pose)
        idents.append(ident)
    return ArrayDataset(images, poses, idents, masks)


def synth_generate(cfg: SynthConfig, root) -> ArrayDataset:
    """Write images, ground-truth foreground masks and the manifest under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    data = synth_sample(cfg)
    rows = []
    for n in range(len(data)):
        img_rel, mask_rel = f"images/{n:06d}.png", f"masks/{n:06d}.png"
        write_image(root / img_rel, data.images[n])
        write_mask(root / mask_rel, data.fg_masks[n])
        rows.append((img_rel, data.poses[n], data.identities[n], mask_rel))
    write_manifest(root, rows)
    (root / "synth.cfg").write_text(
        "\n".join(f"{k} = {v}" for k, v in dataclasses.asdict(cfg).items()) + "\n")
    return data


# --- checkpoints ---------------------------------------------------------------------

CHECKPOINT_VERSION = 1
MAGIC = {"stage1": b"DPIG1", "stage2": b"DPIG2"}


def save_checkpoint(path, kind: str, params: dict, cfg, step: int,
                    optimizer_state: dict | None = None, meta: dict | None = None) -> Path:
    """Single-file archive: a text header line, then a torch-serialized payload."""
    if kind not in MAGIC:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    buf = io.BytesIO()
    torch.save({
        "params": {k: v.detach().clone() for k, v in params.items()},
        "config": cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg),
        "step": int(step),
        "optimizer": optimizer_state or {},
        "meta": meta or {},
    }, buf)
    payload = buf.getvalue()
    header = MAGIC[kind] + f" {CHECKPOINT_VERSION} {len(payload)}\n".encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    """Return the payload dict; raises CheckpointError on any format problem."""
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n", 0, 64)
    head = blob[:nl].split() if nl > 0 else []
    if len(head) != 3 or head[0] not in MAGIC.values():
        raise CheckpointError(f"{path}: not a DPIG checkpoint")
    found = {v: k for k, v in MAGIC.items()}[head[0]]
    if kind is not None and found != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {found}")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {int(head[1])}")
    payload = blob[nl + 1:]
    if len(payload) != int(head[2]):
        raise CheckpointError(f"{path}: truncated checkpoint ({len(payload)} of {int(head[2])} bytes)")
    data = torch.load(io.BytesIO(payload), weights_only=True)
    data["kind"] = found
    return data


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# --- embedding cache -----------------------------------------------------------------

def save_embeddings(path, kind: str, values: np.ndarray) -> Path:
    """Header line ``DPIGEMB <kind> <K> <count>`` then row-major little-endian float32."""
    values = np.ascontiguousarray(values, dtype="<f4")
    count, k = values.shape
    path = Path(path)
    path.write_bytes(f"DPIGEMB {kind} {k} {count}\n".encode() + values.tobytes())
    return path


def load_embeddings(path) -> tuple[str, np.ndarray]:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    parts = blob[:nl].split()
    if len(parts) != 4 or parts[0] != b"DPIGEMB":
        raise CheckpointError(f"{path}: not an embedding cache")
    kind, k, count = parts[1].decode(), int(parts[2]), int(parts[3])
    data = np.frombuffer(blob[nl + 1:], dtype="<f4")
    if data.size != k * count:
        raise CheckpointError(f"{path}: truncated embedding cache")
    return kind, data.reshape(count, k).astype(np.float64)

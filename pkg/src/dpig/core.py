"""Domain types and configuration shared by every stage of the pipeline."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_KEYPOINTS = 18
POSE_VECTOR_DIM = 3 * NUM_KEYPOINTS  # 36 coords + 18 visibility flags
NUM_ROIS = 7

# OpenPose/COCO-18 ordering.
KEYPOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)


class ConfigError(ValueError):
    pass


class FactorKind(str, enum.Enum):
    FG = "fg"
    BG = "bg"
    POSE = "pose"


@dataclass(frozen=True)
class PoseAnnotation:
    """18 keypoints in normalized [-1, 1] coordinates plus binary visibility.

    Invisible keypoints carry the (0, 0) sentinel; the flag alone encodes occlusion.
    """

    coords: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        vis = np.asarray(self.visibility)
        if coords.shape != (NUM_KEYPOINTS, 2):
            raise ValueError(f"pose coords must be {NUM_KEYPOINTS}x2, got {coords.shape}")
        if vis.shape != (NUM_KEYPOINTS,):
            raise ValueError(f"pose visibility must have {NUM_KEYPOINTS} entries, got {vis.shape}")
        if not np.all((vis == 0) | (vis == 1)):
            raise ValueError("pose visibility entries must be 0 or 1")
        vis = vis.astype(np.uint8)
        if not np.all(np.isfinite(coords)):
            raise ValueError("pose coords must be finite")
        if np.any(coords[vis == 0] != 0.0):
            raise ValueError("invisible keypoints must carry the (0, 0) sentinel")
        if np.any(np.abs(coords[vis == 1]) > 1.0):
            raise ValueError("visible keypoint coords must lie in [-1, 1]")
        coords.setflags(write=False)
        vis.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "visibility", vis)

    @classmethod
    def from_arrays(cls, coords, visibility) -> "PoseAnnotation":
        """Build a pose from possibly unclean arrays, zeroing invisible coords."""
        coords = np.array(coords, dtype=np.float64)
        vis = (np.asarray(visibility) > 0).astype(np.uint8)
        coords[vis == 0] = 0.0
        return cls(coords, vis)

    @classmethod
    def invisible(cls) -> "PoseAnnotation":
        return cls(np.zeros((NUM_KEYPOINTS, 2)), np.zeros(NUM_KEYPOINTS, dtype=np.uint8))

    def __eq__(self, other):
        if not isinstance(other, PoseAnnotation):
            return NotImplemented
        return (np.array_equal(self.coords, other.coords)
                and np.array_equal(self.visibility, other.visibility))

    def __hash__(self):
        return hash((self.coords.tobytes(), self.visibility.tobytes()))


def pose_to_vector(p: PoseAnnotation) -> np.ndarray:
    """Flatten a pose to the 54-d layout: x0, y0, x1, y1, ..., then 18 visibilities."""
    return np.concatenate([p.coords.reshape(-1), p.visibility.astype(np.float64)])


def vector_to_pose(v) -> PoseAnnotation:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (POSE_VECTOR_DIM,):
        raise ValueError(f"pose vector must have length {POSE_VECTOR_DIM}, got {v.shape}")
    vis = (v[2 * NUM_KEYPOINTS:] > 0.5).astype(np.uint8)
    coords = np.clip(v[: 2 * NUM_KEYPOINTS].reshape(NUM_KEYPOINTS, 2), -1.0, 1.0)
    coords[vis == 0] = 0.0
    return PoseAnnotation(coords, vis)


@dataclass(frozen=True)
class FactorEmbedding:
    kind: FactorKind
    values: np.ndarray

    def __post_init__(self):
        kind = FactorKind(self.kind)
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise ValueError("embedding entries must be finite")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def check_dim(self, cfg: "PipelineConfig") -> "FactorEmbedding":
        expected = cfg.embedding_dim(self.kind)
        if self.dim != expected:
            raise ValueError(f"{self.kind.value} embedding must be {expected}-d, got {self.dim}")
        return self


def check_image(x: np.ndarray, cfg: "PipelineConfig | None" = None) -> np.ndarray:
    """Validate an H x W x 3 image in [-1, 1]."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got {x.shape}")
    if cfg is not None and x.shape[:2] != (cfg.image_h, cfg.image_w):
        raise ValueError(f"image is {x.shape[:2]}, config expects {(cfg.image_h, cfg.image_w)}")
    if np.any(x < -1.0) or np.any(x > 1.0):
        raise ValueError("image pixels must lie in [-1, 1]")
    return x


@dataclass
class PipelineConfig:
    image_h: int = 128
    image_w: int = 64
    n_blocks: int = 5
    roi_size: int = 48
    roi_margin: float = 0.1
    # Pixel values at the 128-px reference height; scaled with image_h.
    heatmap_sigma: float = 6.0
    mask_radius: int = 8

    stem_channels: int = 32
    base_filters: int = 32
    fg_roi_dim: int = 32
    bg_dim: int = 128
    pose_dim: int = 32
    fc_hidden: int = 512
    fc_blocks: int = 4
    critic_filters: int = 32

    l1_weight: float = 10.0
    clip_value: float = 0.01
    n_critic: int = 5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    learning_rate: float = 2e-5
    pose_learning_rate: float = 2e-5
    map_learning_rate: float = 2e-5
    # "linear" anneals each learning rate to zero over a training call; "none" keeps it fixed.
    lr_decay: str = "linear"
    # mapper weights are averaged over this trailing fraction of each stage-II call; 0 disables
    map_average: float = 0.5

    batch_stage1: int = 16
    iters_stage1: int = 70000
    batch_pose: int = 64
    iters_pose: int = 30000
    batch_stage2: int = 32
    iters_stage2: int = 30000
    iters_stage2_pose: int = 60000
    checkpoint_every: int = 5000

    invert_steps: int = 1000
    invert_lr: float = 1e-2
    invert_prior: float = 1e-4
    invert_restarts: int = 1  # start 0 is z = 0; the rest come from a seeded Gaussian bank

    rng_seed: int = 0

    @property
    def fg_dim(self) -> int:
        return NUM_ROIS * self.fg_roi_dim

    @property
    def appearance_channels(self) -> int:
        return self.fg_dim + self.bg_dim

    @property
    def decoder_in_channels(self) -> int:
        return self.appearance_channels + NUM_KEYPOINTS

    @property
    def sigma_px(self) -> float:
        return self.heatmap_sigma * self.image_h / 128.0

    @property
    def mask_radius_px(self) -> int:
        return max(1, int(round(self.mask_radius * self.image_h / 128.0)))

    def embedding_dim(self, kind) -> int:
        kind = FactorKind(kind)
        return {FactorKind.FG: self.fg_dim, FactorKind.BG: self.bg_dim,
                FactorKind.POSE: self.pose_dim}[kind]

    def block_shapes(self, h: int, w: int) -> list[tuple[int, int]]:
        """Spatial size at the input of each encoder block; every block but the last halves it."""
        shapes = [(h, w)]
        for _ in range(self.n_blocks - 1):
            h, w = (h + 1) // 2, (w + 1) // 2
            shapes.append((h, w))
        return shapes

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "PipelineConfig":
        return validate_config(dataclasses.replace(self, **changes))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        return validate_config(cls(**d))


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    """Return cfg unchanged, or raise ConfigError naming the first violated invariant."""
    if cfg.image_h <= 0 or cfg.image_w <= 0:
        raise ConfigError("image dims positive")
    if cfg.n_blocks < 1:
        raise ConfigError("n_blocks must be at least 1")
    for h, w in cfg.block_shapes(cfg.image_h, cfg.image_w) + cfg.block_shapes(cfg.roi_size, cfg.roi_size):
        if h < 1 or w < 1:
            raise ConfigError("spatial dims must stay >= 1 at every block")
    if cfg.roi_size < 2:
        raise ConfigError("roi_size must be at least 2")
    if cfg.roi_margin < 0:
        raise ConfigError("roi_margin must be non-negative")
    if cfg.heatmap_sigma <= 0:
        raise ConfigError("heatmap_sigma must be positive")
    if cfg.mask_radius < 1:
        raise ConfigError("mask_radius must be at least 1")
    if cfg.l1_weight <= 0:
        raise ConfigError("l1_weight must be positive")
    if cfg.clip_value <= 0:
        raise ConfigError("clip_value must be positive")
    if cfg.n_critic < 1:
        raise ConfigError("n_critic must be at least 1")
    if not 0 <= cfg.map_average <= 1:
        raise ConfigError("map_average must lie in [0, 1]")
    if not (0 <= cfg.adam_beta1 < 1 and 0 <= cfg.adam_beta2 < 1):
        raise ConfigError("adam betas must lie in [0, 1)")
    for name in ("learning_rate", "pose_learning_rate", "map_learning_rate", "invert_lr"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    for name in ("stem_channels", "base_filters", "fg_roi_dim", "bg_dim", "pose_dim",
                 "fc_hidden", "fc_blocks", "critic_filters",
                 "batch_stage1", "batch_pose", "batch_stage2", "checkpoint_every", "invert_restarts"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be at least 1")
    for name in ("iters_stage1", "iters_pose", "iters_stage2", "iters_stage2_pose", "invert_steps"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    if cfg.lr_decay not in ("none", "linear"):
        raise ConfigError("lr_decay must be 'none' or 'linear'")
    if cfg.invert_prior < 0:
        raise ConfigError("invert_prior must be non-negative")
    return cfg


def decayed_lr(base: float, step: int, total: int, schedule: str) -> float:
    """Learning rate for ``step`` of a ``total``-step run under ``schedule``."""
    if schedule == "linear" and total > 0:
        return base * (1.0 - step / total)
    return base


def set_lr(opt, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _coerce(value: str, typ):
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value


def load_config(path) -> PipelineConfig:
    """Read a flat ``key = value`` file; ``#`` starts a comment, unknown keys are errors."""
    types = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown config key: {key}")
        try:
            values[key] = _coerce(value, types[key])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return validate_config(PipelineConfig(**values))


def dump_config(cfg: PipelineConfig, path) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")

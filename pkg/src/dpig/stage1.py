"""Stage-I: multi-branch reconstruction network (foreground, background, pose)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import geometry as geo
from .core import (NUM_KEYPOINTS, NUM_ROIS, POSE_VECTOR_DIM, FactorEmbedding, FactorKind,
                   PipelineConfig, PoseAnnotation, check_image, decayed_lr, pose_to_vector,
                   set_lr)
from .losses import pose_recon_loss, recon_d_loss, recon_g_loss
from .nets import ConvEncoder, ConvResBlock, FCResNet, ImageCritic, UNetDecoder, conv3x3, init_weights

log = logging.getLogger(__name__)


# Above this many heatmap entries, pose geometry is rendered per batch instead of cached.
CACHE_LIMIT = 50_000_000


class TrainingError(RuntimeError):
    pass


class Stem(nn.Module):
    """Full-resolution feature extractor applied before foreground/background masking."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv_in = conv3x3(3, channels)
        self.block = ConvResBlock(channels, downsample=False)
        init_weights(self)

    def forward(self, x):
        return self.block(torch.relu(self.conv_in(x)))


class Stage1(nn.Module):
    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        self.cfg = cfg
        hw = (cfg.image_h, cfg.image_w)
        c = cfg.stem_channels
        self.stem = Stem(c)
        self.fg_encoder = ConvEncoder(c, (cfg.roi_size, cfg.roi_size), cfg.n_blocks,
                                      cfg.base_filters, cfg.fg_roi_dim)
        self.bg_encoder = ConvEncoder(c, hw, cfg.n_blocks, cfg.base_filters, cfg.bg_dim)
        self.decoder = UNetDecoder(cfg.decoder_in_channels, cfg.n_blocks, cfg.base_filters)
        self.critic = ImageCritic(hw, cfg.critic_filters, cfg.n_blocks)
        self.pose_encoder = FCResNet(POSE_VECTOR_DIM, cfg.pose_dim, cfg.fc_hidden, cfg.fc_blocks)
        self.pose_decoder = FCResNet(cfg.pose_dim, POSE_VECTOR_DIM, cfg.fc_hidden, cfg.fc_blocks)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def generator_parameters(self):
        for mod in (self.stem, self.fg_encoder, self.bg_encoder, self.decoder):
            yield from mod.parameters()

    def pose_parameters(self):
        yield from self.pose_encoder.parameters()
        yield from self.pose_decoder.parameters()

    # batched tensor paths -------------------------------------------------
    def encode_fg(self, feats, mask, grids):
        b = feats.shape[0]
        patches = geo.roi_patches(feats * mask, grids)
        return self.fg_encoder(patches).reshape(b, NUM_ROIS * self.cfg.fg_roi_dim)

    def encode_bg(self, feats, inv_mask):
        return self.bg_encoder(feats * inv_mask)

    def encode(self, x, mask, grids):
        feats = self.stem(x)
        return self.encode_fg(feats, mask, grids), self.encode_bg(feats, 1.0 - mask)

    def decode(self, fg, bg, heatmaps):
        return self.decoder.forward_tiled(torch.cat([fg, bg], dim=1), heatmaps)

    def forward(self, x, mask, grids, heatmaps):
        fg, bg = self.encode(x, mask, grids)
        return self.decode(fg, bg, heatmaps)


# --- per-pose geometry bundles ---------------------------------------------------

@dataclass
class PoseTensors:
    """Heatmaps, masks and ROI sampling grids for a batch of poses."""

    heatmaps: torch.Tensor  # B x 18 x H x W
    masks: torch.Tensor  # B x 1 x H x W
    grids: torch.Tensor  # (B*7) x S x S x 2
    vectors: torch.Tensor  # B x 54

    def to(self, dtype):
        return PoseTensors(self.heatmaps.to(dtype), self.masks.to(dtype),
                           self.grids.to(dtype), self.vectors.to(dtype))

    def index(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        g = self.grids.reshape(-1, NUM_ROIS, *self.grids.shape[1:])[idx]
        return PoseTensors(self.heatmaps[idx], self.masks[idx],
                           g.reshape(-1, *self.grids.shape[1:]), self.vectors[idx])


def pose_tensors(poses: Sequence[PoseAnnotation], cfg: PipelineConfig,
                 dtype=torch.float32) -> PoseTensors:
    h, w = cfg.image_h, cfg.image_w
    heat = np.stack([geo.render_heatmaps(p, h, w, cfg.sigma_px) for p in poses]) if poses else \
        np.zeros((0, NUM_KEYPOINTS, h, w))
    masks = np.stack([geo.make_pose_mask(p, h, w, cfg.mask_radius_px) for p in poses])[:, None] \
        if poses else np.zeros((0, 1, h, w))
    boxes = np.concatenate([geo.compute_body_rois(p, h, w, cfg.roi_margin).boxes for p in poses]) \
        if poses else np.zeros((0, 4))
    grids = geo.roi_sampling_grid(boxes, h, w, cfg.roi_size)
    vecs = np.stack([pose_to_vector(p) for p in poses]) if poses else np.zeros((0, POSE_VECTOR_DIM))
    return PoseTensors(torch.as_tensor(heat, dtype=dtype), torch.as_tensor(masks, dtype=dtype),
                       grids.to(dtype), torch.as_tensor(vecs, dtype=dtype))


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """N x H x W x 3 (or one H x W x 3) array -> N x 3 x H x W tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(arr, dtype=dtype).permute(0, 3, 1, 2).contiguous()


def tensor_to_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float64)


# --- per-sample operations -------------------------------------------------------

def _as(model: Stage1, arr) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr), dtype=model.dtype)


@torch.no_grad()
def stem_features(x, model: Stage1) -> np.ndarray:
    x = check_image(x, model.cfg)
    return model.stem(images_to_tensor(x, model.dtype))[0].numpy()


@torch.no_grad()
def fg_encode(fmap, mask, rois: geo.RoiSet, model: Stage1) -> FactorEmbedding:
    cfg = model.cfg
    f = _as(model, fmap)[None]
    m = _as(model, mask)[None, None]
    grids = geo.roi_sampling_grid(rois.boxes, f.shape[-2], f.shape[-1], cfg.roi_size).to(model.dtype)
    return FactorEmbedding(FactorKind.FG, model.encode_fg(f, m, grids)[0].numpy())


@torch.no_grad()
def bg_encode(fmap, inv_mask, model: Stage1) -> FactorEmbedding:
    f = _as(model, fmap)[None]
    m = _as(model, inv_mask)[None, None]
    return FactorEmbedding(FactorKind.BG, model.encode_bg(f, m)[0].numpy())


def tile_appearance(fg: FactorEmbedding, bg: FactorEmbedding, h: int, w: int) -> np.ndarray:
    if fg.kind is not FactorKind.FG or bg.kind is not FactorKind.BG:
        raise ValueError(f"expected (fg, bg) embeddings, got ({fg.kind.value}, {bg.kind.value})")
    app = np.concatenate([fg.values, bg.values])
    return np.broadcast_to(app[:, None, None], (app.shape[0], h, w)).copy()


@torch.no_grad()
def decode_image(appearance, heatmaps, model: Stage1) -> np.ndarray:
    app = _as(model, appearance)
    heat = _as(model, heatmaps)
    if app.shape[-2:] != heat.shape[-2:]:
        raise ValueError(f"appearance {tuple(app.shape)} and heatmaps {tuple(heat.shape)} differ spatially")
    inp = torch.cat([app, heat], dim=0)[None]
    if inp.shape[1] != model.cfg.decoder_in_channels:
        raise ValueError(f"decoder expects {model.cfg.decoder_in_channels} channels, got {inp.shape[1]}")
    return tensor_to_images(model.decoder(inp))[0]


@torch.no_grad()
def encode_factors(x, p: PoseAnnotation, model: Stage1) -> tuple[FactorEmbedding, FactorEmbedding]:
    """(fg, bg) embeddings of one image, exactly as reconstruct computes them."""
    cfg = model.cfg
    x = check_image(x, cfg)
    pt = pose_tensors([p], cfg, model.dtype)
    fg, bg = model.encode(images_to_tensor(x, model.dtype), pt.masks, pt.grids)
    return FactorEmbedding(FactorKind.FG, fg[0].numpy()), FactorEmbedding(FactorKind.BG, bg[0].numpy())


@torch.no_grad()
def compose_batch(fg: np.ndarray, bg: np.ndarray, poses: Sequence[PoseAnnotation],
                  model: Stage1) -> np.ndarray:
    pt = pose_tensors(list(poses), model.cfg, model.dtype)
    out = model.decode(_as(model, fg), _as(model, bg), pt.heatmaps)
    return tensor_to_images(out)


def reconstruct(x, p: PoseAnnotation, model: Stage1, cfg: PipelineConfig | None = None) -> np.ndarray:
    cfg = cfg or model.cfg
    fg, bg = encode_factors(x, p, model)
    return compose_batch(fg.values[None], bg.values[None], [p], model)[0]


@torch.no_grad()
def pose_encode(v, model: Stage1) -> FactorEmbedding:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (POSE_VECTOR_DIM,):
        raise ValueError(f"pose vector must have length {POSE_VECTOR_DIM}, got {v.shape}")
    return FactorEmbedding(FactorKind.POSE, model.pose_encoder(_as(model, v)[None])[0].numpy())


@torch.no_grad()
def pose_decode(e: FactorEmbedding, model: Stage1) -> np.ndarray:
    if e.kind is not FactorKind.POSE:
        raise ValueError(f"expected a pose embedding, got {e.kind.value}")
    return model.pose_decoder(_as(model, e.values)[None])[0].numpy().astype(np.float64)


@torch.no_grad()
def critic_image(x, model: Stage1) -> float:
    x = check_image(x, model.cfg)
    return float(torch.sigmoid(model.critic(images_to_tensor(x, model.dtype)))[0])


# --- training --------------------------------------------------------------------

@dataclass
class Stage1History:
    d_loss: list = field(default_factory=list)
    g_loss: list = field(default_factory=list)
    mae: list = field(default_factory=list)
    pose_loss: list = field(default_factory=list)

    def __len__(self):
        return len(self.g_loss)


def _adam(params, lr, cfg):
    return torch.optim.Adam(params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def _check_finite(name: str, value: float, step: int):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {name} loss ({value}) at iteration {step}")


class Stage1Trainer:
    """Alternating D1/G1 updates with the pose autoencoder trained in the same loop."""

    def __init__(self, images: np.ndarray, poses: Sequence[PoseAnnotation], cfg: PipelineConfig,
                 model: Stage1 | None = None):
        if len(poses) == 0:
            raise TrainingError("stage-I training needs a non-empty dataset")
        self.cfg = cfg
        torch.manual_seed(cfg.rng_seed)
        self.model = model if model is not None else Stage1(cfg)
        dtype = self.model.dtype
        self.x = images_to_tensor(images, dtype)
        self.poses = list(poses)
        self.vectors = torch.as_tensor(np.stack([pose_to_vector(p) for p in self.poses]), dtype=dtype)
        self._pt = None
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.opt_g = _adam(self.model.generator_parameters(), cfg.learning_rate, cfg)
        self.opt_d = _adam(self.model.critic.parameters(), cfg.learning_rate, cfg)
        self.opt_p = _adam(self.model.pose_parameters(), cfg.pose_learning_rate, cfg)
        self.step = 0
        self.history = Stage1History()

    def _pose_batch(self, idx) -> PoseTensors:
        cfg = self.cfg
        if len(self.poses) * NUM_KEYPOINTS * cfg.image_h * cfg.image_w > CACHE_LIMIT:
            return pose_tensors([self.poses[i] for i in idx], cfg, self.model.dtype)
        if self._pt is None:
            self._pt = pose_tensors(self.poses, cfg, self.model.dtype)
        return self._pt.index(idx)

    def _batch(self, size):
        n = len(self.poses)
        return self.rng.choice(n, size=size, replace=size > n)

    def image_step(self):
        m, cfg = self.model, self.cfg
        idx = self._batch(cfg.batch_stage1)
        x = self.x[idx]
        pt = self._pose_batch(idx)

        x_hat = m(x, pt.masks, pt.grids, pt.heatmaps)
        d_rep = recon_d_loss(m.critic(x), m.critic(x_hat.detach()), logits=True)
        self.opt_d.zero_grad()
        d_rep.objective.backward()
        self.opt_d.step()

        g_rep = recon_g_loss(m.critic(x_hat), x_hat, x, cfg.l1_weight, logits=True)
        self.opt_g.zero_grad()
        g_rep.objective.backward()
        self.opt_g.step()
        return d_rep, g_rep

    def pose_step(self):
        m = self.model
        idx = self._batch(self.cfg.batch_pose)
        v = self.vectors[idx]
        rep = pose_recon_loss(m.pose_decoder(m.pose_encoder(v)), v)
        self.opt_p.zero_grad()
        rep.objective.backward()
        self.opt_p.step()
        return rep

    def train(self, iters: int, pose_iters: int | None = None, log_every: int = 500,
              checkpoint_dir: str | Path | None = None, image_branch: bool = True):
        """Run ``iters`` steps; the pose branch steps during the first ``pose_iters`` of them.

        With ``cfg.lr_decay == "linear"`` each learning rate anneals to zero over this call.
        """
        cfg = self.cfg
        pose_iters = cfg.iters_pose if pose_iters is None else pose_iters
        for i in range(iters):
            lr = decayed_lr(cfg.learning_rate, i, iters, cfg.lr_decay)
            set_lr(self.opt_g, lr)
            set_lr(self.opt_d, lr)
            set_lr(self.opt_p, decayed_lr(cfg.pose_learning_rate, i, min(iters, pose_iters), cfg.lr_decay))
            if image_branch:
                d_rep, g_rep = self.image_step()
                _check_finite("discriminator", d_rep.value, self.step)
                _check_finite("generator", g_rep.value, self.step)
                self.history.d_loss.append(d_rep.value)
                self.history.g_loss.append(g_rep.value)
                self.history.mae.append(g_rep.components["mae"])
            if i < pose_iters:
                p_rep = self.pose_step()
                _check_finite("pose", p_rep.value, self.step)
                self.history.pose_loss.append(p_rep.value)
            self.step += 1
            if log_every and self.step % log_every == 0:
                log.info("stage1 it %d mae %.4f pose %.5f", self.step,
                         np.mean(self.history.mae[-log_every:]) if self.history.mae else float("nan"),
                         np.mean(self.history.pose_loss[-log_every:]) if self.history.pose_loss else float("nan"))
            if checkpoint_dir is not None and self.step % self.cfg.checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / f"stage1_{self.step:06d}.ckpt")
        return self.model, self.history

    def save(self, path):
        from .data_io import save_checkpoint
        opt = {"g": self.opt_g.state_dict(), "d": self.opt_d.state_dict(), "p": self.opt_p.state_dict()}
        return save_checkpoint(path, "stage1", self.model.state_dict(), self.cfg, self.step, opt)


def train_stage1(images, poses, cfg: PipelineConfig, iters: int | None = None,
                 checkpoint_dir=None, log_every: int = 500):
    """Train stage-I from scratch; returns (model, history)."""
    trainer = Stage1Trainer(images, poses, cfg)
    iters = cfg.iters_stage1 if iters is None else iters
    return trainer.train(iters, pose_iters=min(iters, cfg.iters_pose),
                         checkpoint_dir=checkpoint_dir, log_every=log_every)


def train_pose_autoencoder(poses, cfg: PipelineConfig, iters: int | None = None,
                           log_every: int = 1000):
    """Pose branch alone (the image branch is skipped)."""
    trainer = Stage1Trainer(np.zeros((len(poses), cfg.image_h, cfg.image_w, 3)), poses, cfg)
    iters = cfg.iters_pose if iters is None else iters
    return trainer.train(iters, pose_iters=iters, log_every=log_every, image_branch=False)


def save_stage1(path, model: Stage1, step: int = 0, optimizer_state: dict | None = None):
    from .data_io import save_checkpoint
    return save_checkpoint(path, "stage1", model.state_dict(), model.cfg, step, optimizer_state)


def load_stage1(path) -> Stage1:
    from .data_io import load_checkpoint
    data = load_checkpoint(path, "stage1")
    model = Stage1(PipelineConfig.from_dict(data["config"]))
    model.load_state_dict(data["params"])
    model.eval()
    return model

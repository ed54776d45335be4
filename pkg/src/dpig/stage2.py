"""Stage-II: adversarial mapping of Gaussian noise onto each factor's embedding distribution."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .core import FactorEmbedding, FactorKind, PipelineConfig, decayed_lr, set_lr
from .losses import wgan_critic_loss, wgan_mapper_loss
from .nets import FCCritic, FCResNet

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class EmbeddingScale(nn.Module):
    """Per-dimension location and scale of one kind's real embeddings (buffers only)."""

    def __init__(self, k: int):
        super().__init__()
        self.register_buffer("loc", torch.zeros(k))
        self.register_buffer("scale", torch.ones(k))

    def fit(self, real: torch.Tensor) -> None:
        std = real.std(dim=0, unbiased=False)
        with torch.no_grad():
            self.loc.copy_(real.mean(dim=0))
            self.scale.copy_(torch.where(std > 1e-8, std, torch.ones_like(std)))


class _Scaled(nn.Module):
    """View of a mapper or critic that works in standardized embedding units."""

    def __init__(self, net: nn.Module, scale: EmbeddingScale, output: bool):
        super().__init__()
        self.net = net
        self.output = output
        object.__setattr__(self, "_scale", scale)  # not a submodule: buffers stay owned by Stage2

    def forward(self, x):
        s = self._scale
        if self.output:
            return s.loc + s.scale * self.net(x)
        return self.net((x - s.loc) / s.scale)


class Stage2(nn.Module):
    """One K -> K mapper and one K -> 1 critic per factor kind.

    Both networks work in standardized units: mapper outputs are rescaled by the
    kind's real-embedding location and scale, and critic inputs are standardized
    with the same statistics. ``mapper(kind)`` and ``critic(kind)`` return views
    that apply this, so callers always see raw embedding units.
    """

    def __init__(self, cfg: PipelineConfig, kinds=tuple(FactorKind)):
        super().__init__()
        self.cfg = cfg
        self.mappers = nn.ModuleDict()
        self.critics = nn.ModuleDict()
        self.scales = nn.ModuleDict()
        for kind in kinds:
            kind = FactorKind(kind)
            k = cfg.embedding_dim(kind)
            self.mappers[kind.value] = FCResNet(k, k, cfg.fc_hidden, cfg.fc_blocks)
            self.critics[kind.value] = FCCritic(k, cfg.fc_hidden)
            self.scales[kind.value] = EmbeddingScale(k)
        self.trained: set[str] = set()

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def mapper(self, kind) -> nn.Module:
        k = FactorKind(kind).value
        return _Scaled(self.mappers[k], self.scales[k], output=True)

    def critic(self, kind) -> nn.Module:
        k = FactorKind(kind).value
        return _Scaled(self.critics[k], self.scales[k], output=False)

    def scale(self, kind) -> EmbeddingScale:
        return self.scales[FactorKind(kind).value]

    def has(self, kind) -> bool:
        return FactorKind(kind).value in self.trained

    def clip_critic(self, kind) -> None:
        c = self.cfg.clip_value
        with torch.no_grad():
            for p in self.critic(kind).parameters():
                p.clamp_(-c, c)


def map_noise(z, kind, stage2: Stage2) -> FactorEmbedding:
    kind = FactorKind(kind)
    z = np.asarray(z, dtype=np.float64)
    k = stage2.cfg.embedding_dim(kind)
    if z.shape != (k,):
        raise ValueError(f"{kind.value} noise must be {k}-d, got {z.shape}")
    with torch.no_grad():
        e = stage2.mapper(kind)(torch.as_tensor(z, dtype=stage2.dtype)[None])[0]
    return FactorEmbedding(kind, e.numpy())


def map_noise_batch(z: np.ndarray, kind, stage2: Stage2) -> np.ndarray:
    with torch.no_grad():
        out = stage2.mapper(kind)(torch.as_tensor(np.asarray(z), dtype=stage2.dtype))
    return out.numpy().astype(np.float64)


def critic_embedding(e: FactorEmbedding, stage2: Stage2, kind=None) -> float:
    if kind is not None and FactorKind(kind) is not e.kind:
        raise ValueError(f"critic for {FactorKind(kind).value} given a {e.kind.value} embedding")
    if e.kind.value not in stage2.critics:
        raise ValueError(f"no critic for {e.kind.value}")
    with torch.no_grad():
        return float(stage2.critic(e.kind)(torch.as_tensor(e.values, dtype=stage2.dtype)[None])[0])


@dataclass
class Stage2History:
    critic_estimate: list = field(default_factory=list)
    mapper_loss: list = field(default_factory=list)

    def __len__(self):
        return len(self.mapper_loss)


def _finite(name, value, step):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {name} loss ({value}) at iteration {step}")


class Stage2Trainer:
    """WGAN training with weight clipping for one factor kind against cached real embeddings."""

    def __init__(self, real: np.ndarray, kind, cfg: PipelineConfig, stage2: Stage2 | None = None,
                 batch_size: int | None = None, seed: int | None = None):
        self.kind = FactorKind(kind)
        real = np.asarray(real)
        if real.ndim != 2 or real.shape[0] == 0:
            raise TrainingError("stage-II training needs a non-empty N x K embedding array")
        k = cfg.embedding_dim(self.kind)
        if real.shape[1] != k:
            raise TrainingError(f"{self.kind.value} embeddings must be {k}-d, got {real.shape[1]}")
        self.cfg = cfg
        seed = cfg.rng_seed if seed is None else seed
        if stage2 is None:
            torch.manual_seed(seed)
            stage2 = Stage2(cfg)
        self.stage2 = stage2
        self.real = torch.as_tensor(real, dtype=stage2.dtype)
        self.batch = batch_size or cfg.batch_stage2
        self.gen = torch.Generator().manual_seed(seed)
        self.opt_m = torch.optim.Adam(stage2.mapper(kind).parameters(), lr=cfg.map_learning_rate,
                                      betas=(cfg.adam_beta1, cfg.adam_beta2))
        self.opt_c = torch.optim.Adam(stage2.critic(kind).parameters(), lr=cfg.map_learning_rate,
                                      betas=(cfg.adam_beta1, cfg.adam_beta2))
        self.history = Stage2History()
        self.step = 0
        if not stage2.has(self.kind):
            # a fresh kind takes its units from the data; continued training keeps them
            stage2.scale(self.kind).fit(self.real)
        stage2.clip_critic(kind)

    def _noise(self):
        return torch.randn(self.batch, self.real.shape[1], generator=self.gen, dtype=self.stage2.dtype)

    def _real(self):
        idx = torch.randint(0, self.real.shape[0], (self.batch,), generator=self.gen)
        return self.real[idx]

    def train(self, iters: int, log_every: int = 1000):
        mapper, critic = self.stage2.mapper(self.kind), self.stage2.critic(self.kind)
        params = list(self.stage2.mappers[self.kind.value].parameters())
        avg_from = iters - int(round(iters * self.cfg.map_average))
        avg, n_avg = None, 0
        for i in range(iters):
            lr = decayed_lr(self.cfg.map_learning_rate, i, iters, self.cfg.lr_decay)
            set_lr(self.opt_c, lr)
            set_lr(self.opt_m, lr)
            for _ in range(self.cfg.n_critic):
                with torch.no_grad():
                    fake = mapper(self._noise())
                rep = wgan_critic_loss(critic(self._real()), critic(fake))
                self.opt_c.zero_grad()
                rep.objective.backward()
                self.opt_c.step()
                self.stage2.clip_critic(self.kind)
            _finite("critic", rep.value, self.step)
            m_rep = wgan_mapper_loss(critic(mapper(self._noise())))
            self.opt_m.zero_grad()
            m_rep.objective.backward()
            self.opt_m.step()
            _finite("mapper", m_rep.value, self.step)
            if i >= avg_from and avg_from < iters:
                # running mean of the mapper weights; damps the WGAN oscillation at the end
                n_avg += 1
                with torch.no_grad():
                    if avg is None:
                        avg = [p.detach().clone() for p in params]
                    else:
                        for a, p in zip(avg, params):
                            a.add_(p.detach() - a, alpha=1.0 / n_avg)
            self.history.critic_estimate.append(rep.value)
            self.history.mapper_loss.append(m_rep.value)
            self.step += 1
            if log_every and self.step % log_every == 0:
                log.info("stage2[%s] it %d W-estimate %.3e", self.kind.value, self.step,
                         np.mean(self.history.critic_estimate[-log_every:]))
        if avg is not None:
            with torch.no_grad():
                for a, p in zip(avg, params):
                    p.copy_(a)
        if iters > 0:
            self.stage2.trained.add(self.kind.value)
        return self.stage2, self.history


def train_stage2(real_embeddings, kind, cfg: PipelineConfig, iters: int | None = None,
                 stage2: Stage2 | None = None, log_every: int = 1000):
    kind = FactorKind(kind)
    if iters is None:
        iters = cfg.iters_stage2_pose if kind is FactorKind.POSE else cfg.iters_stage2
    trainer = Stage2Trainer(np.asarray(real_embeddings), kind, cfg, stage2)
    return trainer.train(iters, log_every=log_every)


def save_stage2(path, stage2: Stage2, step: int = 0):
    from .data_io import save_checkpoint
    return save_checkpoint(path, "stage2", stage2.state_dict(), stage2.cfg, step,
                           meta={"trained": sorted(stage2.trained)})


def load_stage2(path) -> Stage2:
    from .core import PipelineConfig
    from .data_io import load_checkpoint
    data = load_checkpoint(path, "stage2")
    cfg = PipelineConfig.from_dict(data["config"])
    s2 = Stage2(cfg)
    s2.load_state_dict(data["params"])
    s2.trained = set(data["meta"].get("trained", []))
    return s2

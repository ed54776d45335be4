"""Adversarial, reconstruction and Wasserstein objectives.

Each function returns a :class:`LossReport`. ``value`` is the quantity named
in the docstring; ``objective`` is the differentiable scalar an optimizer
*minimizes*, with the sign flip (if any) recorded under
``components["sign"]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


@dataclass
class LossReport:
    name: str
    value: float
    components: dict = field(default_factory=dict)
    objective: torch.Tensor | None = field(default=None, repr=False, compare=False)


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _f(t) -> float:
    return float(t.detach())


def _check_prob(name, s):
    if torch.any(s <= 0) or torch.any(s >= 1):
        raise ValueError(f"{name} scores must lie strictly inside (0, 1)")


def recon_d_loss(score_real, score_fake, logits: bool = False) -> LossReport:
    """mean log D(x) + mean log(1 - D(G(x, h))); the discriminator maximizes it.

    With ``logits=True`` the inputs are pre-sigmoid critic outputs and the
    logs are evaluated stably.
    """
    sr, sf = _t(score_real).reshape(-1), _t(score_fake).reshape(-1)
    if logits:
        log_real = F.logsigmoid(sr)
        log_not_fake = F.logsigmoid(-sf)
    else:
        _check_prob("score_real", sr)
        _check_prob("score_fake", sf)
        log_real = torch.log(sr)
        log_not_fake = torch.log1p(-sf)
    real_term = log_real.mean()
    fake_term = log_not_fake.mean()
    value = real_term + fake_term
    return LossReport(
        "recon_d", _f(value),
        {"real_term": _f(real_term), "fake_term": _f(fake_term), "sign": -1.0},
        objective=-value,
    )


def recon_g_loss(score_fake, x_hat, x, l1_weight: float, logits: bool = False) -> LossReport:
    """-mean log D(G(x, h)) + lambda * mean |G(x, h) - x|, minimized by the generator.

    components: ``adv_term`` (the negated log-score), ``l1`` (lambda-weighted
    mean absolute error) and ``mae`` (unweighted).
    """
    sf = _t(score_fake).reshape(-1)
    x_hat, x = _t(x_hat), _t(x)
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    if l1_weight <= 0:
        raise ValueError("l1_weight must be positive")
    if logits:
        log_score = F.logsigmoid(sf).mean()
    else:
        _check_prob("score_fake", sf)
        log_score = torch.log(sf).mean()
    mae = (x_hat - x).abs().mean()
    adv_term = -log_score
    l1_term = l1_weight * mae
    total = adv_term + l1_term
    return LossReport(
        "recon_g", _f(total),
        {"adv_term": _f(adv_term), "log_score": _f(log_score), "l1": _f(l1_term),
         "mae": _f(mae), "l1_weight": float(l1_weight), "sign": 1.0},
        objective=total,
    )


def pose_recon_loss(v_hat, v) -> LossReport:
    """Mean over the batch of the squared L2 norm of the 54-d pose difference."""
    v_hat, v = _t(v_hat), _t(v)
    if v_hat.shape != v.shape or v.shape[-1] != 54:
        raise ValueError(f"pose vectors must both be (..., 54), got {tuple(v_hat.shape)}, {tuple(v.shape)}")
    sq = ((v_hat - v) ** 2).reshape(-1, 54).sum(dim=1)
    value = sq.mean()
    return LossReport("pose_recon", _f(value), {"sign": 1.0}, objective=value)


def wgan_critic_loss(d_real, d_fake) -> LossReport:
    """E[D(e)] - E[D(phi(z))]; the critic maximizes this estimate."""
    dr, df = _t(d_real).reshape(-1), _t(d_fake).reshape(-1)
    real_mean, fake_mean = dr.mean(), df.mean()
    value = real_mean - fake_mean
    return LossReport(
        "wgan_critic", _f(value),
        {"real_mean": _f(real_mean), "fake_mean": _f(fake_mean), "sign": -1.0},
        objective=-value,
    )


def wgan_mapper_loss(d_fake) -> LossReport:
    """E[D(phi(z))]. The mapper maximizes the critic score on its samples,
    so the minimized objective is its negation."""
    df = _t(d_fake).reshape(-1)
    value = df.mean()
    return LossReport("wgan_mapper", _f(value), {"sign": -1.0}, objective=-value)

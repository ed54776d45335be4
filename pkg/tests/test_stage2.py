import numpy as np
import pytest
import torch

from dpig.core import FactorEmbedding, FactorKind, PipelineConfig
from dpig.evaluation import embedding_frechet
from dpig.stage2 import (Stage2, Stage2Trainer, TrainingError, critic_embedding, load_stage2,
                         map_noise, map_noise_batch, save_stage2, train_stage2)

from conftest import tiny_config


def test_default_mapper_dimensions():
    torch.manual_seed(0)
    s2 = Stage2(PipelineConfig())
    for kind, k in ((FactorKind.FG, 224), (FactorKind.BG, 128), (FactorKind.POSE, 32)):
        e = map_noise(np.random.default_rng(0).standard_normal(k), kind, s2)
        assert e.kind is kind and e.dim == k
        assert s2.mappers[kind.value].fc_in.in_features == k and s2.mappers[kind.value].fc_out.out_features == k
        assert len([m for m in s2.critic(kind).modules() if isinstance(m, torch.nn.Linear)]) == 4


def test_map_noise_contract(tiny_models, tiny_cfg):
    _, s2 = tiny_models
    z = np.random.default_rng(0).standard_normal(tiny_cfg.fg_dim)
    a = map_noise(z, "fg", s2)
    assert np.array_equal(a.values, map_noise(z, "fg", s2).values)
    with pytest.raises(ValueError, match="14-d"):
        map_noise(z[:-1], "fg", s2)
    deltas = [np.abs(map_noise(z + d, "fg", s2).values - a.values).max() for d in (1e-1, 1e-3, 1e-5)]
    assert deltas[0] >= deltas[1] >= deltas[2] and deltas[2] < 1e-4
    batch = map_noise_batch(np.stack([z, z]), "fg", s2)
    assert np.allclose(batch[0], a.values, atol=1e-6)


def test_critic_embedding(tiny_models, tiny_cfg):
    _, s2 = tiny_models
    e = FactorEmbedding("bg", np.random.default_rng(0).standard_normal(tiny_cfg.bg_dim))
    v = critic_embedding(e, s2)
    assert v == critic_embedding(e, s2, kind="bg")
    with torch.no_grad():
        s2.critics["bg"].net[0].bias += 0.3
    assert critic_embedding(e, s2) != v
    with pytest.raises(ValueError, match="critic for pose"):
        critic_embedding(e, s2, kind="pose")


def test_zero_iterations_keeps_init(tiny_cfg):
    real = np.random.default_rng(0).standard_normal((20, tiny_cfg.pose_dim))
    torch.manual_seed(tiny_cfg.rng_seed)
    ref = {k: v.clone() for k, v in Stage2(tiny_cfg).state_dict().items()}
    s2, hist = train_stage2(real, "pose", tiny_cfg, iters=0)
    assert len(hist) == 0 and not s2.has("pose")
    for k, v in s2.state_dict().items():
        if k.startswith("critics.pose."):
            # the clipping postcondition is enforced from the start
            assert torch.equal(v, ref[k].clamp(-tiny_cfg.clip_value, tiny_cfg.clip_value))
        elif not k.startswith("scales.pose."):
            assert torch.equal(v, ref[k])
    assert np.allclose(s2.scale("pose").loc.numpy(), real.mean(0), atol=1e-6)
    assert np.allclose(s2.scale("pose").scale.numpy(), real.std(0), atol=1e-6)


def test_views_work_in_raw_units(tiny_cfg):
    torch.manual_seed(0)
    s2 = Stage2(tiny_cfg)
    rng = np.random.default_rng(1)
    real = rng.standard_normal((50, tiny_cfg.pose_dim)) * 0.01 + 3.0
    Stage2Trainer(real, "pose", tiny_cfg, s2)
    sc = s2.scale("pose")
    z = torch.as_tensor(rng.standard_normal((4, tiny_cfg.pose_dim)), dtype=s2.dtype)
    with torch.no_grad():
        assert torch.allclose(s2.mapper("pose")(z), sc.loc + sc.scale * s2.mappers["pose"](z))
        e = sc.loc + sc.scale * z
        assert torch.allclose(s2.critic("pose")(e), s2.critics["pose"](z), atol=1e-5)
    # the views expose exactly the underlying parameters, so optimizers and clipping see them
    assert list(s2.mapper("pose").parameters()) == list(s2.mappers["pose"].parameters())
    assert list(s2.critic("pose").parameters()) == list(s2.critics["pose"].parameters())
    assert [n for n, _ in s2.named_buffers()].count("scales.pose.loc") == 1


def test_continued_training_keeps_units(tiny_cfg):
    rng = np.random.default_rng(2)
    real = rng.standard_normal((30, tiny_cfg.pose_dim))
    s2, _ = train_stage2(real, "pose", tiny_cfg, iters=2)
    before = s2.scale("pose").loc.clone()
    Stage2Trainer(real + 5.0, "pose", tiny_cfg, s2).train(1)
    assert torch.equal(s2.scale("pose").loc, before)


def test_constant_dimension_gets_unit_scale(tiny_cfg):
    real = np.random.default_rng(3).standard_normal((10, tiny_cfg.pose_dim))
    real[:, 0] = 0.25
    s2, _ = train_stage2(real, "pose", tiny_cfg, iters=1)
    assert s2.scale("pose").scale[0] == 1.0
    assert torch.isfinite(s2.mapper("pose")(torch.zeros(1, tiny_cfg.pose_dim))).all()


def _mapper_weights(s2, kind="pose"):
    return [p.detach().clone() for p in s2.mappers[kind].parameters()]


def test_map_average_is_mean_of_iterates(tiny_cfg):
    real = np.random.default_rng(4).standard_normal((40, tiny_cfg.pose_dim))
    cfg = tiny_cfg.replace(lr_decay="none", map_average=0.0)
    torch.manual_seed(0)
    step = Stage2Trainer(real, "pose", cfg, seed=5)
    iterates = []
    for _ in range(3):
        step.train(1)
        iterates.append(_mapper_weights(step.stage2))
    torch.manual_seed(0)
    avg = Stage2Trainer(real, "pose", cfg.replace(map_average=1.0), seed=5)
    avg.train(3)
    for got, *its in zip(_mapper_weights(avg.stage2), *iterates):
        assert torch.allclose(got, sum(its) / 3, atol=1e-12)
    # the critic is not averaged
    for a, b in zip(avg.stage2.critics["pose"].parameters(), step.stage2.critics["pose"].parameters()):
        assert torch.equal(a, b)


def test_map_average_zero_keeps_last_iterate(tiny_cfg):
    real = np.random.default_rng(4).standard_normal((40, tiny_cfg.pose_dim))
    cfg = tiny_cfg.replace(map_average=0.0)
    torch.manual_seed(0)
    a = Stage2Trainer(real, "pose", cfg, seed=5)
    a.train(4)
    torch.manual_seed(0)
    b = Stage2Trainer(real, "pose", cfg.replace(map_average=0.25), seed=5)
    b.train(4)
    # the averaging window is one step long, so it is the last iterate
    assert all(torch.equal(x, y) for x, y in zip(_mapper_weights(a.stage2), _mapper_weights(b.stage2)))


@pytest.mark.parametrize("bad", [-0.1, 1.5])
def test_map_average_range(tiny_cfg, bad):
    from dpig.core import ConfigError
    with pytest.raises(ConfigError, match="map_average"):
        tiny_cfg.replace(map_average=bad)


def test_clipping_after_every_critic_step(tiny_cfg, monkeypatch):
    real = np.random.default_rng(0).standard_normal((20, tiny_cfg.pose_dim)) * 5
    tr = Stage2Trainer(real, "pose", tiny_cfg.replace(map_learning_rate=0.05))
    c = tiny_cfg.clip_value
    orig = tr.opt_c.step
    seen = []

    def step():
        orig()
        seen.append(max(p.abs().max().item() for p in tr.stage2.critic("pose").parameters()))

    monkeypatch.setattr(tr.opt_c, "step", step)
    tr.train(4, log_every=0)
    assert len(seen) == 4 * tiny_cfg.n_critic
    assert max(seen) > c  # an unclipped step overshoots ...
    assert all(p.abs().max() <= c for p in tr.stage2.critic("pose").parameters())  # ... and is clipped
    assert len(tr.history) == 4 and tr.stage2.has("pose")


def test_trainer_errors(tiny_cfg):
    with pytest.raises(TrainingError, match="non-empty"):
        Stage2Trainer(np.zeros((0, tiny_cfg.pose_dim)), "pose", tiny_cfg)
    with pytest.raises(TrainingError, match="3-d"):
        Stage2Trainer(np.zeros((5, 7)), "pose", tiny_cfg)
    bad = np.full((5, tiny_cfg.pose_dim), np.inf)
    with pytest.raises(TrainingError, match="non-finite"):
        Stage2Trainer(bad, "pose", tiny_cfg).train(1)


def test_save_load(tmp_path, tiny_models):
    _, s2 = tiny_models
    save_stage2(tmp_path / "s2.ckpt", s2)
    back = load_stage2(tmp_path / "s2.ckpt")
    assert back.trained == s2.trained and back.cfg == s2.cfg
    for k, v in s2.state_dict().items():
        assert torch.equal(back.state_dict()[k], v)


def test_matches_known_gaussian_mean():
    """K = 8 target with known mean; Monte-Carlo mean of 10^4 mapped samples lands within 0.1."""
    cfg = PipelineConfig(pose_dim=8, fc_hidden=128, map_learning_rate=1e-4, batch_stage2=64)
    rng = np.random.default_rng(0)
    mu = rng.uniform(-1, 1, 8)
    a = rng.standard_normal((8, 8)) * 0.3
    real = rng.standard_normal((5000, 8)) @ a + mu
    s2, _ = train_stage2(real, "pose", cfg, iters=2000, log_every=0)
    z = np.random.default_rng(1).standard_normal((10_000, 8))
    out = map_noise_batch(z, "pose", s2)
    assert np.abs(out.mean(0) - mu).max() < 0.1
    assert embedding_frechet(real, out) < 0.5

import numpy as np
import pytest
import torch

from dpig.core import NUM_KEYPOINTS, PipelineConfig, PoseAnnotation
from dpig.data_io import SynthConfig, synth_sample


def tiny_config(**kw) -> PipelineConfig:
    """16x8 images and narrow layers; fast enough for finite-difference checks."""
    base = dict(image_h=16, image_w=8, n_blocks=2, roi_size=4, stem_channels=3, base_filters=3,
                fg_roi_dim=2, bg_dim=4, pose_dim=3, fc_hidden=8, fc_blocks=1, critic_filters=3,
                batch_stage1=4, batch_pose=8, batch_stage2=8, iters_stage1=10, iters_pose=10,
                iters_stage2=5, iters_stage2_pose=5, checkpoint_every=1000, invert_steps=50)
    base.update(kw)
    return PipelineConfig(**base)


def random_pose(rng, p_visible=0.8) -> PoseAnnotation:
    coords = rng.uniform(-0.95, 0.95, size=(NUM_KEYPOINTS, 2))
    vis = (rng.random(NUM_KEYPOINTS) < p_visible).astype(np.uint8)
    return PoseAnnotation.from_arrays(coords, vis)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data():
    return synth_sample(SynthConfig(n_images=12, image_h=16, image_w=8, seed=3))


@pytest.fixture
def tiny_models(tiny_cfg):
    from dpig.stage1 import Stage1
    from dpig.stage2 import Stage2
    torch.manual_seed(0)
    s1 = Stage1(tiny_cfg)
    s2 = Stage2(tiny_cfg)
    s2.trained.update({"fg", "bg", "pose"})
    return s1, s2


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

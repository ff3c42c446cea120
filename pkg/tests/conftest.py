import numpy as np
import pytest
import torch

from radefusion.config import desk_profile
from radefusion.dataio import OcclusionSpec, generate_scene
from radefusion.geometry import CameraModel


@pytest.fixture(scope="session")
def desk_cfg():
    return desk_profile()


@pytest.fixture(scope="session")
def desk_frames(desk_cfg):
    """A handful of deterministic frames shared across tests."""
    return [
        generate_scene(seed, 2, desk_cfg.grid, desk_cfg.camera, OcclusionSpec(), desk_cfg.scene)
        for seed in range(4)
    ]


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(1234)
    np.random.seed(1234)


def identity_camera(image_hw=(64, 64), focal=32.0) -> CameraModel:
    """Camera frame == ego frame (z is depth); handy for hand-checkable math."""
    h, w = image_hw
    intr = np.array([[focal, 0.0, w / 2.0], [0.0, focal, h / 2.0], [0.0, 0.0, 1.0]])
    return CameraModel(intrinsics=intr, extrinsics=np.eye(4), image_size=image_hw)

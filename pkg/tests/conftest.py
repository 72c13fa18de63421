import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from freqsplat.scene import Camera, GaussianCloud


def random_cloud(rng, k, pos_range=0.35, scale_range=(0.03, 0.15),
                 opacity_range=(0.3, 0.9)):
    return GaussianCloud.from_values(
        positions=rng.uniform(-pos_range, pos_range, (k, 3)),
        scales=rng.uniform(*scale_range, size=(k, 3)),
        rotations=rng.normal(size=(k, 4)),
        colors=rng.uniform(0.1, 0.9, (k, 3)),
        opacities=rng.uniform(*opacity_range, size=k),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    return Camera(azimuth=25.0, elevation=12.0, distance=1.5, fov_y=49.1,
                  width=8, height=8)

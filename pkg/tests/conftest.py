import numpy as np
import pytest

from splatrack.gaussian_map import GaussianMap, rgb_to_sh_dc
from splatrack.lie import so3_exp, v2t
from splatrack.rasterizer import CameraIntrinsics


def gray_map(means, scales, opacities, grays):
    """Axis-aligned degree-0 map with gray colours."""
    means = np.asarray(means, dtype=float).reshape(-1, 3)
    n = means.shape[0]
    scales = np.broadcast_to(np.asarray(scales, dtype=float), (n, 3))
    sh = rgb_to_sh_dc(np.repeat(np.asarray(grays, dtype=float).reshape(n, 1), 3, axis=1))
    return GaussianMap(means, np.tile([1.0, 0, 0, 0], (n, 1)), scales,
                       np.broadcast_to(np.asarray(opacities, dtype=float), (n,)), sh[:, None, :])


def random_transform(rng, t_scale=0.3, r_scale=0.5):
    return v2t(rng.normal(0, t_scale, 3), rng.normal(0, r_scale, 3))


def random_rotation(rng):
    phi = rng.normal(size=3)
    phi *= rng.uniform(0, 3.0) / np.linalg.norm(phi)
    return so3_exp(phi)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_intr():
    return CameraIntrinsics(60.0, 60.0, 31.5, 31.5, 64, 64)

import numpy as np
import pytest

from holotele.synthetic import SyntheticScene, gen_synthetic, make_dataset


@pytest.fixture(scope="session")
def clean_data():
    return make_dataset(SyntheticScene(seed=0))


@pytest.fixture(scope="session")
def noisy_data():
    return make_dataset(SyntheticScene(marker_sigma=0.002, depth_sigma=0.002, pixel_sigma=0.5, seed=7))


@pytest.fixture(scope="session")
def seq_root(tmp_path_factory):
    """Small generated dataset (quarter-size color) with a moving person."""
    root = tmp_path_factory.mktemp("gen")
    scene = SyntheticScene(object="person", depth_sigma=0.002, frames=3, color_scale=0.25,
                           motion_radius=0.3, seed=11)
    data = gen_synthetic(scene, root)
    return root, data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, max_angle=np.pi, max_shift=2.0):
    from scipy.spatial.transform import Rotation

    from holotele.geometry import Pose

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()
    return Pose(R, rng.uniform(-max_shift, max_shift, 3))

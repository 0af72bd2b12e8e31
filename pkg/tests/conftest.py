import numpy as np
import pytest

from dataset import SyntheticConfig, generate_synthetic
from mesh import Mesh, grid_mesh
from render import Camera


def centered_square(n: int = 1, size: float = 1.0) -> Mesh:
    'A flat n x n grid in the z = 0 plane, centered at the origin, facing +z.'
    grid = grid_mesh(n, n, (size, size))
    return grid.with_vertices(grid.vertices - [size / 2, size / 2, 0.0])


@pytest.fixture
def square():
    return centered_square()


@pytest.fixture
def front_camera():
    'Looks down -z at the origin from z = 3.'
    return Camera.look_at([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], width=32, height=32)


@pytest.fixture(scope='session')
def tiny_synthetic_config():
    return SyntheticConfig(n_frames=3, resolution=48, rings=4, segments=8,
                           texture_resolution=16, checker_cells=4, camera_distance=2.0, template_scale=1.0)


@pytest.fixture(scope='session')
def tiny_dataset(tiny_synthetic_config):
    return generate_synthetic(tiny_synthetic_config, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)

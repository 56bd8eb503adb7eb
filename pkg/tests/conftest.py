import numpy as np
import pytest
from scipy.spatial import ConvexHull

from mfface.dataset import GeneratorConfig, generate_synthetic
from mfface.mesh import Mesh
from mfface.toy import make_gt_model, make_toy_assets


def sphere_mesh(n: int = 200, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Fibonacci-sphere points triangulated by their convex hull, faces oriented outward."""
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5**0.5) * k
    p = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)
    faces = ConvexHull(p).simplices.copy()
    tri = p[faces]
    out = np.sum(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]) * tri.mean(1), 1) < 0
    faces[out] = faces[out][:, ::-1]
    return Mesh(radius * p + np.asarray(center), faces)


@pytest.fixture(scope="session")
def toy_assets():
    return make_toy_assets(500)


@pytest.fixture(scope="session")
def small_model(toy_assets):
    mesh, blend, sig = toy_assets
    return make_gt_model(mesh, blend, sig, node_count=60, n_identity=4, n_appearance=4)


@pytest.fixture(scope="session")
def small_sample(small_model):
    return generate_synthetic(small_model, GeneratorConfig(n_subjects=1, frames=2, image_size=64))[0]


@pytest.fixture(scope="session")
def toy_model_1000():
    mesh, blend, sig = make_toy_assets(1000)
    return make_gt_model(mesh, blend, sig)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

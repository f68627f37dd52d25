import numpy as np
import pytest

from traitnerf import dataset, geometry, synth
from traitnerf.config import RunConfig

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng: np.random.Generator, size=(40, 64), max_angle_deg: float = 20.0) -> geometry.Camera:
    """Camera around the origin looking roughly down +z at a scene near z = 3."""
    f = rng.uniform(40, 80)
    K = np.array([[f, 0.0, size[1] / 2 + rng.uniform(-2, 2)], [0.0, f * rng.uniform(0.9, 1.1), size[0] / 2], [0, 0, 1]])
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg))
    Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * Kx @ Kx
    t = rng.uniform(-0.3, 0.3, 3)
    return geometry.Camera(K, R, t, size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> RunConfig:
    base = dict(image_size=(16, 10), n_depth=8, n_c1=2, n_c2=2, feature_hidden=2, unet_mid=4, mlp_width=8,
                mlp_layers=2, pe_freqs=1, window=6, steps=0, n_views_in=2)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def micro_scene_dir(tmp_path_factory):
    """A 32x20 synthetic scene written to disk once per session."""
    out = tmp_path_factory.mktemp("micro_scene")
    scene = synth.make_scene(synth.SceneConfig(image_size=(32, 20)), seed=3)
    dataset.write_dataset(scene, out)
    return out


@pytest.fixture(scope="session")
def tiny_scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_scene")
    scene = synth.make_scene(synth.SceneConfig(image_size=(16, 10)), seed=5)
    dataset.write_dataset(scene, out)
    return out

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from pointgcn.data import Dataset, synth_generate  # noqa: E402
from pointgcn.model import ModelConfig  # noqa: E402
from pointgcn.pointcloud import PointCloud, normalize_unit_sphere  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def random_cloud(n: int = 32, seed: int = 0, label=None) -> PointCloud:
    rng = np.random.default_rng(seed)
    return normalize_unit_sphere(PointCloud(rng.normal(size=(n, 3)), label))


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def numeric_gradient(f, x: np.ndarray, indices, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f() with respect to x[index], x modified in place."""
    grads = []
    for index in indices:
        saved = x[index]
        x[index] = saved + h
        up = f()
        x[index] = saved - h
        down = f()
        x[index] = saved
        grads.append((up - down) / (2 * h))
    return np.array(grads)


@pytest.fixture
def cloud():
    return random_cloud(32, seed=1)


@pytest.fixture
def tiny_config():
    """Small float64 model used by gradient checks."""
    return ModelConfig(
        class_count=3,
        knn_k=6,
        cheb_order=2,
        filters=(8, 8),
        keep_probs=(1.0, 1.0),
        weight_decay=0.0,
        dtype="float64",
    )


@pytest.fixture
def toy_sets():
    """4-class synthetic train/test splits of 32-point clouds."""
    train_set = synth_generate(per_class=3, n_points=32, seed=1)
    test_set = synth_generate(per_class=2, n_points=32, seed=2)
    return train_set, test_set


@pytest.fixture
def toy_config():
    return ModelConfig(class_count=4, knn_k=8, cheb_order=2, filters=(8, 8), centroid_count=12, cluster_k=6)


@pytest.fixture
def empty_dataset():
    return Dataset([], ["a", "b"])

import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir)))

from PanopticRoad.synthetic import generate_synthetic
from PanopticRoad.model import ModelConfig, build_model
import pytest
import torch

TINY_SIZE = 64


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks (deselect with -m 'not slow')")


@pytest.fixture(autouse=True)
def cpu_only(monkeypatch):
    monkeypatch.setenv("PANROAD_DEVICE", "cpu")


@pytest.fixture
def tiny_config():
    return ModelConfig(scale="n", seg_tasks=["drivable", "lane"], input_size=TINY_SIZE)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return build_model(tiny_config)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(str(root), n_train=4, n_val=2, size=TINY_SIZE, seed=0)
    return str(root)


def tiny_run_overrides(out_dir, epochs=2):
    """Overrides for a training run that finishes in seconds on a CPU."""
    return [
        "data.root=synthetic",
        f"out_dir={out_dir}",
        f"model.input_size={TINY_SIZE}",
        f"data.synthetic_size={TINY_SIZE}",
        "data.synthetic_n=4",
        "data.synthetic_val_n=2",
        f"optim.epochs_max={epochs}",
        f"optim.patience={epochs - 1}",
        "optim.batch_size=2",
        "augment.close_mosaic=1",
        "device=cpu",
    ]

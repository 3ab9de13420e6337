import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from skynas.tensor import kernels

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

KERNEL_FUNCS = (
    "dwconv3_forward",
    "dwconv3_backward_input",
    "dwconv3_backward_weight",
    "maxpool2_forward",
    "maxpool2_backward",
    "bn_train_forward",
    "bn_train_backward",
    "relu6_backward",
)

BACKENDS = ["python"] + (["cython"] if kernels.compiled_backend is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    mod = kernels.python_backend if request.param == "python" else kernels.compiled_backend
    for name in KERNEL_FUNCS:
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_data():
    """Small synthetic train/val sets at 32x64 (generated once per session)."""
    from skynas.data import DatasetSpec, generate

    return (
        generate(DatasetSpec(count=160, image_hw=(32, 64), seed=0)),
        generate(DatasetSpec(count=64, image_hw=(32, 64), seed=1)),
    )


@pytest.fixture(scope="session")
def tiny_trained(tiny_data):
    """A width/8 SkyNet-C briefly trained at 32x64."""
    from skynas.genome import instantiate, skynet_genome
    from skynas.model import Model
    from skynas.train import TrainConfig, fit_anchors, train

    tr, _ = tiny_data
    m = Model.initialize(instantiate(skynet_genome("C", 8), (3, 32, 64)), seed=0, anchors=fit_anchors(tr.boxes))
    trained, _ = train(m, tr, TrainConfig(epochs=6, lr=0.05, batch_size=16))
    return trained


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest
import torch
from scipy import ndimage

from muvi_tta.model import NormPolicy, build_toy_unet
from muvi_tta.volume import Volume


def make_model(kind="batch_norm", seed=3, patch=16):
    norm = NormPolicy.batch() if kind == "batch_norm" else NormPolicy.instance()
    model = build_toy_unet(4, 2, norm, (patch,) * 3, seed=seed)
    if kind == "batch_norm":
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in model.norm_layers:
                layer.running_mean.copy_(torch.randn(layer.channels, generator=g) * 0.1)
                layer.running_var.copy_(torch.rand(layer.channels, generator=g) + 0.5)
    return model


def make_volume(seed=0, shape=(24, 24, 24), spacing=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng(seed)
    data = ndimage.gaussian_filter(rng.standard_normal(shape), 2.0) * 4
    return Volume(data.astype(np.float32), spacing=spacing)


@pytest.fixture
def bn_model():
    return make_model("batch_norm")


@pytest.fixture
def in_model():
    return make_model("instance_norm")


@pytest.fixture
def volume():
    return make_volume()


# acceptance-criterion lines collected by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1][1:])):
            terminalreporter.write_line(line)

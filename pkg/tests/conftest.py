import numpy as np
import pytest
import torch

from hierpaint.backbone import BackboneConfig, SliceUNet
from hierpaint.data import generate_lesion_mask, generate_phantom, transplant_mask
from hierpaint.diffusion import build_linear_schedule

TINY_BACKBONE = dict(base_channels=8, channel_multipliers=(1, 2, 2, 2), timestep_embedding_dim=16)


def tiny_model(stage, seed=0, use_tam=False):
    """Untrained tiny backbone with a non-zero output head."""
    torch.manual_seed(seed)
    model = SliceUNet(BackboneConfig(use_tam=use_tam, **TINY_BACKBONE))
    with torch.no_grad():
        model.out_conv.weight.normal_(0, 0.05)
    model.stage = stage
    model.schedule_params = build_linear_schedule().to_dict()
    model.eval()
    return model


def phantom_case(seed, shape=(32, 32, 16)):
    vol, labels = generate_phantom(seed, shape)
    rng = np.random.default_rng(1000 + seed)
    mask = transplant_mask(vol, generate_lesion_mask(shape, rng), rng)
    return vol, labels, mask


@pytest.fixture(scope="session")
def axial_model():
    return tiny_model("axial", 1)


@pytest.fixture(scope="session")
def coronal_model():
    return tiny_model("coronal", 2)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])

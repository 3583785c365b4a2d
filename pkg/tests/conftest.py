import numpy as np
import pytest
import torch

from casn.backbone import CASNModel
from casn.data import generate_synthetic


@pytest.fixture
def tiny_model():
    """Float64 tiny model in eval mode with non-trivial BN statistics."""
    torch.manual_seed(0)
    model = CASNModel(num_classes=5, backbone="tiny", hidden_dim=32).double()
    with torch.no_grad():
        model.train()
        model.extract_features(torch.randn(8, 3, 32, 16, dtype=torch.float64))
    return model.eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    rows = generate_synthetic(root, n_identities=8, images_per_identity=6, image_size=(64, 32), seed=0)
    return root, rows


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance") or sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

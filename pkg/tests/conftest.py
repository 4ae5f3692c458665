import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from vqcseq.data import generate_dataset  # noqa: E402
from vqcseq.model import ModelConfig, VQSeq2Seq  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model():
    """8x8 images, D=2, K=8, N=3, float64."""
    cfg = ModelConfig(D=2, K=8, N=3, base_channels=4, downsample_stages=1, seed=3)
    return VQSeq2Seq(cfg).double()


@pytest.fixture
def small_model():
    cfg = ModelConfig(D=3, K=16, N=4, base_channels=4, downsample_stages=2, seed=0)
    return VQSeq2Seq(cfg)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(root, seed=5, n_train=6, n_val=2, n_test=3)
    return root


def pytest_configure(config):
    config._acceptance = []


@pytest.fixture
def record(request):
    """Append one acceptance line: ``record(n, ok, detail)``."""

    def _record(criterion, ok, detail):
        request.config._acceptance.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

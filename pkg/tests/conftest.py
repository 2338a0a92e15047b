import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from asdkit.dataset import SynthSpec, generate_synthetic  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Two machine types, two IDs, 3-second clips: enough for plumbing tests."""
    spec = SynthSpec(machine_types=["fan", "pump"], ids_per_type=2, n_train=10, n_eval_normal=3,
                     n_eval_anomaly=3, clip_s=3.0, seed=3)
    root = tmp_path_factory.mktemp("tiny")
    return generate_synthetic(spec, root)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

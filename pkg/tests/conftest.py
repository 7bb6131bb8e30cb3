import sys

import hypothesis
import numpy as np
import pytest
import torch

hypothesis.settings.register_profile("fast", max_examples=10)
hypothesis.settings.register_profile("default", deadline=None)
hypothesis.settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 identities x 4 renders at 64x32, holdout split."""
    from dsareid.synthdata import make_dataset

    root = tmp_path_factory.mktemp("tiny")
    make_dataset(root, num_ids=4, renders=4, cameras=2, split="holdout:2", seed=11, H=64, W=32)
    return root / "manifest.json"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])

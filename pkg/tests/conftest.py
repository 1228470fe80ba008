import numpy as np
import pytest
import torch

from stylealign.conditioning import optimal_condition_from_annotation
from stylealign.diffusion.model import DiffusionHyper, train_base
from stylealign.synthdata import SOURCE_STYLE, SceneSpec, generate_dataset

torch.set_num_threads(1)

TINY = dict(channels=(8, 16), time_dim=32, heads=2, hint_channels=8, batch_size=16)


@pytest.fixture(scope="session")
def source_samples():
    return generate_dataset(SceneSpec(), SOURCE_STYLE, 64, 1)


@pytest.fixture(scope="session")
def source_images(source_samples):
    return np.stack([s.image for s in source_samples])


@pytest.fixture(scope="session")
def source_conditions(source_samples):
    return np.stack([optimal_condition_from_annotation(s).grid for s in source_samples])


@pytest.fixture(scope="session")
def tiny_base(source_images):
    return train_base(source_images, DiffusionHyper(epochs=5, **TINY), seed=0)


# acceptance criteria outcomes, filled by test_acceptance.py and printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} | {detail}")

import numpy as np
import pytest

from pfcr.vit import ViTConfig


@pytest.fixture
def tiny_config() -> ViTConfig:
    return ViTConfig(depth=4, embed_dim=16, heads=2, patch_size=8, image_size=16, num_classes=5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

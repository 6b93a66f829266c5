import pytest
import torch

from agman.config import DataConfig, ModelConfig, RunConfig
from agman.data import AttributeSpace


def tiny_config(**model_overrides) -> RunConfig:
    """c=4, c'=2, h=w=2, n=2: a 16x16 input through TinyNet(4, 4, 8, 16)."""
    model = dict(profile="tinynet", channels=[4, 4, 8, 16], embedding_size=4, c_prime=2,
                 ca_reduction=2)
    model.update(model_overrides)
    return RunConfig(space=AttributeSpace(("x", "y"), (2, 3)), model=ModelConfig(**model),
                     data=DataConfig(image_size=16), seed=3)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# acceptance verdict lines, echoed in the terminal summary
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)

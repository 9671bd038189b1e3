import dataclasses

import pytest
import torch

from mtfm.config import GeneratorConfig, ModelConfig
from mtfm.data import generate_dataset
from mtfm.model import MTFM
from mtfm.verify import MICRO_MODEL, micro_space

SMALL_MODEL = ModelConfig(d_model=16, blocks=1, target_layers=1, full_layers=1, heads=2, kv_heads=1, d_emb=4, n_experts=2)


@pytest.fixture(autouse=True)
def _default_dtype():
    torch.set_default_dtype(torch.float32)
    yield
    torch.set_default_dtype(torch.float32)


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(GeneratorConfig(n_users=60, n_scenarios=3), seed=11)


@pytest.fixture
def f64_model(small_data):
    torch.manual_seed(0)
    model = MTFM(small_data.space, SMALL_MODEL).double()
    model.eval()
    return model


@pytest.fixture
def micro():
    return micro_space(), dataclasses.replace(MICRO_MODEL)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in mod.REPORT:
            terminalreporter.write_line(line)

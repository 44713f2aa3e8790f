import numpy as np
import pytest

from atac import config
from atac.config import RunConfig
from atac.harness import build_experiment


def small_config(**sets) -> RunConfig:
    cfg = RunConfig()
    for key, value in {"task.k": 3, "task.per_class": 4, "task.geometry": (3, 8, 8), "encoder.hidden": 32, "encoder.dim": 16, **sets}.items():
        cfg = config.override(cfg, key, value)
    return cfg


@pytest.fixture(scope="session")
def tiny():
    return build_experiment(small_config(), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

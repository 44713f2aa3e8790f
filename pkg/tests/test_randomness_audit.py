"""Every draw must come from the package PRNG; global generators are booby-trapped here."""

import random

import numpy as np
import pytest

from atac import harness

from conftest import small_config


class EntropyLeak(AssertionError):
    pass


def _trap(*args, **kwargs):
    raise EntropyLeak("drew from a global generator")


@pytest.fixture
def trapped(monkeypatch):
    for name in ("rand", "randn", "random", "uniform", "normal", "randint", "choice", "permutation", "shuffle", "default_rng", "seed", "RandomState"):
        monkeypatch.setattr(np.random, name, _trap)
    for name in ("random", "uniform", "randint", "choice", "shuffle", "gauss", "seed", "Random"):
        monkeypatch.setattr(random, name, _trap)


@pytest.mark.parametrize("attack", ["pgd", "pgd-targeted", "adaptive-atac-lure", "adaptive-ttc-lure"])
@pytest.mark.parametrize("defense", ["atac", "ttc"])
def test_pipeline_uses_only_package_streams(trapped, defense, attack):
    cfg = small_config(**{"atac.suite": "random", "pgd.steps": 2, "task.per_class": 2})
    exp = harness.build_experiment(cfg, 3)
    harness.evaluate(exp, defense, attack)

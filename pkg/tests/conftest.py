import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from dicop.calibrate import calibrate
from dicop.cli import packaged
from dicop.marketdata import load_curves, load_targets
from dicop.markov import build_chain
from dicop.recovery import RecoverySpec

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

logging.getLogger("dicop").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def fixture_inputs():
    curves = load_curves(packaged("portfolio.csv"))
    targets = load_targets(packaged("targets.json"))
    spec = RecoverySpec.load(packaged("recovery.json"))
    return curves, targets, spec


@pytest.fixture(scope="session")
def calibration(fixture_inputs):
    curves, targets, spec = fixture_inputs
    return calibrate(curves, targets, spec)


@pytest.fixture(scope="session")
def model(calibration):
    return calibration.model


@pytest.fixture(scope="session")
def chains(model):
    return {m: build_chain(model.marginals, m) for m in ("comono", "maxent")}


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def data_dir() -> Path:
    return Path(packaged("portfolio.csv")).parent


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])

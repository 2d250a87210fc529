"""Shared fixtures for the long simulation studies.

The study fixtures are session scoped so that the acceptance suite and the
simulation examples reuse one run of each configuration in ``configs/``.
"""
from pathlib import Path

import pytest

from rcpred.experiment import coverage_study, read_config, run_experiment

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def study_config(name, **overrides):
    return read_config(CONFIG_DIR / f"{name}.ini", {k.replace("__", "."): str(v)
                                                     for k, v in overrides.items()})


@pytest.fixture(scope="session")
def table1_rows():
    return {col: run_experiment(study_config(f"table1_{col}")) for col in ("correct", "misspec")}


@pytest.fixture(scope="session")
def fig1a_rows():
    return run_experiment(study_config("fig1a"))


@pytest.fixture(scope="session")
def fig2a_rows():
    return run_experiment(study_config("fig2a"))


@pytest.fixture(scope="session")
def coverage_report():
    return coverage_study(study_config("coverage"))


@pytest.fixture
def report(capsys):
    """Print one line straight to the terminal, bypassing output capture."""
    def emit(line):
        with capsys.disabled():
            print(f"\n{line}", flush=True)
    return emit

"""Shared fixtures: deterministic settings plus the cached trained models.

The trained-model fixture drives the depth-guidance experiment at desk
scale.  Its checkpoints and data are cached under tests/_cache keyed by the
experiment fingerprint, so only the first run of a fresh tree trains.
"""

import sys
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

sys.path.insert(0, str(Path(__file__).parent))

try:
    from hypothesis import HealthCheck, settings

    settings.register_profile(
        "suite",
        derandomize=True,
        max_examples=50,
        suppress_health_check=[HealthCheck.too_slow],
        deadline=None,
    )
    settings.load_profile("suite")
except ImportError:  # pragma: no cover - hypothesis is a test extra
    pass

CACHE_DIR = Path(__file__).parent / "_cache"


def acceptance_experiment_config():
    from ldic.experiment import ExperimentConfig

    return ExperimentConfig()


@pytest.fixture(scope="session")
def trained_experiment():
    """Guided + baseline checkpoints and the held-out pairs, trained once."""
    from ldic.experiment import ensure_trained

    return ensure_trained(acceptance_experiment_config(), CACHE_DIR)


@pytest.fixture(scope="session")
def experiment_report(trained_experiment, tmp_path_factory):
    """The full four-scenario sweep over the held-out set."""
    from ldic.experiment import evaluate_scenarios

    out = tmp_path_factory.mktemp("experiment_report")
    return evaluate_scenarios(trained_experiment, out)

# One line per acceptance criterion, echoed after the run so the verdicts
# are visible without -s.  test_acceptance.py appends to this list.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)

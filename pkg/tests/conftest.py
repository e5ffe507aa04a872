import os

import numpy as np
import pytest
import torch

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

try:
    import transformers

    transformers.utils.logging.disable_progress_bar()
    transformers.utils.logging.set_verbosity_error()
except ImportError:  # pragma: no cover
    pass

from relayguard.waveform import Label, MeasurementWindow, SystemConfig


@pytest.fixture(scope="session")
def cfg():
    return SystemConfig()


@pytest.fixture(scope="session")
def reference_asset(tmp_path_factory):
    from relayguard.assets import build_reference_asset

    return build_reference_asset(tmp_path_factory.mktemp("asset"), seed=0)


@pytest.fixture(scope="session")
def small_batch(cfg):
    from relayguard.scenarios import GeneratorConfig, generate_batch

    return generate_batch(cfg, GeneratorConfig(n_scenarios=120, seed=3))


def random_window(rng: np.random.Generator, label=Label.FAULT, sid="w") -> MeasurementWindow:
    return MeasurementWindow(rng.normal(size=(32, 6)) * 10, label, sid)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[float, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scatterforge.dataset import GenerationConfig, generate_dataset

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """40 images in 4 runs, shared by feature, learning and CLI tests."""
    root = tmp_path_factory.mktemp("small")
    cfg = GenerationConfig(master_seed=17, image_count=40, run_count=4)
    entries = generate_dataset(cfg, root)
    return root, cfg, entries


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def accept():
    """Record one acceptance line; the terminal summary lists them all."""

    def record(number: int, name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {name}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE, key=lambda t: t[0]):
        terminalreporter.write_line(line)

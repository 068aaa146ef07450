import copy

import pytest

from strombench.config import validate_config

BASE = {
    "experiment_name": "t",
    "duration_s": 1,
    "workload": {"total_rate_eps": 1000},
}


def make_config(tmp_path=None, **overrides):
    """Validated config dict from ``BASE`` with nested overrides applied."""
    raw = copy.deepcopy(BASE)
    if tmp_path is not None:
        raw["output_dir"] = str(tmp_path / "results")
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key].update(value)
        else:
            raw[key] = value
    return validate_config(raw)


@pytest.fixture
def config_factory(tmp_path):
    return lambda **kw: make_config(tmp_path, **kw)


ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)

import json
import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def default_raw():
    from nanomind.config import default_scenario_path

    return json.loads(default_scenario_path().read_text())


@pytest.fixture
def make_cfg(default_raw):
    """Build a ScenarioConfig from the bundled scenario with top-level overrides."""
    from nanomind.config import default_scenario_path, from_dict

    def build(**overrides):
        raw = json.loads(json.dumps(default_raw))
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key] = {**raw[key], **value}
            else:
                raw[key] = value
        return from_dict(raw, default_scenario_path().parent)

    return build


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

import math
from pathlib import Path

import pytest

from reflex.geometry import Pose
from reflex.kinematics import ArmModel
from reflex.world import load_task

ROOT = Path(__file__).resolve().parents[1]
TASKS = ROOT / "tasks"
FIXTURES = ROOT / "fixtures"

WIDE = ((-math.pi, math.pi), (-math.pi, math.pi), (-math.pi, math.pi))


def unit_arm(base=Pose(0.0, 0.0, 0.0), limits=WIDE, radius=0.05) -> ArmModel:
    return ArmModel("alice", base, (1.0, 1.0), limits, radius, 2.0)


def task(name: str):
    return load_task((TASKS / f"{name}.json").read_text(encoding="utf-8"))


def fixture_response(name: str, index: int = 0) -> str:
    import json

    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))[index]["response"]


@pytest.fixture
def arm() -> ArmModel:
    return unit_arm()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "live: needs a live chat-completion endpoint and API key")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from llgm.image import load_image

DATA = Path(__file__).parent / "data"
FIXTURES = ("astronaut_face", "camera", "chelsea", "coffee", "rocket")

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def calibration():
    return json.loads((DATA / "calibration.json").read_text())


def fixture_rgb(name):
    img = load_image(DATA / f"{name}.png")
    return img if img.shape[2] == 3 else np.repeat(img, 3, axis=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the terminal summary prints them in criterion order."""
    table = request.config.stash.setdefault(_VERDICTS, {})

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        table[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_VERDICTS, {})
    if table:
        terminalreporter.section("acceptance")
        for number in sorted(table):
            terminalreporter.write_line(table[number])

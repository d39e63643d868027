import json
from pathlib import Path

import numpy as np
import pytest

from kplora.data import Keypoint, ToolInstance
from kplora.instruments import INSTRUMENT_CLASSES

FIXTURE_DIR = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def annotations_path() -> Path:
    return FIXTURE_DIR / "annotations.json"


@pytest.fixture(scope="session")
def annotations_doc(annotations_path) -> dict:
    return json.loads(annotations_path.read_text())


def random_instance(rng: np.random.Generator, width=640, height=640) -> ToolInstance:
    cls = INSTRUMENT_CLASSES[int(rng.integers(0, len(INSTRUMENT_CLASSES)))]
    pts = rng.integers(0, min(width, height) + 1, size=(12, 2))
    return ToolInstance(cls, tuple(Keypoint(float(x), float(y)) for x, y in pts))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)

from __future__ import annotations

import numpy as np
import pytest

from capattack.encoders import ToyEncoder
from capattack.synthetic import make_toy_dataset
from capattack.types import ImageTensor

_ACCEPTANCE: list[tuple[str, str, str]] = []


@pytest.fixture
def acceptance_log():
    def record(criterion: str, status: str, detail: str = "") -> None:
        _ACCEPTANCE.append((criterion, status, detail))
        print(f"{criterion}: {status} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{criterion} {status:<5} {detail}")


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("CAPATTACK_CACHE_DIR", str(tmp_path / "model-cache"))


@pytest.fixture
def toy() -> ToyEncoder:
    return ToyEncoder()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_image(rng: np.random.Generator, size=(16, 16)) -> ImageTensor:
    return ImageTensor(rng.random((*size, 3)))


@pytest.fixture
def toy_dataset(tmp_path):
    root = tmp_path / "dataset"
    kinds = make_toy_dataset(root, n=16, seed=3, mix=(0.5, 0.3, 0.2))
    return root, kinds

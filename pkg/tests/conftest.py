from pathlib import Path

import numpy as np
import pytest

from ccdet.dataset import generate_synthetic
from ccdet.detector import DetectorConfig, build
from ccdet.train import HoldoutConfig, TrainConfig, holdout

GOLDEN_DIR = Path(__file__).parent / "data"


def pytest_addoption(parser):
    parser.addoption("--update-golden", action="store_true", default=False,
                     help="rewrite the frozen reference outputs under tests/data/")


class Golden:
    """Compares outputs against files in tests/data/, or rewrites them with --update-golden."""

    def __init__(self, update: bool):
        self.update = update

    def _path(self, name: str) -> Path:
        path = GOLDEN_DIR / name
        if self.update:
            GOLDEN_DIR.mkdir(exist_ok=True)
        elif not path.is_file():
            pytest.skip(f"{name} is not frozen yet; run `pytest -m slow --update-golden`")
        return path

    def check_text(self, name: str, text: str) -> None:
        path = self._path(name)
        if self.update:
            path.write_text(text, encoding="utf-8")
            return
        assert text == path.read_text(encoding="utf-8")

    def check_array(self, name: str, values: np.ndarray, atol: float) -> None:
        path = self._path(name)
        if self.update:
            np.save(path, np.asarray(values, dtype=np.float64))
            return
        np.testing.assert_allclose(values, np.load(path), rtol=0.0, atol=atol)


@pytest.fixture
def golden(request):
    return Golden(request.config.getoption("--update-golden"))


@pytest.fixture(scope="session")
def reference_run():
    # default corpus and recipe: 60 epochs x 3 rounds
    corpus = generate_synthetic()
    rounds, summary = holdout(corpus, HoldoutConfig(rounds=3), DetectorConfig(), TrainConfig())
    return corpus, rounds, summary


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    # 64 px input: grids 8/4/2, channels 4..32
    return DetectorConfig(input_size=64, width_base=4)


@pytest.fixture
def tiny_weights(tiny_config):
    return build(tiny_config, seed=0)


@pytest.fixture(scope="session")
def small_corpus():
    # 2 subjects per class x 2 slices at 64 px
    return generate_synthetic(n_subjects_per_class=2, slices_per_subject=2, size=64, seed=7)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f() w.r.t. x, perturbing x in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Largest absolute difference relative to the larger of the two magnitudes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)

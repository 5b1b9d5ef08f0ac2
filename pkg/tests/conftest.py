from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from canvas.checkpoint import load_inference_params, save_train_state
from canvas.datasets import SR_FLAT_FRACTION, MixtureBatchSource
from canvas.model import ModelConfig
from canvas.training import TrainSettings, TrainStageConfig, train

MIXTURE = {"background_outpaint": 3.0, "aspect_ratio": 3.0, "super_resolution": 3.0, "text_to_image": 1.0}

# Training is deterministic, so trained weights are cached under pytest's cache
# directory keyed by the full recipe; delete .pytest_cache to retrain.
RECIPES = {
    "mixture": dict(
        stages=[("s1", (16, 16), 800), ("s2", (24, 16), 1200)], mixture=MIXTURE, hidden=64, lr=3e-3),
    "superres": dict(
        stages=[("sr", (24, 16), 3000)], mixture={"super_resolution": 1.0}, hidden=128, lr=2e-3),
}


def _train_recipe(recipe: dict, path: Path):
    stages = [TrainStageConfig(sid, res, n, 1.0, 8) for sid, res, n in recipe["stages"]]
    settings = TrainSettings(model=ModelConfig(hidden=recipe["hidden"]), seed=0, lr=recipe["lr"])
    result = train(stages, MixtureBatchSource(recipe["mixture"], catalog_size=256), settings)
    save_train_state(path, result.state, {"seed": 0})


def _cached_model(request, name: str):
    recipe = RECIPES[name]
    keyed = dict(recipe, sr_flat_fraction=SR_FLAT_FRACTION)
    key = hashlib.sha256(json.dumps(keyed, sort_keys=True).encode()).hexdigest()[:16]
    path = Path(request.config.cache.mkdir("canvas-models")) / f"{name}-{key}.cvck"
    if not path.exists():
        _train_recipe(recipe, path)
    return load_inference_params(path)


@pytest.fixture(scope="session")
def mixture_model(request):
    """Flow model trained on the outpainting / super-resolution mixture."""
    return _cached_model(request, "mixture")


@pytest.fixture(scope="session")
def sr_model(request):
    """Dedicated super-resolution model."""
    return _cached_model(request, "superres")


# -- acceptance reporting ------------------------------------------------------

_criteria: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed
    if report.when == "call" or failed:
        prev = _criteria.get(number)
        elapsed = (prev[2] if prev else 0.0) + report.duration
        _criteria[number] = (title, "FAIL" if failed or (prev and prev[1] == "FAIL") else "PASS", elapsed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict, elapsed = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}  ({elapsed:.1f} s)")

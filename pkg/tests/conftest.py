import numpy as np
import pytest

from pairgen.diffusion import ToyDenoiserConfig, normalize_depth, range_normalization, sigmoid_schedule, train_toy_denoiser
from pairgen.geometry import Intrinsics
from pairgen.scenes import make_scene, trajectory

SMALL_K = Intrinsics(24.0, 24.0, 16.0, 16.0, 32, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def room_frames():
    scene = make_scene("room")
    return [scene.render(SMALL_K, p) for p in trajectory("room", 6)]


@pytest.fixture(scope="session")
def toy_denoiser(room_frames):
    scale, offset = range_normalization(room_frames)
    latents = [normalize_depth(d, scale, offset) for d in room_frames]
    schedule = sigmoid_schedule(100)
    model = train_toy_denoiser(latents, schedule, ToyDenoiserConfig(hidden=32, steps=400, seed=0), SMALL_K.vector())
    return model, schedule


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)

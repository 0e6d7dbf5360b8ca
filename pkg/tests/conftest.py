import time

import numpy as np
import pytest

from msfm.pipeline import run_in_memory
from msfm.synth import SceneConfig, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    """Cheap scene for unit tests: low resolution, short sweep."""
    cfg = SceneConfig(n_frames=24, sweep_deg=36.0, width=320, height=200, n_wall_lines=60, n_floor_lines=15, seed=3)
    return generate_scene(cfg)


@pytest.fixture(scope="session")
def noise_free_run():
    """Full pipeline on the default noise-free 120-frame scene."""
    ds, gt = generate_scene(SceneConfig())
    timings = {}
    t0 = time.perf_counter()
    state = run_in_memory(ds, timings=timings)
    timings["total"] = time.perf_counter() - t0
    return ds, gt, state, timings

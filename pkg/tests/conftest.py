from __future__ import annotations

import numpy as np
import pytest

from planemvs.pipeline.synthetic import SceneSpec, gen_scene, save_scene


@pytest.fixture(scope="session")
def fronto_scene():
    """64x64 fronto-parallel plane seen by two sideways-shifted cameras."""
    return gen_scene(SceneSpec.preset("fronto", width=64, height=64, seed=3))


@pytest.fixture(scope="session")
def small_scene():
    """Small fully textured scene used by the consistency, fusion and pipeline tests."""
    return gen_scene(SceneSpec.preset("textured", width=96, height=72, n_cameras=3,
                                      n_points=600, seed=5))


@pytest.fixture(scope="session")
def small_scene_dir(small_scene, tmp_path_factory):
    return save_scene(small_scene, tmp_path_factory.mktemp("small_scene"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# name -> (passed, detail, seconds); filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str, float]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail, secs) in ACCEPTANCE.items():
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({secs:.1f} s)")

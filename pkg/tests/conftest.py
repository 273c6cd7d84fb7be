import os
import sys

import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")
torch.set_num_threads(1)
os.environ.setdefault("AVOPT_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "avopt"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def template():
    from avopt.body import default_template

    return default_template()


def _tiny(n_persons, motion, res=32, views=2, frames=1, seed=0):
    from avopt.synth import RigSpec, SceneSpec, generate_scene, render_ground_truth

    spec = SceneSpec(n_persons=n_persons, n_frames=frames, resolution=(res, res), motion=motion,
                     rig=RigSpec(count=views))
    synthetic = generate_scene(spec, seed)
    return synthetic, render_ground_truth(synthetic, n_per_box=32)


@pytest.fixture(scope="session")
def tiny_single():
    return _tiny(1, "single")


@pytest.fixture(scope="session")
def tiny_pair():
    return _tiny(2, "contact", res=40, views=3)


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """Small rendered day/night dataset shared across tests."""
    from darkside.data import SceneSpec, make_synthetic_daynight

    out = tmp_path_factory.mktemp("synth")
    return make_synthetic_daynight(SceneSpec(seed=3, n_scenes=8, views_per_scene=3, night_views_per_scene=2, image_size=40, val_fraction=0.5), out)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)

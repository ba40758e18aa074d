import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")

from viewshed_reg.harness import ExperimentConfig, ViewConfig, prepare_pair  # noqa: E402
from viewshed_reg.scene import SceneSpec  # noqa: E402
from viewshed_reg.flow import FlowTrainConfig  # noqa: E402
from viewshed_reg.fine_reg import FineRegConfig  # noqa: E402
from viewshed_reg.viewshed import CollectionConfig  # noqa: E402


def small_config(**kw):
    """A pipeline config that runs in a few seconds; not tuned for accuracy."""
    base = dict(
        scene=SceneSpec(resolution=48),
        flow=FlowTrainConfig(learning_rate=1e-3, n_iterations=300, hidden=32, batch_size=256),
        collection=CollectionConfig(rays_per_camera=256),
        views=ViewConfig(n_candidates=24, n_views=6, n_holdout=2, width=24, height=24, n_samples=64),
        fine_cfg=FineRegConfig(n_iterations=30, rays_per_iter=256, learning_rate=0.08),
        pc_samples=20_000,
        render_figures=False,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def small_pair():
    return prepare_pair(small_config(seed=4))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

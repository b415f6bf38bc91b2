"""
Shared fixtures: tiny configurations that keep model tests under a second.
"""
import os

import numpy as np
import pytest

from app.models.config import (
    DataConfig,
    EvalSettings,
    HeadVariant,
    ModelConfig,
    RunConfig,
    SceneSpec,
    TrainConfig,
)
from app.models.schemas import InstanceAnnotation
from app.models.skeleton import NUM_KEYPOINTS


def pytest_collection_modifyitems(config, items):
    if os.getenv("KPALIGN_RUN_SLOW", "0") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set KPALIGN_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(
        stem_channels=[4, 8],
        backbone_channels=[8, 8, 16],
        fpn_channels=8,
        num_levels=3,
        tower_convs=1,
        heatmap_channels=8,
    )


@pytest.fixture
def tiny_scene():
    return SceneSpec(seed=3, image_size=(64, 64), n_instances=(1, 2), scale_range=(16.0, 48.0))


@pytest.fixture
def tiny_run_config(tiny_model_cfg, tiny_scene):
    return RunConfig(
        output_dir="tiny",
        data=DataConfig(scene=tiny_scene, train_count=6, val_count=3),
        model=tiny_model_cfg,
        variant=HeadVariant(),
        train=TrainConfig(max_iter=4, batch_size=2, checkpoint_every=2, log_every=1, prefetch=2),
        eval=EvalSettings(),
    )


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("KPALIGN_RUNS_DIR", str(root))
    return root


def make_annotation(points, visibility=None, area=None):
    """Annotation from a list of (x, y); missing keypoints are padded as unlabeled."""
    pts = [tuple(map(float, p)) for p in points]
    vis = list(visibility) if visibility is not None else [2] * len(pts)
    while len(pts) < NUM_KEYPOINTS:
        pts.append((0.0, 0.0))
        vis.append(0)
    if area is None:
        labeled = np.array([p for p, v in zip(pts, vis) if v > 0])
        area = float(np.ptp(labeled[:, 0]) * np.ptp(labeled[:, 1])) or 1.0
    return InstanceAnnotation(keypoints=pts, visibility=vis, area=area)


@pytest.fixture
def make_ann():
    return make_annotation

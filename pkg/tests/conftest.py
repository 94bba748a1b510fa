import dataclasses

import pytest

from gcav.align import AlignConfig
from gcav.config import (CavConfig, ModelConfig, PipelineConfig, Stage1Config, WorldConfig)
from gcav.fusion import FusionConfig
from gcav.pipeline import Context, run_all
from gcav.store import ArtifactStore


def small_config(seed: int = 0) -> PipelineConfig:
    """A pipeline that trains in a few seconds; used by the integration tests."""
    return PipelineConfig(
        seed=seed,
        model_name="small",
        world=WorldConfig(d_in=16, n_concepts=3, n_classes=3, n_per_class=60),
        model=ModelConfig(width=32, depth=4, instrumented=["L1", "L2", "L3"], epochs=40),
        cav=CavConfig(runs=3, epochs=100),
        stage1=Stage1Config(d_embed=16, hidden=32, epochs=400, lr=3e-3),
        align=AlignConfig(epochs=40),
        fuse=FusionConfig(epochs=40, batch_size=16),
    )


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_run(tmp_path_factory, small_cfg):
    """Context over a completed small pipeline run (read-only for tests)."""
    root = tmp_path_factory.mktemp("small_run")
    ctx = Context(small_cfg, ArtifactStore(root / "artifacts"), 1)
    run_all(ctx)
    return ctx


@pytest.fixture
def fresh_small(tmp_path, small_cfg):
    """A Context with an empty store, for tests that mutate artifacts."""
    return Context(small_cfg, ArtifactStore(tmp_path / "artifacts"), 1)


def replace(cfg: PipelineConfig, **sections) -> PipelineConfig:
    return dataclasses.replace(cfg, **sections)

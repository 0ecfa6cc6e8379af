"""Shared fixtures: a tiny end-to-end experiment that runs in seconds."""

import pytest

from andi.config import (
    AnomalyConfig,
    DataConfig,
    ExperimentConfig,
    ModelConfig,
    PostprocConfig,
    ScheduleConfig,
)
from andi.pipeline import run_training
from andi.synthgen import AnomalySpec, PhantomConfig, gen_dataset
from andi.train import TrainConfig


def tiny_config(seed: int = 0, **overrides) -> ExperimentConfig:
    base = dict(
        seed=seed,
        threads=1,
        schedule=ScheduleConfig(T=50),
        model=ModelConfig(in_channels=2, base_width=4, depth=1, time_embed_dim=8),
        train=TrainConfig(epochs=2, batch_size=8, training_noise="pyramidal"),
        anomaly=AnomalyConfig(t_low=5, t_high=12),
        postproc=PostprocConfig(median_filter=3, dilate_radius=1),
        data=DataConfig(n_train_slices=16, n_test=2),
        phantom=PhantomConfig(
            H=16,
            W=16,
            D=4,
            C=2,
            texture_sigmas=(2.0, 3.0),
            intensity_ranges=((0.3, 0.9), (0.25, 0.8)),
        ),
        lesions=AnomalySpec(count=1, r_min=2.0, r_max=4.0, offsets=(0.4, -0.3)),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_cfg):
    data_dir = tmp_path_factory.mktemp("tiny-data")
    gen_dataset(
        data_dir,
        tiny_cfg.data.n_train_slices,
        tiny_cfg.data.n_test,
        tiny_cfg.phantom,
        tiny_cfg.lesions,
        seed=tiny_cfg.seed,
    )
    return data_dir


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_cfg, tiny_dataset):
    path = tmp_path_factory.mktemp("tiny-model") / "model.ntf"
    run_training(tiny_cfg, tiny_dataset, path)
    return path

import pytest

from app.config import ExperimentConfig, FedConfig, TransformConfig, TwinBuildConfig, WorldConfig
from app.services.numerics import RngStream
from app.services.scenario import MODALITY_ORDER, ScenarioService


@pytest.fixture
def rng():
    """Fresh deterministic stream"""
    return RngStream(1234)


@pytest.fixture
def small_build():
    """Tiny coder architecture so backprop and training stay fast"""
    return TwinBuildConfig(
        latent_dim=4,
        conv_layers=1,
        conv_channels=2,
        kernel_width=3,
        pool_stride=2,
        dense_layers=2,
        hidden=6,
    )


@pytest.fixture
def world_config():
    """Two noiseless areas of 24 steps, window 4"""
    return WorldConfig(seed=3, areas=2, steps_per_area=24, window=4,
                       noise_std={m: 0.0 for m in MODALITY_ORDER})


@pytest.fixture
def dataset(world_config):
    return ScenarioService.generate_world(world_config)


@pytest.fixture
def standardized(dataset):
    scalers = ScenarioService.fit_standardization(dataset)
    return ScenarioService.standardize(dataset, scalers)


@pytest.fixture
def examples(standardized, world_config):
    return ScenarioService.window(standardized, world_config.window)


@pytest.fixture
def quick_config(tmp_path):
    """End-to-end config sized for a few seconds of CPU"""
    return ExperimentConfig(
        world=WorldConfig(seed=5, areas=2, steps_per_area=24, window=4,
                          noise_std={m: 0.0 for m in MODALITY_ORDER}),
        fed=FedConfig(rounds=2, local_steps=2, local_lr=0.01, batch_size=4, G=1.0, L=1.0),
        twin=TwinBuildConfig(latent_dim=4, conv_layers=1, conv_channels=2, kernel_width=3,
                             dense_layers=2, hidden=6),
        transform=TransformConfig(steps=3, lr=0.01, batch_size=4),
        ops=["V->W"],
        seeds=[0],
        output_dir=str(tmp_path / "out"),
    )


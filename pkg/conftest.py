import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from src.model import BackboneConfig, LightX3ECG, ModelSpec, StageConfig
from src.synthetic import synth_dataset

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_tiny_spec(n_classes: int = 3, input_length: int = 64, dropout: float = 0.3) -> ModelSpec:
    backbone = BackboneConfig(
        stem_kernel=5, stem_stride=2, stem_channels=4, stem_pool=True,
        stages=[StageConfig(blocks=1, out_ch=4, kernel=3, stride=1),
                StageConfig(blocks=1, out_ch=6, kernel=3, stride=2)],
        se_reduction=2,
    )
    return ModelSpec(backbone=backbone, n_classes=n_classes, input_length=input_length, attention_hidden=8,
                     attention_dropout=dropout)


@pytest.fixture
def tiny_spec():
    return make_tiny_spec()


@pytest.fixture
def tiny_model(tiny_spec):
    return LightX3ECG(tiny_spec, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    synth_dataset(out, n_per_class=6, classes=4, seed=11, duration_s=2.0)
    return out

import pytest

from data import SyntheticSpec, generate_synthetic, leave_one_domain_out_splits
from encoders import ToyEncoderPair
from training import TrainConfig


@pytest.fixture
def small_spec():
    return SyntheticSpec(samples_per_cell=8, seed=3)


@pytest.fixture
def small_manifest(small_spec):
    return generate_synthetic(small_spec)


@pytest.fixture
def small_split(small_manifest):
    return leave_one_domain_out_splits(small_manifest)[0]


@pytest.fixture
def toy_encoder(small_spec):
    return ToyEncoderPair(seed=0, class_anchors=small_spec.class_centers())


@pytest.fixture
def quick_config():
    return TrainConfig(epochs=2, batch_size=16, warmup_epochs=0, seed=0)

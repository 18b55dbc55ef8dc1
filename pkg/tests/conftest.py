import time

import pytest
import torch

from advsynth.classifiers import ClassifierSpec, ClfTrainConfig, build_and_train
from advsynth.data import make_synthetic_dataset
from advsynth.gan import GanTrainConfig, train_acgan

TOY_LATENT_DIM = 16
TOY_RESOLUTION = (8, 8)

# Shared toy GAN training budget; the acceptance suite holds this to the
# stated runtime and agreement gates.
TOY_GAN_CONFIG = GanTrainConfig(
    latent_dim=TOY_LATENT_DIM,
    base_channels=32,
    total_steps=1000,
    critic_steps=2,
    batch_size=64,
    seed=0,
)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toyset")
    return make_synthetic_dataset(
        root, seed=0, class_count=2, resolution=TOY_RESOLUTION, per_class=300, test_per_class=60
    )


@pytest.fixture(scope="session")
def toy_classifier(toy_dataset):
    spec = ClassifierSpec("madry-cnn", 2, (1, *TOY_RESOLUTION))
    return build_and_train(spec, toy_dataset, ClfTrainConfig(epochs=3, seed=0))


@pytest.fixture(scope="session")
def toy_gan(toy_dataset):
    """Desk-scale trained bundle plus its wall-clock training time."""
    torch.set_num_threads(torch.get_num_threads())
    start = time.monotonic()
    result = train_acgan(TOY_GAN_CONFIG, toy_dataset)
    elapsed = time.monotonic() - start
    return result.bundle, elapsed

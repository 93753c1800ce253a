"""Shared fixtures: a fast 4-class model for unit tests plus the canonical
10-class experiment setup used by the acceptance suite.

Experiment models train for 30 epochs (explicit config; the module default
stays 10) and experiment attacks demand a dominant 0.9 target probability.
"""

import pytest

from advrelabel.attack import AttackConfig
from advrelabel.data import generate_shapes
from advrelabel.model import (
    Architecture,
    Conv,
    Dense,
    Flatten,
    MaxPool,
    Relu,
    Softmax,
    TrainConfig,
    reference_architecture,
    train,
)

EXPERIMENT_EPOCHS = 30


def experiment_attack_config(**overrides) -> AttackConfig:
    return AttackConfig(**{"success_confidence": 0.9, **overrides})


def small_architecture() -> Architecture:
    layers = (
        Conv(4, 3), Relu(), MaxPool(), Conv(8, 3), Relu(), MaxPool(),
        Flatten(), Dense(32), Relu(), Dense(4), Softmax(),
    )
    return Architecture(layers=layers, input_shape=(1, 16, 16), num_classes=4)


@pytest.fixture(scope="session")
def small_train():
    return generate_shapes(0, classes=4, per_class=80, size=16)


@pytest.fixture(scope="session")
def small_test():
    return generate_shapes(0, classes=4, per_class=20, size=16, split="test")


@pytest.fixture(scope="session")
def small_model(small_train, small_test):
    model = train(
        small_architecture(),
        small_train,
        small_test,
        TrainConfig(seed=0, epochs=40, learning_rate=0.1),
    )
    assert model.metadata.test_accuracy >= 0.9
    return model


@pytest.fixture(scope="session")
def small_model_b(small_train, small_test):
    model = train(
        small_architecture(),
        small_train,
        small_test,
        TrainConfig(seed=1, epochs=40, learning_rate=0.1),
    )
    assert model.metadata.test_accuracy >= 0.9
    return model


@pytest.fixture(scope="session")
def shapes_train():
    return generate_shapes(0, classes=10, per_class=500, size=28)


@pytest.fixture(scope="session")
def shapes_test():
    return generate_shapes(0, classes=10, per_class=100, size=28, split="test")


@pytest.fixture(scope="session")
def reference_model(shapes_train, shapes_test):
    return train(
        reference_architecture(),
        shapes_train,
        shapes_test,
        TrainConfig(seed=0, epochs=EXPERIMENT_EPOCHS),
    )


@pytest.fixture(scope="session")
def reference_model_b(shapes_train, shapes_test):
    return train(
        reference_architecture(),
        shapes_train,
        shapes_test,
        TrainConfig(seed=1, epochs=EXPERIMENT_EPOCHS),
    )

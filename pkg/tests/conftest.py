import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from regroup import engine


def tiny_cnn(seed=0, in_shape=(1, 8, 8), num_classes=3):
    """Small random conv net used across unit tests (fast to differentiate)."""
    rng = np.random.default_rng(seed)
    layers = [
        engine.Conv2d(in_shape[0], 3, (3, 3), stride=1, padding=1,
                      weights=rng.standard_normal((3, in_shape[0], 3, 3)) * 0.5,
                      bias=rng.standard_normal(3) * 0.1),
        engine.ReLU(),
        engine.MaxPool2d((2, 2), stride=2),
        engine.Conv2d(3, 4, (3, 3), stride=2, padding=1,
                      weights=rng.standard_normal((4, 3, 3, 3)) * 0.5,
                      bias=rng.standard_normal(4) * 0.1),
        engine.ReLU(),
        engine.Flatten(),
        engine.Linear(4 * 2 * 2, num_classes,
                      weights=rng.standard_normal((num_classes, 16)) * 0.5,
                      bias=rng.standard_normal(num_classes) * 0.1),
    ]
    model = engine.NetworkModel(layers, in_shape, num_classes)
    model.validate()
    return model


def linear_model(weights, bias):
    """Single linear layer model over a flat input."""
    w = np.asarray(weights, dtype=np.float64)
    layers = [engine.Flatten(),
              engine.Linear(w.shape[1], w.shape[0], weights=w,
                            bias=np.asarray(bias, dtype=np.float64))]
    model = engine.NetworkModel(layers, (1, 1, w.shape[1]), w.shape[0])
    model.validate()
    return model


@pytest.fixture(scope="session")
def fixture_cache(tmp_path_factory):
    """Directory for expensive generated fixtures; set REGROUP_FIXTURE_CACHE
    to reuse them across pytest runs."""
    env = os.environ.get("REGROUP_FIXTURE_CACHE")
    if env:
        os.makedirs(env, exist_ok=True)
        return env
    return str(tmp_path_factory.mktemp("fixtures"))

"""Shared fixtures: tiny hand-built models and cached trained references."""

import numpy as np
import pytest

from coarsefine.model import Block, CalibrationSet, LayerSpec, ModelGraph
from coarsefine.tasks import make_task, train_reference


def tiny_linear_model(weights, head="mse", activations=None, biases=None, frozen=None):
    """One block of linear layers from a list of weight matrices."""
    n = len(weights)
    activations = activations or ["identity"] * n
    biases = biases or [None] * n
    frozen = frozen or [False] * n
    layers = [
        LayerSpec(f"L{i}", "linear", np.asarray(w, dtype=np.float64),
                  bias=None if biases[i] is None else np.asarray(biases[i], float),
                  activation=activations[i], frozen=frozen[i])
        for i, w in enumerate(weights)
    ]
    return ModelGraph(blocks=[Block("b0", layers)], head=head)


def random_mlp(rng, widths, head="mse", activation="gelu"):
    """Random MLP with the given layer widths, last layer identity."""
    weights = []
    for i in range(len(widths) - 1):
        weights.append(rng.normal(size=(widths[i + 1], widths[i])) / np.sqrt(widths[i]))
    acts = [activation] * (len(weights) - 1) + ["identity"]
    return tiny_linear_model(weights, head=head, activations=acts)


def random_batch(rng, k, d_in, d_out):
    return CalibrationSet(
        [(rng.normal(size=d_in), rng.normal(size=d_out)) for _ in range(k)]
    )


@pytest.fixture(scope="session")
def trained_char_lm():
    task = make_task("char_lm", seed=0)
    return task, train_reference(task)


@pytest.fixture(scope="session")
def trained_two_tower():
    task = make_task("two_tower_fusion", seed=0)
    return task, train_reference(task)


@pytest.fixture(scope="session")
def trained_regression():
    task = make_task("synthetic_regression", seed=0)
    return task, train_reference(task)

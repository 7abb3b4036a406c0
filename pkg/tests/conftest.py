"""Shared test fixtures."""

import numpy as np
import pytest

from workflow_recognition.commands.corpus_commands import handle_generate
from workflow_recognition.config import _parse_config
from workflow_recognition.corpus.synth import generate_corpus
from workflow_recognition.models import CorpusConfig


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-4)


@pytest.fixture
def gradient_check():
    """Max relative error between backward() and central differences at random coordinates.

    `objective(net)` runs a forward pass and returns (loss, activations, dLoss/dOutput).
    """

    def check(net, objective, coordinates: int = 100, seed: int = 0, eps: float = 1e-5) -> float:
        net.zero_grads()
        _, acts, loss_grads = objective(net)
        net.backward(acts, loss_grads)
        analytic = {n: {k: v.copy() for k, v in g.items()} for n, g in net.grads.items()}
        net.zero_grads()

        slots = [(name, key) for name, params in net.params.items() for key in params]
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(coordinates):
            name, key = slots[rng.integers(len(slots))]
            values = net.params[name][key]
            index = tuple(int(rng.integers(s)) for s in values.shape)
            original = values[index]
            values[index] = original + eps
            plus = objective(net)[0]
            values[index] = original - eps
            minus = objective(net)[0]
            values[index] = original
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, relative_error(float(analytic[name][key][index]), numeric))
        return worst

    return check


@pytest.fixture
def tiny_config_data(tmp_path):
    """Small but complete experiment: 8 videos, 2 folds, a few hundred SGD steps."""
    return {
        "dataset_path": str(tmp_path / "data"),
        "output_dir": str(tmp_path / "runs"),
        "runs": 1,
        "seed": 7,
        "schedule": {
            "base_rate": 0.001,
            "decay_period": 150,
            "total_iterations": 300,
            "batch_size": 20,
            "momentum": 0.9,
        },
        "network": {
            "fc6_width": 16,
            "feature_width": 16,
            "proxy_categories": 4,
            "proxy_samples_per_category": 40,
            "pretrain_iterations": 60,
        },
        "svm": {"epochs": 200},
        "hhmm": {"gmm_components": 2, "em_iterations": 20},
        "corpus": {"videos": 8, "scale": 0.05, "seed": 3},
        "evaluation": {"folds": 2, "block_tools": ["bipolar", "clipper"], "ribbon_videos": 2},
    }


@pytest.fixture
def tiny_config(tiny_config_data):
    return _parse_config(tiny_config_data)


@pytest.fixture
def tiny_dataset(tiny_config):
    """Generated corpus on disk at tiny_config.dataset_path."""
    result = handle_generate(tiny_config)
    assert "error" not in result
    return tiny_config


@pytest.fixture
def tiny_videos():
    videos, _ = generate_corpus(CorpusConfig(videos=4, scale=0.05, seed=11))
    return videos

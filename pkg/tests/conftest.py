"""Shared fixtures: small networks, fast training settings and tiny datasets."""

import logging

import numpy as np
import pytest

from data_io import gen_blobs, gen_two_moons
from models import ALConfig, MLPSpec, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return MLPSpec(layer_sizes=(2, 8, 8, 3))


@pytest.fixture
def scalar_spec():
    return MLPSpec(layer_sizes=(3, 6, 1))


@pytest.fixture
def linear_spec():
    return MLPSpec(layer_sizes=(1, 1))


@pytest.fixture
def fast_train():
    return TrainConfig(lr=0.05, momentum=0.9, weight_decay=5e-4, batch_size=32, epochs=5)


@pytest.fixture
def moons():
    return gen_two_moons(n=200, noise_sigma=0.2, test_frac=0.2, seed=0)


@pytest.fixture
def blobs():
    return gen_blobs(n=300, n_classes=3, dim=2, centers_scale=5.0, sigma=1.0, test_frac=0.2, seed=0)


@pytest.fixture
def short_al():
    return ALConfig(start_frac=0.1, budget_frac=0.05, cycles=3, sampler="cod")


@pytest.fixture(autouse=True)
def drop_cli_log_handlers():
    """Drop the console and file handlers a CLI run installs so they do not outlive its tmp dir."""
    root = logging.getLogger()
    before, level = list(root.handlers), root.level
    yield
    for handler in list(root.handlers):
        if handler not in before and type(handler) in (logging.StreamHandler, logging.FileHandler):
            root.removeHandler(handler)
            handler.close()
    root.setLevel(level)


@pytest.fixture
def in_tmp(tmp_path, monkeypatch):
    """Run in a scratch directory so logs/ and default outputs stay out of the repo."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("TODLAB_OUTPUT_DIR", raising=False)
    return tmp_path

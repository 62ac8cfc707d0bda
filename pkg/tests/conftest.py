"""Shared fixtures: small benchmark problems and config documents."""
import json

import numpy as np
import pytest

from models.benchmarks import random_linear_benchmark, rendezvous_benchmark, toy1d_benchmark

# x+ = 0.5 x + u with q = r = 1: P solves P^2 - P/4 - 1 = 0
TOY_P = (0.25 + np.sqrt(0.0625 + 4.0)) / 2.0
TOY_K = 0.5 * TOY_P / (1.0 + TOY_P)


@pytest.fixture
def toy():
    return toy1d_benchmark()


@pytest.fixture
def linear():
    return random_linear_benchmark(n=4, m=2, seed=0)


@pytest.fixture
def rendezvous():
    return rendezvous_benchmark()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_document(**overrides):
    document = {
        "system": {"name": "toy1d", "parameters": {"a": 0.5, "b": 1.0}},
        "omega": {"half_width": 0.5},
        "training": {"degrees": [2], "p": 100, "max_iterations": 200, "w_tol": 1e-10, "seed": 0},
        "certification": {"beta": 1.0, "sigma_min": 0.01},
        "simulation": {"N": 6, "steps": 50, "x0": [[0.5], [-0.4]], "terminal": "avi"},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(document.get(key), dict):
            document[key] = {**document[key], **value}
        else:
            document[key] = value
    return document


@pytest.fixture
def write_config(tmp_path):
    """Write a config document to a file and return its path."""

    def write(document, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document), encoding="utf-8")
        return str(path)

    return write

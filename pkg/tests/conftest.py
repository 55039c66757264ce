import numpy as np
import pytest
import toml

from deepcuts.deepcuts import load_config
from deepcuts.nn_core import ModelSpec, build_model
from deepcuts.tasks import TaskSpec, batches, make_task

TINY_CONFIG = {
    "task": {"kind": "planted_classify", "n_train": 48, "n_test": 16, "max_seq_len": 12, "min_len": 4},
    "model": {
        "arch": "miniformer",
        "vocab_size": 120,
        "d_model": 8,
        "n_layers": 1,
        "n_heads": 2,
        "d_ffn": 128,
    },
    "strategy": {
        "kinds": ["layer_mag_weight", "layer_gradcam_shift"],
        "budget": 2,
        "smooth_budget": 2,
        "eta": 2,
    },
    "compression": {"ratios": [2.0]},
    "train": {
        "initial_epochs": 1,
        "final_epochs": 1,
        "learning_rate": 1e-3,
        "seeds": [0],
    },
}


def write_config(folder, config):
    fname = folder / "config.toml"
    with open(fname, "w") as f:
        toml.dump(config, f)
    return str(fname)


@pytest.fixture
def tiny_config_file(tmp_path):
    return write_config(tmp_path, TINY_CONFIG)


@pytest.fixture
def tiny_config(tiny_config_file):
    return load_config(tiny_config_file)


@pytest.fixture
def tiny_spec():
    return ModelSpec(
        arch="miniformer", d_model=8, n_layers=1, n_heads=2, d_ffn=16, max_seq_len=12, seed=3
    )


@pytest.fixture
def tiny_model(tiny_spec):
    return build_model(tiny_spec)


@pytest.fixture
def tiny_dataset():
    return make_task(TaskSpec(n_train=48, n_test=16, max_seq_len=12, min_len=4, seed=5))


@pytest.fixture
def tiny_batch(tiny_dataset):
    return next(batches(tiny_dataset.train, 6))


def random_bits(rng, shape, p=0.5):
    return rng.random(shape) < p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

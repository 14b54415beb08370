"""Test configuration and fixtures for fedmeta tests."""

import os
import tempfile

import numpy as np
import pytest
import yaml

from fedmeta.attack import AttackConfig, BackdoorKey, prepare_attack_data
from fedmeta.episodes import Role, assign_roles, make_synthetic_dataset
from fedmeta.meta_reptile import FineTuneConfig, ReptileConfig
from fedmeta.nn_core import NetworkSpec, glorot_init


@pytest.fixture
def tiny_spec():
    """Two-module 3-way classifier on 8x8 single-channel images."""
    return NetworkSpec(input_shape=(8, 8, 1), modules=2, filters=3, kernel_size=3, pool=2, ways=3)


@pytest.fixture
def tiny_params(tiny_spec):
    """Float64 parameters, for finite-difference checks."""
    return glorot_init(tiny_spec, seed=7, dtype=np.float64)


@pytest.fixture
def random_batch():
    rng = np.random.default_rng(3)
    return rng.random((6, 8, 8, 1))


@pytest.fixture
def synthetic_dataset():
    """Twelve glyph classes with 20 examples each at 8x8."""
    return make_synthetic_dataset(12, 20, image_size=8, seed=0)


@pytest.fixture
def role_dataset(synthetic_dataset):
    """Synthetic classes tagged with 2 backdoor, 1 target and 3 meta-test classes."""
    return assign_roles(synthetic_dataset, backdoor=2, target=1, meta_test=3, seed=1)


@pytest.fixture
def small_reptile():
    return ReptileConfig(episodes=2, meta_batch=2, inner_steps=2, inner_batch=6, inner_lr=0.01,
                         outer_lr=0.5, shots=2, ways=3)


@pytest.fixture
def small_finetune():
    return FineTuneConfig(steps=3, batch_size=6, learning_rate=0.01)


@pytest.fixture
def attack_setup(role_dataset):
    """AttackConfig and AttackData over the role-tagged dataset, attacker shard included."""
    backdoor = tuple(role_dataset.class_ids([Role.BACKDOOR]))
    target = role_dataset.class_ids([Role.TARGET])[0]
    atk = AttackConfig(backdoor_classes=backdoor, target_class=target,
                       key=BackdoorKey.square(size=2, margin=0, image_size=8),
                       boost=3.0, ratio=(2, 3), episodes=2, inner_steps=1, inner_unit='epochs')
    shard = role_dataset.subset(role_dataset.class_ids([Role.ORDINARY]))
    data = prepare_attack_data(role_dataset, atk, shard, benign_per_class=10, attack_per_class=5)
    return atk, data


@pytest.fixture
def sample_experiment_config(tmp_path):
    """Tiny-profile overrides that write their artifacts under tmp_path."""
    return {
        'extends': 'tiny',
        'name': 'sample',
        'seed': 5,
        'output_dir': str(tmp_path / 'runs'),
    }


@pytest.fixture
def temp_config_file(sample_experiment_config):
    """Create a temporary experiment configuration file."""
    with tempfile.NamedTemporaryFile(mode='w', suffix='.yaml', delete=False) as f:
        yaml.dump(sample_experiment_config, f)
        temp_path = f.name

    yield temp_path

    # Cleanup
    os.unlink(temp_path)


@pytest.fixture
def write_config(tmp_path):
    """Write a mapping as YAML under tmp_path and return the path."""
    def write(name, mapping):
        path = tmp_path / f'{name}.yaml'
        with open(path, 'w') as f:
            yaml.dump(mapping, f)
        return str(path)
    return write


@pytest.fixture
def clean_env():
    """Drop FEDMETA_* overrides for the duration of a test."""
    keys = [k for k in os.environ if k.startswith('FEDMETA_')]
    saved = {k: os.environ.pop(k) for k in keys}
    yield
    os.environ.update(saved)

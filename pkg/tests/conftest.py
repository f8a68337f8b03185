import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent.resolve()))

import pytest
import torch
import trimesh

from config import parse_config
from datagen import ObjectSpec
from datagen import SyntheticObject
from datagen import SyntheticSample
from datagen import make_object
from hand_model import PARAM_DIM
from hand_model import HandParams
from hand_model import default_template
from hand_model import forward_kinematics


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs that take minutes")


@pytest.fixture
def small_template():
    """60-vertex template with the same joints and parts as the full hand"""
    return default_template(60)


@pytest.fixture
def full_template():
    return default_template(778)


@pytest.fixture
def sphere_mesh():
    return trimesh.creation.icosphere(subdivisions=3, radius=0.04)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)


def make_tiny_samples(num_objects=2, grasps_per_object=4, num_points=128, seed=0):
    """Random-pose grasps around primitive objects, no oracle involved"""
    template = default_template(60)
    generator = torch.Generator().manual_seed(seed)
    specs = [ObjectSpec("sphere", (0.03,)), ObjectSpec("box", (0.05, 0.04, 0.06))]
    samples = []
    for i in range(num_objects):
        spec = specs[i % len(specs)]
        mesh, cloud = make_object(spec, seed + i, num_points)
        obj = SyntheticObject(
            name=f"{spec.family}_{i:03d}", spec=spec, mesh=mesh, cloud=cloud, seed=seed + i
        )
        for j in range(grasps_per_object):
            vector = torch.randn(PARAM_DIM, generator=generator) * 0.1
            vector[55:58] += torch.tensor([0.0, 0.0, 0.06])
            params = HandParams.from_vector(vector)
            with torch.no_grad():
                vertices = forward_kinematics(params, template).vertices
            samples.append(
                SyntheticSample(object=obj, gt_params=params, gt_vertices=vertices, seed=j)
            )
    return samples


@pytest.fixture
def tiny_samples():
    return make_tiny_samples()


def make_small_config(tmp_path, **overrides):
    """Run configuration sized for unit tests"""
    raw = {
        "data": {"root": str(tmp_path / "data"), "points_per_object": 128},
        "hand": {"num_vertices": 60},
        "model": {"latent_dim": 8, "num_parts": 6, "encoder_hidden": [16]},
        "quantizer": {"codebook_size": 8},
        "decoder": {"hidden": 32, "correction_hidden": 16},
        "train": {
            "epochs": 3,
            "batch_size": 4,
            "learning_rate": 1e-3,
            "milestones": [2],
            "checkpoint_dir": str(tmp_path / "checkpoints"),
        },
        "prior": {"epochs": 2, "batch_size": 8, "dim": 16, "layers": 1, "heads": 2},
        "logging": {"file": str(tmp_path / "logs" / "test.log")},
        "database": {"path": str(tmp_path / "runs.db")},
    }
    for section, values in overrides.items():
        raw.setdefault(section, {}).update(values)
    return parse_config(raw)


@pytest.fixture
def small_config(tmp_path):
    return make_small_config(tmp_path)

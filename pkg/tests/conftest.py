import json

import numpy as np
import pytest

from msidebias.schemas.schemas import Amplitudes, CohortSpec, ProjectSpec, TrainConfig
from msidebias.services.synthcohort import generate_cohort


def small_spec(**overrides) -> CohortSpec:
    fields = dict(n_patients=40, msi_rate=0.3, tiles_per_spot=4, feature_dim=8, glasses_per_project=2, seed=3)
    fields.update(overrides)
    return CohortSpec(**fields)


def small_train(**overrides) -> TrainConfig:
    fields = dict(batch_size=32, epochs=1, folds=2, fe_hidden=[16], feature_dim=8, head_hidden=[8],
                  monitor_every=2, audit_max_samples=256, seed=5)
    fields.update(overrides)
    return TrainConfig(**fields)


@pytest.fixture
def spec():
    return small_spec()


@pytest.fixture
def cohort(spec):
    return generate_cohort(spec)


@pytest.fixture
def separable_cohort():
    return generate_cohort(small_spec(
        n_patients=60, msi_rate=0.4, tiles_per_spot=8, feature_dim=16,
        amplitudes=Amplitudes(alpha_class=4.0, alpha_project=0.0, alpha_patient=0.0, alpha_glass=0.0,
                              tissue_class_scale={}, magnification_class_scale={}),
        projects=[ProjectSpec(project_id="A", pi_mss=0.5, pi_msi=0.5),
                  ProjectSpec(project_id="B", pi_mss=0.5, pi_msi=0.5)],
    ))


@pytest.fixture
def train_config():
    return small_train()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def config_file(tmp_path):
    """Writes a run configuration and returns its path"""
    def write(payload: dict, name: str = "run.json"):
        path = tmp_path / name
        path.write_text(json.dumps(payload))
        return path
    return write

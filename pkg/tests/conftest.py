"""Shared fixtures: small worlds for unit tests, cached acceptance experiments, criterion reporting."""

from __future__ import annotations

import os

import numpy as np
import pytest
import torch

from orcast.geo_grid import GridSpec
from orcast.net import ModelConfig
from orcast.pipeline import ObservationConfig, generate_observations
from orcast.synth_ocean import WorldConfig, simulate_world

torch.set_num_threads(int(os.environ.get("ORCAST_TEST_THREADS", "1")))

ACCEPTANCE_SEEDS = (0, 1, 2)

_criteria: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _criteria[number] = (bool(passed), detail)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


# --------------------------------------------------------------------------- small worlds


def small_world_config(**overrides) -> WorldConfig:
    base = dict(
        grid=GridSpec.from_shape(34.0, -30.0, 32, 32, 1.0 / 12.0),
        n_days=24,
        n_eddies=12,
        eddy_amplitude_range=(0.15, 0.3),
        eddy_radius_range=(30.0, 60.0),
        eddy_drift_speed_range=(4.0, 8.0),
        land_fraction=0.05,
        seed=5,
        ageostrophic_mean=(0.03, 0.02),
        ageostrophic_std=0.02,
    )
    base.update(overrides)
    return WorldConfig(**base)


def small_model_config(**overrides) -> ModelConfig:
    base = dict(
        T_in=3, T_out=2, patch_h=16, patch_w=16, input_variables=("SSH_nadir", "SST"),
        latent_channels=4, n_gsta_blocks=2, hidden_channels=16,
        domain=(34.0, 34.0 + 32 / 12.0, -30.0, -30.0 + 32 / 12.0),
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_world():
    return simulate_world(small_world_config())


@pytest.fixture(scope="session")
def small_obs(small_world):
    return generate_observations(small_world, ObservationConfig(n_train_drifters=80, n_eval_drifters=60,
                                                                eval_start_day=18, seed=2))


@pytest.fixture
def small_data(small_obs):
    data = small_obs.training_data(17)
    data.fit_normalizer()
    return data


# --------------------------------------------------------------------------- acceptance experiments


@pytest.fixture(scope="session")
def acceptance_prepared():
    from orcast.pipeline import acceptance_experiment, prepare

    exp = acceptance_experiment()
    return exp, prepare(exp)


@pytest.fixture(scope="session")
def acceptance_runs(acceptance_prepared):
    """Full L4-analog curriculum for every acceptance seed, scored on held-out drifters."""
    from orcast.pipeline import run_experiment

    exp, prepared = acceptance_prepared
    return {seed: run_experiment(exp, seed, "L4_ANALOG", prepared=prepared) for seed in ACCEPTANCE_SEEDS}


@pytest.fixture(scope="session")
def acceptance_persistence(acceptance_prepared):
    from orcast.pipeline import evaluate_persistence

    exp, (_, obs) = acceptance_prepared
    return evaluate_persistence(obs, exp.evaluation, exp.model.T_out, "l4")


@pytest.fixture(scope="session")
def neurost_run(acceptance_prepared):
    from orcast.pipeline import run_experiment

    exp, prepared = acceptance_prepared
    return run_experiment(exp, ACCEPTANCE_SEEDS[0], "NEUROST_ANALOG", prepared=prepared)


def rng(seed=0):
    return np.random.default_rng(seed)

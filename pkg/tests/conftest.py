import math
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from dynamics import LinearResidual, NoiseModel, SystemSpec  # noqa: E402
from observer import ObserverCalibration  # noqa: E402


@pytest.fixture
def default_cal():
    return ObserverCalibration.default()


@pytest.fixture
def expansive_scalar():
    return LinearResidual.scalar(1.1)


@pytest.fixture
def default_system():
    return SystemSpec()


@pytest.fixture
def quiet_noise():
    return NoiseModel(0.0, seed=0)


@pytest.fixture
def experiment_doc():
    """Small but complete experiment document; tests tweak it per case"""
    return {
        "version": 1,
        "scenario": "halo",
        "system": {"family": "linear_residual", "d": 4, "lambda_plant": 0.1, "sigma2": 0.01, "map_seed": 7},
        "observer": {"calibration": {"alpha": 0.85, "beta": -2.5}, "obs_noise": 0.0, "context_len": 64},
        "controller": {"psi": "matched", "epsilon": 0.0, "mode": "full_reset", "osc_window": 3,
                       "floor_at_zero": True, "recoverable_radius": 6.0, "hard_limit_factor": 1.25},
        "run": {"n_seeds": 8, "seed": 0, "horizon_factor": 4.0, "success_tol": 3.0, "jobs": 1},
        "sweep": {"difficulties": [0.05, 0.1], "psi_factors": [0.25, 1.0, 4.0], "alphas": [0.85]},
        "output": {"format": "csv"},
    }


def ar1_variance(rho, sigma2, n):
    """Closed-form variance of a scalar AR(1) error after n steps from zero"""
    if rho == 1.0:
        return n * sigma2
    return sigma2 * (rho ** (2 * n) - 1.0) / (rho ** 2 - 1.0)


@pytest.fixture
def ar1():
    return ar1_variance


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


LN_1_1 = math.log(1.1)

import numpy as np
import pytest

from config import IP_A, IP_B, LQR_INPUT_COST, LQR_STATE_COST, SIGMA_W, SIGMA_WBAR
from estimator import lqr_gain, solve_dare
from system_sim import SystemModel, make_rng


@pytest.fixture
def rng():
    return make_rng(2, 99)


@pytest.fixture(scope="session")
def ip_system() -> SystemModel:
    """Inverted pendulum, all states measured, LQR gain."""
    A = np.asarray(IP_A)
    B = np.asarray(IP_B)
    K = lqr_gain(A, B, LQR_STATE_COST, LQR_INPUT_COST)
    return SystemModel(A, B, np.eye(4), K)


@pytest.fixture(scope="session")
def ip_design(ip_system):
    return solve_dare(ip_system.A, ip_system.C, SIGMA_W * np.eye(4), SIGMA_WBAR * np.eye(4))

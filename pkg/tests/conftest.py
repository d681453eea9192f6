"""Shared fixtures and independent oracles for the test suite."""

import math

import numpy as np
import pytest

from bdp.model import ParamVector, sis_structural
from bdp.simulate import Trajectory


# --- reference instances -----------------------------------------------------


@pytest.fixture(scope="session")
def sis2():
    """Two-state instance with closed-form eigendata."""
    return sis_structural(2, 1), ParamVector([1.0], 1.0)


@pytest.fixture(scope="session")
def sis10():
    """Small supercritical two-mechanism instance used across MC checks."""
    return sis_structural(10, 2), ParamVector([0.2, 0.02], 1.0)


@pytest.fixture(scope="session")
def fig_model():
    """Figure-scale instance: N=100, scaled truth (b1, b2) = (1.01, 3.70)."""
    return sis_structural(100, 2), ParamVector([1.01 / 100, 3.7 / 100**2], 1.0)


def random_sis_instance(rng: np.random.Generator, N: int, K: int | None = None):
    """Random admissible SIS instance with O(1) scaled rates."""
    K = K or int(rng.integers(1, min(3, N - 1) + 1))
    scaled = rng.uniform(0.5, 3.0, size=K)
    beta = scaled / N ** np.arange(1, K + 1, dtype=float)
    return sis_structural(N, K), ParamVector(beta, float(rng.uniform(0.5, 2.0)))


# --- independent oracles -------------------------------------------------------


def fd5(f, x: float, h: float) -> float:
    """Five-point central finite difference."""
    return (f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)) / (12 * h)


def fd5_vector(f, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Componentwise five-point gradient with relative steps."""
    grad = np.empty(x.size)
    for a in range(x.size):
        h = rel_step * max(abs(x[a]), 1e-8)

        def slice_f(v, a=a):
            y = x.copy()
            y[a] = v
            return f(y)

        grad[a] = fd5(slice_f, x[a], h)
    return grad


def event_sum_loglik(traj: Trajectory, lam: np.ndarray, mur: np.ndarray,
                     marked_rates=None) -> float:
    """Event-by-event log-likelihood: jump terms plus the interval compensator.

    ``lam``/``mur`` are per-state intensity tables; ``marked_rates`` optionally
    maps (mechanism, state) -> intensity for marked birth terms. Walks the raw
    event list, deliberately avoiding SufficientStats.
    """
    total = 0.0
    state = traj.x0
    prev_t = 0.0
    for j in range(traj.n_events):
        t = float(traj.times[j])
        total -= (lam[state] + mur[state]) * (t - prev_t)
        if traj.directions[j] == 1:
            if marked_rates is not None:
                rate = marked_rates[int(traj.marks[j]) - 1, state]
            else:
                rate = lam[state]
        else:
            rate = mur[state]
        total += math.log(rate) if rate > 0 else -math.inf
        state = int(traj.states[j])
        prev_t = t
    total -= (lam[state] + mur[state]) * (traj.horizon - prev_t)
    return total


def empirical_occupation(traj: Trajectory, N: int) -> np.ndarray:
    """Occupation fractions by running the raw event list (oracle for stats)."""
    occ = np.zeros(N + 1)
    state = traj.x0
    prev_t = 0.0
    for j in range(traj.n_events):
        t = float(traj.times[j])
        occ[state] += t - prev_t
        state = int(traj.states[j])
        prev_t = t
    occ[state] += traj.horizon - prev_t
    return occ / traj.horizon

"""Long-horizon laws of large numbers for the normalized criteria."""

import numpy as np
import pytest

from bdp.asymptotics import limit_contrast, limit_estimating
from bdp.inference import (
    SpectralCache,
    loglik_conditional,
    sufficient_stats,
    working_score,
)
from bdp.simulate import RngStream, simulate_q_process

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def long_path_stats(sis10):
    spec, theta0 = sis10
    traj = simulate_q_process(spec, theta0, 5, 2e4, RngStream(515151, 0))
    return spec, theta0, sufficient_stats(traj, spec)


def _theta_grid(theta0):
    # 5x5 grid over the two birth coordinates around the truth.
    factors = np.linspace(0.8, 1.2, 5)
    for a in factors:
        for b in factors:
            arr = theta0.as_array() * np.array([a, b, 1.0])
            yield theta0.replace(arr)


def test_normalized_loglik_converges_uniformly(long_path_stats):
    spec, theta0, st = long_path_stats
    cache = SpectralCache(spec)
    sup = 0.0
    for theta in _theta_grid(theta0):
        got = loglik_conditional(st, spec, theta, cache=cache) / st.horizon
        want = limit_contrast(spec, theta, theta0, cache=cache)
        sup = max(sup, abs(got - want))
    assert sup < 0.02


def test_normalized_working_score_converges_uniformly(long_path_stats):
    # Per-coordinate deviations are compared on the score's own sd scale
    # sqrt(J_aa): the raw beta2 component fluctuates with sd ~ 0.15 at this
    # horizon, so an absolute 0.02 band would test noise, not convergence.
    from bdp.asymptotics import godambe

    spec, theta0, st = long_path_stats
    cache = SpectralCache(spec)
    scale = np.sqrt(np.diag(godambe(spec, theta0).J))
    sup = 0.0
    for theta in _theta_grid(theta0):
        got = working_score(st, spec, theta, cache=cache) / st.horizon
        want = limit_estimating(spec, theta, theta0, cache=cache)
        sup = max(sup, float((np.abs(got - want) / scale).max()))
    assert sup < 0.02
    np.testing.assert_allclose(limit_estimating(spec, theta0, theta0, cache=cache),
                               np.zeros(3), atol=1e-12)


def test_population_contrast_peaks_at_truth(long_path_stats):
    spec, theta0, _ = long_path_stats
    cache = SpectralCache(spec)
    base = limit_contrast(spec, theta0, theta0, cache=cache)
    for theta in _theta_grid(theta0):
        value = limit_contrast(spec, theta, theta0, cache=cache)
        assert value <= base + 1e-12
        if np.abs(theta.as_array() / theta0.as_array() - 1.0).max() > 1e-9:
            assert value < base

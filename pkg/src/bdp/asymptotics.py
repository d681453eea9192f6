"""Information matrices, the one-sided Wald test, and change-of-measure diagnostics.

Coordinates are always ordered (beta_1, ..., beta_K, mu). The Fisher matrix
uses the full score weights, the Godambe sandwich pairs them with the working
weights J and H blocks; all are population quantities under the
quasi-stationary law, with observed (plug-in) variants replacing pi*rate*T by
the realized exposures.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import ndtri

from .errors import IdentifiabilityError
from .inference import (
    SpectralCache,
    SufficientStats,
    FitResult,
    score_weights,
    working_weights,
)
from .model import ParamVector, StructuralFunctions
from .simulate import Trajectory, state_at
from .spectral import build_killed_generator, survival_probability

_COND_LIMIT = 1e10


def normal_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must be in (0,1), got {p}")
    return float(ndtri(p))


def ks_distance_normal(sample) -> float:
    """Kolmogorov-Smirnov distance between a sample and the standard normal."""
    z = np.sort(np.asarray(sample, dtype=float))
    n = z.size
    cdf = np.array([normal_cdf(v) for v in z])
    upper = np.abs(np.arange(1, n + 1) / n - cdf).max()
    lower = np.abs(cdf - np.arange(0, n) / n).max()
    return float(max(upper, lower))


@dataclass(frozen=True)
class InfoMatrices:
    """Fisher I, working-variance J, cross-sensitivity H, Godambe G = H'J^-1 H."""

    fisher: np.ndarray
    J: np.ndarray
    H: np.ndarray
    G: np.ndarray


@dataclass(frozen=True)
class WaldResult:
    mechanism: int            # 1-based mechanism number under test
    Z: float
    W: float
    se: float
    p_one_sided: float
    reject_at: dict
    boundary: bool = False    # admissibility bound on the test space


def _weight_tables(spec, theta, cache: SpectralCache | None = None):
    cache = cache or SpectralCache(spec)
    S, Q = cache.rates(theta)
    sens = cache.sensitivities(theta)
    g_plus, g_minus = score_weights(spec, theta, sens)
    return S, Q, g_plus, g_minus


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return (M + M.T) / 2.0


def fisher_information(spec, theta, cache: SpectralCache | None = None) -> np.ndarray:
    """Population Fisher matrix under the quasi-stationary law.

    I_ab = sum_k pi(k) lam_tilde_k g_a+(k) g_b+(k)
         + sum_k pi(k) mu_tilde_k  g_a-(k) g_b-(k).
    """
    S, Q, g_plus, g_minus = _weight_tables(spec, theta, cache)
    wb = S.pi_tilde * Q.lambda_tilde
    wd = S.pi_tilde * Q.mu_tilde
    I = (g_plus * wb) @ g_plus.T + (g_minus * wd) @ g_minus.T
    return _symmetrize(I)


def fisher_information_observed(stats: SufficientStats, spec, theta,
                                cache: SpectralCache | None = None) -> np.ndarray:
    """Plug-in Fisher matrix: realized exposures replace pi(k)*T."""
    S, Q, g_plus, g_minus = _weight_tables(spec, theta, cache)
    wb = Q.lambda_tilde * stats.occupation
    wd = Q.mu_tilde * stats.occupation
    I = ((g_plus * wb) @ g_plus.T + (g_minus * wd) @ g_minus.T) / stats.horizon
    return _symmetrize(I)


def godambe(spec, theta, cache: SpectralCache | None = None) -> InfoMatrices:
    """All four information matrices; raises on numerical rank deficiency."""
    S, Q, g_plus, g_minus = _weight_tables(spec, theta, cache)
    K = spec.K
    bar = working_weights(spec, theta)
    wb = S.pi_tilde * Q.lambda_tilde
    wd = S.pi_tilde * Q.mu_tilde

    J = np.zeros((K + 1, K + 1))
    J[:K, :K] = _symmetrize((bar * wb) @ bar.T)
    J[K, K] = float(wd[2:].sum()) / theta.mu**2

    # H rows follow the full-score coordinate, columns the working coordinate.
    H = np.zeros((K + 1, K + 1))
    H[:, :K] = (g_plus * wb) @ bar.T
    H[:, K] = (g_minus * wd).sum(axis=1) / theta.mu

    fisher = (g_plus * wb) @ g_plus.T + (g_minus * wd) @ g_minus.T
    fisher = _symmetrize(fisher)

    # The limiting estimating-function Jacobian is -H', so the sandwich
    # covariance is H^-T J H^-1 and the precision G = H J^-1 H'.
    G = _symmetrize(H @ solve_spd(J, H.T, what="working variance J"))
    return InfoMatrices(fisher=fisher, J=J, H=H, G=G)


def solve_spd(M: np.ndarray, B: np.ndarray, what: str = "information matrix") -> np.ndarray:
    """Solve M X = B for symmetric positive-definite M with a condition guard."""
    try:
        c, low = scipy.linalg.cho_factor(M)
    except scipy.linalg.LinAlgError as exc:
        raise IdentifiabilityError(f"{what} is not positive definite: {exc}") from exc
    eigs = np.linalg.eigvalsh(M)
    cond = eigs[-1] / eigs[0] if eigs[0] > 0 else math.inf
    if cond > _COND_LIMIT:
        raise IdentifiabilityError(f"{what} condition number {cond:.3e} exceeds {_COND_LIMIT:.0e}")
    return scipy.linalg.cho_solve((c, low), B)


def invert_info(M: np.ndarray, what: str = "information matrix") -> np.ndarray:
    return solve_spd(M, np.eye(M.shape[0]), what=what)


def standard_errors(I_hat: np.ndarray, T: float) -> np.ndarray:
    """Coordinate-wise asymptotic standard errors sqrt((I^-1)_aa / T)."""
    inv = invert_info(I_hat)
    return np.sqrt(np.diag(inv) / T)


def wald_test(fit: FitResult, I_hat: np.ndarray, T: float, mech: int,
              levels: tuple = (0.01, 0.05, 0.10)) -> WaldResult:
    """One-sided test of H0: beta_mech = 0 vs beta_mech > 0.

    Z = beta_hat / se with se = sqrt((I_hat^-1)_ii / T); reject at level a
    when Z > z_{1-a}. W = max(0, Z)^2 has the half-chi-square mixture null, so
    its level-a critical value is z_{1-a}^2.
    """
    theta = fit.theta_hat
    if not 1 <= mech <= theta.K:
        raise ValueError(f"mechanism {mech} out of range 1..{theta.K}")
    if theta.test_mech is not None and theta.test_mech != mech:
        raise ValueError(f"fit was computed on {theta.space}, not test({mech})")
    se = float(standard_errors(I_hat, T)[mech - 1])
    Z = float(theta.beta[mech - 1]) / se
    p = 1.0 - normal_cdf(Z)
    reject = {level: Z > normal_quantile(1.0 - level) for level in levels}
    return WaldResult(
        mechanism=mech,
        Z=Z,
        W=max(0.0, Z) ** 2,
        se=se,
        p_one_sided=p,
        reject_at=reject,
        boundary="boundary" in fit.flags,
    )


def mixture_critical_value(alpha: float) -> float:
    """Level-alpha critical value of the half-chi-square mixture null of W."""
    return normal_quantile(1.0 - alpha) ** 2


# --- population limits of the normalized criteria ----------------------------


def limit_contrast(spec, theta: ParamVector, theta0: ParamVector,
                   cache: SpectralCache | None = None) -> float:
    """Deterministic limit of the normalized conditional log-likelihood.

    Ergodic averages at theta0 weight the candidate log-intensities at theta.
    """
    cache = cache or SpectralCache(spec)
    S0, Q0 = cache.rates(theta0)
    _, Q = cache.rates(theta)
    pi = S0.pi_tilde
    lam_w = pi * Q0.lambda_tilde
    mu_w = pi * Q0.mu_tilde
    N = spec.N
    with np.errstate(divide="ignore"):
        log_lam = np.where(lam_w[1:N] > 0, np.log(Q.lambda_tilde[1:N]), 0.0)
        log_mu = np.where(mu_w[2:] > 0, np.log(Q.mu_tilde[2:]), 0.0)
    value = float(lam_w[1:N] @ log_lam + mu_w[2:] @ log_mu)
    value -= float(pi @ (Q.lambda_tilde + Q.mu_tilde))
    return value


def limit_estimating(spec, theta: ParamVector, theta0: ParamVector,
                     cache: SpectralCache | None = None) -> np.ndarray:
    """Population working estimating function; zero exactly at theta0."""
    cache = cache or SpectralCache(spec)
    S0, Q0 = cache.rates(theta0)
    _, Q = cache.rates(theta)
    pi = S0.pi_tilde
    bar = working_weights(spec, theta)
    out = np.empty(spec.K + 1)
    out[: spec.K] = (bar * pi) @ (Q0.lambda_tilde - Q.lambda_tilde)
    out[spec.K] = float(pi[2:] @ (Q0.mu_tilde[2:] - Q.mu_tilde[2:])) / theta.mu
    return out


# --- Radon-Nikodym diagnostics ------------------------------------------------


def rn_derivative(spec, theta, traj: Trajectory, t: float, T: float,
                  cache: SpectralCache | None = None) -> float:
    """Fixed-window density of the survival-conditioned law w.r.t. the Q-process.

    [h(x0)/h(X_t)] * [P_{X_t}(tau > T - t) / P_{x0}(tau > T)] * exp(gamma t),
    with value 0 on a prefix already absorbed by t.
    """
    if t < 0 or t > T:
        raise ValueError("need 0 <= t <= T")
    if t > traj.horizon:
        raise ValueError("trajectory shorter than the window")
    cache = cache or SpectralCache(spec)
    if traj.absorbed_at is not None and traj.absorbed_at <= t:
        return 0.0
    S, _ = cache.rates(theta)
    G = build_killed_generator(spec, theta)
    x_t = state_at(traj, t)
    num = survival_probability(G, x_t, T - t)
    den = survival_probability(G, traj.x0, T)
    return float(S.h[traj.x0] / S.h[x_t] * num / den * math.exp(S.gamma * t))


def rn_full_window(spec, theta, traj: Trajectory, T: float,
                   cache: SpectralCache | None = None) -> float:
    """Full-window density: [h(x0)/h(X_T)] * exp(gamma T) / P_{x0}(tau > T)."""
    if T < 0 or T > traj.horizon:
        raise ValueError("window must lie inside the trajectory horizon")
    cache = cache or SpectralCache(spec)
    if traj.absorbed_at is not None and traj.absorbed_at <= T:
        return 0.0
    S, _ = cache.rates(theta)
    G = build_killed_generator(spec, theta)
    x_T = state_at(traj, T)
    den = survival_probability(G, traj.x0, T)
    return float(S.h[traj.x0] / S.h[x_T] * math.exp(S.gamma * T) / den)

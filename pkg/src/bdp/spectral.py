"""Killed generator, principal eigendata, Doob transform, survival probabilities.

All state-indexed tables in this module have length N+1 with slot 0 reserved
for the absorbing state (h(0) = 0 by construction; other slot-0 entries are
unused zeros). The right eigenvector h is gauged h(1) = 1, then the left
eigenvector v is scaled so that v'h = 1; only gauge-invariant quantities
(gamma, pi_tilde, log tilt ratios and their parameter derivatives) feed the
inference modules.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.stats import poisson

from .errors import ModelError, SpectralDegeneracyError
from .model import ParamVector, StructuralFunctions, rate_vector, validate_admissible

# Dense nonsymmetric eigensolve up to this dimension; banded symmetrized above.
_DENSE_LIMIT = 500
_GAP_FLOOR = 1e-12
_POISSON_TAIL = 1e-14
# Uniformization switches to interval squaring above this many expected jumps.
_SQUARING_THRESHOLD = 1024.0
_MAX_HALVINGS = 64


@dataclass(frozen=True)
class KilledGenerator:
    """Tridiagonal restriction of the generator to the transient states 1..N.

    ``lam[k]`` (k = 1..N-1) is the superdiagonal, ``mu_rates[k]`` (k = 2..N)
    the subdiagonal, and the diagonal is -(lam[k] + mu_rates[k]); the
    absorption rate mu_rates[1] leaves row 1 strictly sub-stochastic.
    """

    N: int
    lam: np.ndarray       # (N+1,), lam[0] = lam[N] = 0
    mu_rates: np.ndarray  # (N+1,), mu_rates[0] = 0

    @property
    def absorption_rate(self) -> float:
        return float(self.mu_rates[1])

    def matrix(self) -> np.ndarray:
        """Dense Q+ over states 1..N (index shift by one)."""
        d = -(self.lam[1:] + self.mu_rates[1:])
        A = np.diag(d)
        idx = np.arange(self.N - 1)
        A[idx, idx + 1] = self.lam[1:self.N]
        A[idx + 1, idx] = self.mu_rates[2:]
        return A

    def total_rates(self) -> np.ndarray:
        """lam_k + mu_k on states 0..N (0 at the absorbing state)."""
        return self.lam + self.mu_rates


@dataclass(frozen=True)
class SpectralData:
    """Principal eigendata of the killed generator."""

    gamma: float            # maximal real eigenvalue, < 0
    gap: float              # gamma minus the second-largest real part
    h: np.ndarray           # (N+1,), h[0] = 0, h[k] > 0, gauge h[1] = 1
    v: np.ndarray           # (N+1,), v[0] = 0, v[k] > 0, v'h = 1
    pi_tilde: np.ndarray    # (N+1,), quasi-stationary law v*h
    c_theta: float          # sum_k v(k); survival-asymptotic constant


@dataclass(frozen=True)
class QProcessRates:
    """Doob-transformed rates; mu_tilde[1] = 0 exactly."""

    R_plus: np.ndarray       # (N+1,), h(k+1)/h(k) for k = 1..N-1
    R_minus: np.ndarray      # (N+1,), h(k-1)/h(k) for k = 2..N
    lambda_tilde: np.ndarray  # (N+1,)
    mu_tilde: np.ndarray      # (N+1,)


@dataclass(frozen=True)
class SpectralSensitivities:
    """Parameter derivatives of the eigendata, coordinates (beta_1..beta_K, mu).

    ``dlog_R_plus[a, k]`` is defined for k = 1..N-1 and ``dlog_R_minus[a, k]``
    for k = 2..N; other slots are zero.
    """

    dgamma: np.ndarray        # (K+1,)
    dh: np.ndarray            # (K+1, N+1), gauge v'(dh) = 0
    dlog_R_plus: np.ndarray   # (K+1, N+1)
    dlog_R_minus: np.ndarray  # (K+1, N+1)


def build_killed_generator(spec: StructuralFunctions, theta: ParamVector) -> KilledGenerator:
    report = validate_admissible(spec, theta)
    if not report.admissible:
        raise ModelError("inadmissible parameters: " + "; ".join(report.failures))
    rates = rate_vector(spec, theta)
    return KilledGenerator(N=spec.N, lam=rates.lam, mu_rates=rates.mu_rates)


def _reversibility_logw(G: KilledGenerator) -> np.ndarray:
    """log of the detailed-balance weights w(k) = prod_{j=2..k} lam_{j-1}/mu_j.

    The killed birth-death generator is reversible w.r.t. w, so the left
    eigenvector is exactly w*h; building it this way keeps positivity and
    componentwise accuracy that dense solvers cannot deliver in the tails.
    """
    steps = np.log(G.lam[1:G.N]) - np.log(G.mu_rates[2:])
    return np.concatenate(([0.0], np.cumsum(steps)))


def _principal_dense(A: np.ndarray):
    w, vr = scipy.linalg.eig(A, right=True)
    order = np.argsort(w.real)
    top, second = order[-1], order[-2]
    gamma = float(w[top].real)
    gap = gamma - float(w[second].real)
    return gamma, gap, vr[:, top].real


def _principal_banded(G: KilledGenerator, logw: np.ndarray):
    """Similarity-symmetrized tridiagonal eigensolve; exact real spectrum.

    With d = sqrt(w) the matrix D Q+ D^{-1} is symmetric tridiagonal with
    off-diagonals sqrt(lam_k mu_{k+1}) and shares the spectrum of Q+; its
    principal eigenvector u gives h = u / d.
    """
    N = G.N
    diag = -(G.lam[1:] + G.mu_rates[1:])
    off = np.sqrt(G.lam[1:N] * G.mu_rates[2:])
    w, u = scipy.linalg.eigh_tridiagonal(diag, off, select="i", select_range=(N - 2, N - 1))
    gamma = float(w[-1])
    gap = gamma - float(w[0])
    d = np.exp(0.5 * (logw - logw.mean()))
    return gamma, gap, u[:, -1] / d


def _fix_sign(x: np.ndarray, what: str) -> np.ndarray:
    scale = np.abs(x).max()
    if x[np.abs(x).argmax()] < 0:
        x = -x
    if (x <= 0).any():
        if (x < -1e-10 * scale).any() or (x == 0).any():
            raise SpectralDegeneracyError(
                f"{what} eigenvector has nonpositive components beyond tolerance"
            )
        x = np.abs(x)
    return x


def principal_eigen(G: KilledGenerator) -> SpectralData:
    """Maximal-real eigenvalue of Q+ with positive right/left eigenvectors.

    Raises SpectralDegeneracyError if the eigenvalue is not simple (gap below
    1e-12) or an eigenvector fails strict positivity beyond tolerance, which
    signals a violation of the irreducibility assumption.
    """
    N = G.N
    logw = _reversibility_logw(G)
    if N <= _DENSE_LIMIT:
        gamma, gap, h1 = _principal_dense(G.matrix())
    else:
        gamma, gap, h1 = _principal_banded(G, logw)
    if gap < _GAP_FLOOR:
        raise SpectralDegeneracyError(f"principal eigenvalue not simple: gap {gap:.3e}")
    h1 = _fix_sign(h1, "right")

    h = np.zeros(N + 1)
    v = np.zeros(N + 1)
    h[1:] = h1 / h1[0]
    logv = logw + np.log(h[1:])
    v1 = np.exp(logv - logv.max())
    v[1:] = v1 / (v1 @ h[1:])
    pi = v * h
    return SpectralData(gamma=gamma, gap=gap, h=h, v=v, pi_tilde=pi, c_theta=float(v.sum()))


def doob_transform(G: KilledGenerator, S: SpectralData) -> QProcessRates:
    """Tilted rates of the Q-process on {1..N}; no death transition from 1."""
    N = G.N
    R_plus = np.zeros(N + 1)
    R_minus = np.zeros(N + 1)
    R_plus[1:N] = S.h[2:] / S.h[1:N]
    R_minus[2:] = S.h[1:N] / S.h[2:]
    lam_t = G.lam * R_plus
    mu_t = G.mu_rates * R_minus
    mu_t[1] = 0.0
    return QProcessRates(R_plus=R_plus, R_minus=R_minus, lambda_tilde=lam_t, mu_tilde=mu_t)


def _dA_columns(spec: StructuralFunctions, a: int) -> tuple[np.ndarray, np.ndarray]:
    """(superdiagonal source, subdiagonal source) tables of dQ+/dtheta_a.

    Coordinate a < K perturbs births: f_a on the superdiagonal, -f_a on the
    diagonal. Coordinate a = K perturbs deaths: r on the subdiagonal, -r on
    the diagonal.
    """
    if a < spec.K:
        return spec.f[a], np.zeros(spec.N + 1)
    return np.zeros(spec.N + 1), spec.r


def _apply_dA(spec: StructuralFunctions, a: int, x: np.ndarray) -> np.ndarray:
    """(dQ+/dtheta_a) @ x for x over states 1..N (length N)."""
    N = spec.N
    sup, sub = _dA_columns(spec, a)
    y = -(sup[1:] + sub[1:]) * x
    y[: N - 1] += sup[1:N] * x[1:]
    y[1:] += sub[2:] * x[:-1]
    return y


def eigen_sensitivities(
    spec: StructuralFunctions,
    theta: ParamVector,
    G: KilledGenerator,
    S: SpectralData,
) -> SpectralSensitivities:
    """First-order eigen-sensitivities via the bordered linear system.

    d_a gamma = v'(d_a Q+)h under v'h = 1; d_a h solves
    (Q+ - gamma I)x = (d_a gamma)h - (d_a Q+)h with the gauge v'x = 0, so the
    normalization stays differentiable. Log-tilt derivatives are differences
    of dh/h and are gauge-invariant.
    """
    N = G.N
    K1 = spec.K + 1
    h1, v1 = S.h[1:], S.v[1:]

    B = np.zeros((N + 1, N + 1))
    B[:N, :N] = G.matrix() - S.gamma * np.eye(N)
    B[:N, N] = h1
    B[N, :N] = v1
    try:
        lu, piv = scipy.linalg.lu_factor(B)
    except scipy.linalg.LinAlgError as exc:
        raise SpectralDegeneracyError(f"singular bordered system: {exc}") from exc

    dgamma = np.zeros(K1)
    dh = np.zeros((K1, N + 1))
    for a in range(K1):
        dAh = _apply_dA(spec, a, h1)
        dgamma[a] = float(v1 @ dAh)
        rhs = np.zeros(N + 1)
        rhs[:N] = dgamma[a] * h1 - dAh
        sol = scipy.linalg.lu_solve((lu, piv), rhs)
        if not np.isfinite(sol).all():
            raise SpectralDegeneracyError("bordered sensitivity solve produced non-finite values")
        dh[a, 1:] = sol[:N]

    rel = dh[:, 1:] / h1
    dlp = np.zeros((K1, N + 1))
    dlm = np.zeros((K1, N + 1))
    dlp[:, 1:N] = rel[:, 1:] - rel[:, :-1]
    dlm[:, 2:] = rel[:, :-1] - rel[:, 1:]
    return SpectralSensitivities(dgamma=dgamma, dh=dh, dlog_R_plus=dlp, dlog_R_minus=dlm)


def _poisson_weights(nu: float) -> np.ndarray:
    n_max = int(poisson.isf(_POISSON_TAIL, nu)) + 2
    return poisson.pmf(np.arange(n_max + 1), nu)


def _tridiag_apply(G: KilledGenerator, inv_rate: float, x: np.ndarray) -> np.ndarray:
    """(I + Q+/Lbar) @ x for x over states 1..N (columns allowed)."""
    N = G.N
    y = x * (1.0 - (G.lam[1:] + G.mu_rates[1:]) * inv_rate).reshape(-1, *([1] * (x.ndim - 1)))
    y[: N - 1] += (G.lam[1:N] * inv_rate).reshape(-1, *([1] * (x.ndim - 1))) * x[1:]
    y[1:] += (G.mu_rates[2:] * inv_rate).reshape(-1, *([1] * (x.ndim - 1))) * x[:-1]
    return y


def _survival_vector(G: KilledGenerator, s: float) -> np.ndarray:
    """exp(s Q+) @ 1 by uniformization, Poisson tail below 1e-14."""
    N = G.N
    Lbar = float(G.total_rates().max())
    if Lbar == 0.0 or s == 0.0:
        return np.ones(N)
    nu = Lbar * s
    if nu <= _SQUARING_THRESHOLD:
        weights = _poisson_weights(nu)
        u = np.ones(N)
        acc = weights[0] * u
        for w in weights[1:]:
            u = _tridiag_apply(G, 1.0 / Lbar, u)
            acc += w * u
        return acc
    # Interval squaring: exp(sQ+) = exp((s/2^m) Q+)^(2^m), at most 64 halvings.
    m = min(int(np.ceil(np.log2(nu / _SQUARING_THRESHOLD))), _MAX_HALVINGS)
    weights = _poisson_weights(nu / 2.0**m)
    U = np.eye(N)
    M = weights[0] * U
    for w in weights[1:]:
        U = _tridiag_apply(G, 1.0 / Lbar, U)
        M += w * U
    for _ in range(m):
        M = M @ M
    return M @ np.ones(N)


def survival_probability(G: KilledGenerator, x: int, s: float) -> float:
    """P_x(absorption time > s) = sum_y [exp(s Q+)]_{x y}."""
    if not 1 <= x <= G.N:
        raise ValueError(f"state {x} out of range 1..{G.N}")
    if s < 0:
        raise ValueError(f"time {s} must be nonnegative")
    value = float(_survival_vector(G, s)[x - 1])
    return min(max(value, 0.0), 1.0)


def spectral_bundle(spec: StructuralFunctions, theta: ParamVector):
    """Convenience: (generator, eigendata, tilted rates) for one theta."""
    G = build_killed_generator(spec, theta)
    S = principal_eigen(G)
    return G, S, doob_transform(G, S)


def diagnostics_dict(spec: StructuralFunctions, theta: ParamVector) -> dict:
    """JSON-ready spectral dump used by the CLI diagnostics subcommand."""
    G, S, Q = spectral_bundle(spec, theta)
    return {
        "gamma": S.gamma,
        "gap": S.gap,
        "c_theta": S.c_theta,
        "h": S.h[1:].tolist(),
        "v": S.v[1:].tolist(),
        "pi_tilde": S.pi_tilde[1:].tolist(),
        "lambda_tilde": Q.lambda_tilde[1:].tolist(),
        "mu_tilde": Q.mu_tilde[1:].tolist(),
    }

"""Sufficient statistics, likelihoods, scores, and estimators.

Every likelihood and score here consumes SufficientStats, never raw
trajectories: the path enters only through statewise occupation times T_k and
jump counts N_k, so each evaluation is O(N). Conditional quantities recompute
the spectral data at the candidate theta; fits keep a private theta-keyed
cache.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DataInconsistencyError,
    InsufficientExposureError,
    ModelError,
    OptimizationError,
    SpectralDegeneracyError,
)
from .model import ParamVector, StructuralFunctions, rate_vector, validate_admissible
from .simulate import Trajectory
from .spectral import (
    QProcessRates,
    SpectralData,
    SpectralSensitivities,
    build_killed_generator,
    doob_transform,
    eigen_sensitivities,
    principal_eigen,
)

_SCORE_TOL_SCALE = 1e-6      # converged when ||U_T|| <= tol * (1 + T)
_GRAD_TOL_SCALE = 1e-8       # unconditional ascent: ||grad|| <= tol * (1 + |loglik|)
_MAX_ITER = 200


@dataclass(frozen=True)
class SufficientStats:
    """Statewise occupation times and jump counts over [0, T].

    Tables are indexed by state 0..N; ``births_by_mech`` has one row per
    mechanism (counts of marked births) and is None for unmarked data.
    """

    occupation: np.ndarray        # (N+1,) float
    births: np.ndarray            # (N+1,) int64
    deaths: np.ndarray            # (N+1,) int64
    horizon: float
    births_by_mech: np.ndarray | None = None  # (K, N+1) int64

    @property
    def marked(self) -> bool:
        return self.births_by_mech is not None

    def unmarked(self) -> "SufficientStats":
        """The same statistics with mechanism labels discarded."""
        return replace(self, births_by_mech=None)


def sufficient_stats(traj: Trajectory, spec: StructuralFunctions) -> SufficientStats:
    """Exact statewise integrals and counts from the piecewise-constant path."""
    N = spec.N
    holding = np.concatenate(([traj.x0], traj.states)).astype(np.int64)
    bounds = np.concatenate(([0.0], traj.times, [traj.horizon]))
    durations = np.diff(bounds)
    # Accumulate occupation in extended precision: the 1e-12 * T closure
    # identity must survive ~1e5 scattered additions.
    occ = np.zeros(N + 1, dtype=np.longdouble)
    np.add.at(occ, holding, durations.astype(np.longdouble))

    pre = holding[:-1]
    is_birth = traj.directions == 1
    births = np.bincount(pre[is_birth], minlength=N + 1)
    deaths = np.bincount(pre[~is_birth], minlength=N + 1)

    by_mech = None
    if traj.marks is not None:
        by_mech = np.zeros((spec.K, N + 1), dtype=np.int64)
        for i in range(spec.K):
            by_mech[i] = np.bincount(pre[traj.marks == i + 1], minlength=N + 1)
    return SufficientStats(
        occupation=occ.astype(np.float64),
        births=births.astype(np.int64),
        deaths=deaths.astype(np.int64),
        horizon=float(traj.horizon),
        births_by_mech=by_mech,
    )


def _count_term(counts: np.ndarray, rates: np.ndarray) -> float:
    """sum counts*log(rates) with the 0*log(0)=0 convention; -inf on impossible data."""
    seen = counts > 0
    if (rates[seen] <= 0).any():
        return -math.inf
    return float(counts[seen] @ np.log(rates[seen]))


def loglik_unconditional(stats: SufficientStats, spec, theta, marked: bool = False) -> float:
    """Path log-likelihood under the original absorbing dynamics.

    With ``marked`` the birth term decomposes by mechanism (requires marked
    statistics). States with zero counts and zero rate contribute 0; a
    positive count on a zero-rate state yields -inf.
    """
    rates = rate_vector(spec, theta)
    total = -float(stats.occupation @ (rates.lam + rates.mu_rates))
    total += _count_term(stats.deaths, rates.mu_rates)
    if marked:
        if not stats.marked:
            raise ValueError("marked likelihood requires marked statistics")
        for i in range(spec.K):
            total += _count_term(stats.births_by_mech[i], theta.beta[i] * spec.f[i])
    else:
        total += _count_term(stats.births, rates.lam)
    return total


def exposures(stats: SufficientStats, spec) -> tuple[np.ndarray, float]:
    """Integrated structural exposures (sum_k f_i(k) T_k, sum_k r(k) T_k)."""
    return spec.f @ stats.occupation, float(spec.r @ stats.occupation)


@dataclass(frozen=True)
class FitResult:
    """Estimator output; ``iterations`` counts score/gradient evaluations."""

    theta_hat: ParamVector
    converged: bool
    iterations: int
    score_norm: float
    kind: str
    flags: tuple[str, ...] = ()
    trace: tuple[float, ...] = ()


def mle_marked_closed_form(stats: SufficientStats, spec) -> FitResult:
    """Counts-over-exposure estimator from marked unconditional data."""
    if not stats.marked:
        raise ValueError("closed-form estimator requires marked statistics")
    f_exp, r_exp = exposures(stats, spec)
    if (f_exp <= 0).any() or r_exp <= 0:
        raise InsufficientExposureError("zero integrated exposure for some coordinate")
    beta = stats.births_by_mech.sum(axis=1) / f_exp
    mu = stats.deaths.sum() / r_exp
    flags = ("boundary",) if (beta == 0).any() or mu == 0 else ()
    return FitResult(
        theta_hat=ParamVector(beta, mu),
        converged=True,
        iterations=0,
        score_norm=0.0,
        kind="marked-closed-form",
        flags=flags,
    )


def moment_seed(stats: SufficientStats, spec) -> ParamVector:
    """Cheap admissible initializer: total counts spread over exposures.

    Zero-exposure coordinates (never informed by the data) fall back to the
    exposure a uniform occupation of [0, T] would have produced.
    """
    f_exp, r_exp = exposures(stats, spec)
    uniform = stats.horizon / (spec.N + 1)
    f_fallback = spec.f.sum(axis=1) * uniform
    f_eff = np.where(f_exp > 0, f_exp, np.maximum(f_fallback, 1e-300))
    r_eff = r_exp if r_exp > 0 else max(spec.r.sum() * uniform, 1e-300)
    total_births = max(float(stats.births.sum()), 1.0)
    total_deaths = max(float(stats.deaths.sum()), 1.0)
    return ParamVector(total_births / (spec.K * f_eff), total_deaths / r_eff)


def default_init(stats: SufficientStats, spec) -> ParamVector:
    if stats.marked:
        try:
            fit = mle_marked_closed_form(stats, spec)
            if "boundary" not in fit.flags:
                return fit.theta_hat
        except InsufficientExposureError:
            pass
    return moment_seed(stats, spec)


def _flat_directions(stats: SufficientStats, spec) -> tuple[str, ...]:
    f_exp, r_exp = exposures(stats, spec)
    flags = [f"flat-direction:beta{i + 1}" for i in range(spec.K) if f_exp[i] == 0]
    if r_exp == 0:
        flags.append("flat-direction:mu")
    return tuple(flags)


def mle_unconditional(stats: SufficientStats, spec, init: ParamVector | None = None) -> FitResult:
    """Naive MLE: concave ascent of the unconditional log-likelihood.

    mu separates and has the closed form total deaths / death exposure; the
    beta block is maximised by damped Newton in log-coordinates.
    """
    flat = _flat_directions(stats, spec)
    f_exp, r_exp = exposures(stats, spec)
    if init is None or (init.beta <= 0).any():
        init = moment_seed(stats, spec)
    if validate_admissible(spec, init).failures and init.test_mech is None:
        raise ModelError("initializer is inadmissible")

    mu_hat = float(stats.deaths.sum()) / r_exp if r_exp > 0 else init.mu
    K, N = spec.K, spec.N
    ks = np.arange(1, N)
    fk = spec.f[:, ks]                       # (K, N-1)
    fexp = f_exp
    nb = stats.births[ks].astype(float)
    seen = nb > 0
    free = np.array([f"flat-direction:beta{i + 1}" not in flat for i in range(K)])

    def loglik_beta(beta):
        return _count_term(nb, beta @ fk) - float(beta @ fexp)

    s0 = np.log(init.beta.copy())
    s = s0.copy()
    pinned = np.zeros(K, dtype=bool)
    trace = []
    converged = False
    iterations = 0
    for iterations in range(1, _MAX_ITER + 1):
        beta = np.exp(s)
        lam = beta @ fk
        if (lam[seen] <= 0).any():
            raise OptimizationError("zero birth rate on a visited state", trace)
        w = np.zeros_like(lam)
        w[seen] = nb[seen] / lam[seen]
        grad = fk @ w - fexp                       # d loglik / d beta
        ll = loglik_beta(beta)
        gnorm = float(np.linalg.norm(grad[free])) if free.any() else 0.0
        trace.append(gnorm)
        # KKT: interior stationarity on free coordinates, outward pressure on
        # those pinned at the boundary of the positive cone.
        if gnorm <= _GRAD_TOL_SCALE * (1.0 + abs(ll)) and (grad[pinned] <= 0).all():
            converged = True
            break
        w2 = np.zeros_like(lam)
        w2[seen] = nb[seen] / lam[seen] ** 2
        idx = np.flatnonzero(free)
        hess = -(fk[idx] * w2) @ fk[idx].T         # negative definite on free set
        # Newton in s = log beta: H_s = B H B + diag(B grad), g_s = B grad.
        b = beta[idx]
        gs = b * grad[idx]
        Hs = (hess * b).T * b + np.diag(gs)
        try:
            step_sub = np.linalg.solve(Hs, -gs)
        except np.linalg.LinAlgError:
            step_sub = np.linalg.lstsq(Hs, -gs, rcond=None)[0]
        step = np.zeros(K)
        step[idx] = step_sub
        alpha = 1.0
        improved = False
        for _ in range(40):
            beta_new = np.exp(s + alpha * step)
            if loglik_beta(beta_new) > ll:
                s = s + alpha * step
                improved = True
                break
            alpha *= 0.5
        if not improved:
            # Near the optimum the objective is flat to double precision; the
            # undamped Newton step still contracts the gradient quadratically.
            beta_new = np.exp(s + step)
            lam_new = beta_new @ fk
            if (lam_new[seen] > 0).all():
                w_new = np.zeros_like(lam_new)
                w_new[seen] = nb[seen] / lam_new[seen]
                grad_new = fk @ w_new - fexp
                if np.linalg.norm(grad_new[free]) < gnorm:
                    s = s + step
                    improved = True
        drop = _BOUNDARY_LOG_DROP if improved else _BOUNDARY_LOG_DROP_STALLED
        newly_pinned = False
        for i in np.flatnonzero(free):
            if s[i] < s0[i] - drop and grad[i] < 0:
                free[i] = False
                pinned[i] = True
                newly_pinned = True
        if not improved and not newly_pinned:
            break

    beta_hat = np.exp(s)
    beta_hat[pinned] = 0.0
    flags = list(flat)
    if pinned.any():
        flags.append("boundary")
    if not converged:
        raise OptimizationError(
            f"unconditional MLE did not converge ({iterations} iterations)", trace)
    return FitResult(
        theta_hat=ParamVector(beta_hat, mu_hat),
        converged=True,
        iterations=iterations,
        score_norm=trace[-1] if trace else 0.0,
        kind="naive",
        flags=tuple(flags),
        trace=tuple(trace),
    )


# --- conditional (Q-process) machinery --------------------------------------


class SpectralCache:
    """Per-fit memo of theta -> (generator, eigendata, tilted rates, sensitivities)."""

    def __init__(self, spec: StructuralFunctions):
        self.spec = spec
        self._store: dict = {}

    def _key(self, theta: ParamVector):
        return (theta.beta.tobytes(), theta.mu)

    def rates(self, theta: ParamVector) -> tuple[SpectralData, QProcessRates]:
        key = self._key(theta)
        entry = self._store.get(key)
        if entry is None:
            G = build_killed_generator(self.spec, theta)
            S = principal_eigen(G)
            entry = [G, S, doob_transform(G, S), None]
            self._store[key] = entry
        return entry[1], entry[2]

    def sensitivities(self, theta: ParamVector) -> SpectralSensitivities:
        key = self._key(theta)
        self.rates(theta)
        entry = self._store[key]
        if entry[3] is None:
            entry[3] = eigen_sensitivities(self.spec, theta, entry[0], entry[1])
        return entry[3]


def _guard_conditional(stats: SufficientStats) -> None:
    if stats.deaths[1] > 0:
        raise DataInconsistencyError(
            "death recorded at state 1: impossible under the survival-conditioned dynamics"
        )
    if stats.occupation[0] > 0:
        raise DataInconsistencyError("time spent in the absorbing state")


def loglik_conditional(stats, spec, theta, marked: bool = False,
                       cache: SpectralCache | None = None) -> float:
    """Path log-likelihood under the Doob-transformed dynamics.

    Invariant under the eigenvector gauge: only the tilt ratios enter.
    """
    _guard_conditional(stats)
    cache = cache or SpectralCache(spec)
    _, Q = cache.rates(theta)
    total = -float(stats.occupation @ (Q.lambda_tilde + Q.mu_tilde))
    total += _count_term(stats.deaths, Q.mu_tilde)
    if marked:
        if not stats.marked:
            raise ValueError("marked likelihood requires marked statistics")
        for i in range(spec.K):
            total += _count_term(stats.births_by_mech[i],
                                 theta.beta[i] * spec.f[i] * Q.R_plus)
    else:
        total += _count_term(stats.births, Q.lambda_tilde)
    return total


def score_weights(spec, theta, sens: SpectralSensitivities) -> tuple[np.ndarray, np.ndarray]:
    """Full-score weights (g_plus, g_minus), each (K+1, N+1).

    Birth weights live on k = 1..N-1 and death weights on k = 2..N; the
    convention g_minus(. , 1) = 0 is built in.
    """
    K, N = spec.K, spec.N
    lam = theta.beta @ spec.f
    g_plus = sens.dlog_R_plus.copy()
    g_minus = sens.dlog_R_minus.copy()
    ks = np.arange(1, N)
    g_plus[:K, ks] += spec.f[:, ks] / lam[ks]
    g_minus[K, 2:] += 1.0 / theta.mu
    g_plus[:, [0, N]] = 0.0
    g_minus[:, [0, 1]] = 0.0
    return g_plus, g_minus


def working_weights(spec, theta) -> np.ndarray:
    """Working birth weights f_i(k)/lambda_k, shape (K, N+1); mu weight is 1/mu."""
    lam = theta.beta @ spec.f
    bar = np.zeros((spec.K, spec.N + 1))
    ks = np.arange(1, spec.N)
    bar[:, ks] = spec.f[:, ks] / lam[ks]
    return bar


def _residuals(stats, Q: QProcessRates) -> tuple[np.ndarray, np.ndarray]:
    birth_res = stats.births - Q.lambda_tilde * stats.occupation
    death_res = stats.deaths - Q.mu_tilde * stats.occupation
    return birth_res, death_res


def full_score(stats, spec, theta, marked: bool = False,
               cache: SpectralCache | None = None) -> np.ndarray:
    """Gradient of the conditional log-likelihood, in statistics form.

    Component a: sum_k g_a_plus(k)[N_k_plus - lam_tilde_k T_k]
    + sum_k g_a_minus(k)[N_k_minus - mu_tilde_k T_k]. In marked form the
    mechanism part of the birth weight pairs with the per-mechanism counts.
    """
    _guard_conditional(stats)
    cache = cache or SpectralCache(spec)
    _, Q = cache.rates(theta)
    sens = cache.sensitivities(theta)
    birth_res, death_res = _residuals(stats, Q)
    if not marked:
        g_plus, g_minus = score_weights(spec, theta, sens)
        return g_plus @ birth_res + g_minus @ death_res

    if not stats.marked:
        raise ValueError("marked score requires marked statistics")
    U = sens.dlog_R_plus @ birth_res + sens.dlog_R_minus @ death_res
    U[spec.K] += float(death_res[2:].sum()) / theta.mu
    bar = working_weights(spec, theta)
    U[: spec.K] += (
        stats.births_by_mech.sum(axis=1) / theta.beta
        - bar @ (Q.lambda_tilde * stats.occupation)
    )
    return U


def working_score(stats, spec, theta, marked: bool = False,
                  cache: SpectralCache | None = None) -> np.ndarray:
    """Simplified estimating function: tilt-factor derivatives omitted.

    The tilted intensities stay in the compensators; only the weights change.
    """
    _guard_conditional(stats)
    cache = cache or SpectralCache(spec)
    _, Q = cache.rates(theta)
    birth_res, death_res = _residuals(stats, Q)
    U = np.empty(spec.K + 1)
    bar = working_weights(spec, theta)
    if marked:
        if not stats.marked:
            raise ValueError("marked score requires marked statistics")
        U[: spec.K] = (
            stats.births_by_mech.sum(axis=1) / theta.beta
            - bar @ (Q.lambda_tilde * stats.occupation)
        )
    else:
        U[: spec.K] = bar @ birth_res
    U[spec.K] = float(death_res[2:].sum()) / theta.mu
    return U


# --- score-root solvers ------------------------------------------------------


class _Coords:
    """Bijection theta <-> unconstrained-ish solver coordinates.

    Positive coordinates are optimized on the log scale; the test-space
    coordinate stays natural so it may cross zero. Admissibility of candidate
    steps (all lambda_k > 0) is the caller's barrier.
    """

    def __init__(self, template: ParamVector):
        self.template = template
        self.natural = () if template.test_mech is None else (template.test_mech - 1,)

    def to_solver(self, theta: ParamVector) -> np.ndarray:
        arr = theta.as_array()
        out = arr.copy()
        for i in range(arr.size):
            if i not in self.natural:
                out[i] = math.log(arr[i])
        return out

    def to_theta(self, s: np.ndarray) -> ParamVector:
        arr = s.copy()
        for i in range(arr.size):
            if i not in self.natural:
                arr[i] = math.exp(s[i])
        return self.template.replace(arr)

    def admissible(self, spec, theta: ParamVector) -> bool:
        return validate_admissible(spec, theta).admissible


def _fd_jacobian(fun, s: np.ndarray, base_steps: np.ndarray) -> np.ndarray:
    """Central finite-difference Jacobian of fun at s."""
    dim = s.size
    J = np.empty((dim, dim))
    for a in range(dim):
        hc = base_steps[a]
        sp = s.copy()
        sp[a] += hc
        sm = s.copy()
        sm[a] -= hc
        J[:, a] = (fun(sp) - fun(sm)) / (2 * hc)
    return J


def _near_boundary(spec, theta: ParamVector) -> bool:
    """True when some birth rate is within a sliver of the admissibility edge."""
    lam = theta.beta @ spec.f
    inner = lam[1:spec.N]
    return bool(inner.min() < 1e-6 * inner.max())


# Positive coordinates shrinking by this many log-units from the initializer
# are treated as pinned to the boundary of the open cone (KKT freeze); the
# smaller threshold applies once the line search stalls.
_BOUNDARY_LOG_DROP = 12.0
_BOUNDARY_LOG_DROP_STALLED = 6.0


class _RootState:
    """Shared bookkeeping for the score-root solvers."""

    def __init__(self, score_fn, stats, spec, init):
        self.coords = _Coords(init)
        self.cache = SpectralCache(spec)
        self.flags: list[str] = list(_flat_directions(stats, spec))
        self.dim = init.K + 1
        self.free = np.ones(self.dim, dtype=bool)
        for f in self.flags:
            name = f.split(":")[1]
            self.free[init.K if name == "mu" else int(name[4:]) - 1] = False
        self.hit_boundary = False
        self._score_fn = score_fn
        self._stats = stats
        self._spec = spec
        self.evaluations = 0

    def eval_at(self, s):
        theta = self.coords.to_theta(s)
        if not self.coords.admissible(self._spec, theta):
            self.hit_boundary = True
            return None
        self.evaluations += 1
        try:
            return self._score_fn(self._stats, self._spec, theta, cache=self.cache)
        except (ModelError, SpectralDegeneracyError, np.linalg.LinAlgError):
            return None

    def free_norm(self, U):
        return float(np.linalg.norm(U[self.free]))

    def finish(self, s, U, converged, kind, trace):
        theta = self.coords.to_theta(s)
        all_flags = list(self.flags)
        if self.coords.natural and _near_boundary(self._spec, theta):
            all_flags.append("boundary")
        return FitResult(theta, converged, self.evaluations, self.free_norm(U),
                         kind, tuple(dict.fromkeys(all_flags)), tuple(trace))

    def pin_collapsed(self, s, s0, U, drop) -> bool:
        """KKT freeze: a log coordinate collapsing toward -inf with the score
        still pushing it down has its optimum on the cone boundary."""
        pinned = False
        for i in np.flatnonzero(self.free):
            if i not in self.coords.natural and s[i] < s0[i] - drop and U[i] < 0:
                self.free[i] = False
                if "boundary" not in self.flags:
                    self.flags.append("boundary")
                pinned = True
        return pinned


def _solve_score_root(score_fn, loglik_fn, stats, spec, init: ParamVector,
                      kind: str, max_iter: int = 60) -> FitResult:
    """Score root in solver coordinates with KKT freezing.

    Estimation-space fits use a trust-region damped Newton (MINPACK hybrid)
    on the free coordinates: plain line-search Newton zigzags on the strongly
    curved birth-coordinate ridge. The test space keeps an explicit damped
    Newton loop so the admissibility barrier can reject steps; a root pressed
    against that edge is returned with a "boundary" flag instead of raising.
    Coordinates without integrated exposure are frozen at the initializer
    ("flat-direction"); coordinates driven to the edge of the open cone are
    frozen there ("boundary"). Fallback: direct maximization of the
    conditional log-likelihood (full score only).
    """
    tol = _SCORE_TOL_SCALE * (1.0 + stats.horizon)
    state = _RootState(score_fn, stats, spec, init)
    try:
        return _hybrid_root(state, loglik_fn, stats, spec, init, kind, tol)
    except OptimizationError:
        if not (state.coords.natural and state.hit_boundary):
            raise
        # The admissibility edge of the test space binds: rerun the explicit
        # Newton loop, which terminates with the constrained boundary root.
        fresh = _RootState(score_fn, stats, spec, init)
        return _newton_root(fresh, loglik_fn, stats, spec, init, kind, tol, max_iter)


def _hybrid_root(state: _RootState, loglik_fn, stats, spec, init, kind, tol) -> FitResult:
    import scipy.optimize

    s0 = state.coords.to_solver(init)
    s = s0.copy()
    U = state.eval_at(s)
    if U is None:
        raise ModelError("initializer is inadmissible")
    trace = [state.free_norm(U)]
    for _ in range(state.dim + 1):
        if state.free_norm(U) <= tol:
            return state.finish(s, U, True, kind, trace)
        idx = np.flatnonzero(state.free)
        if idx.size == 0:
            break

        def residual(sub):
            full = s.copy()
            full[idx] = sub
            u = state.eval_at(full)
            if u is None:
                return np.full(idx.size, 1e12)
            return u[idx]

        sol = scipy.optimize.root(residual, s[idx], method="hybr",
                                  options={"xtol": 1e-13, "maxfev": 600 * state.dim})
        s_new = s.copy()
        s_new[idx] = sol.x
        U_new = state.eval_at(s_new)
        if U_new is not None and state.free_norm(U_new) <= state.free_norm(U):
            s, U = s_new, U_new
            trace.append(state.free_norm(U))
        if state.free_norm(U) <= tol:
            return state.finish(s, U, True, kind, trace)
        if not state.pin_collapsed(s, s0, U, _BOUNDARY_LOG_DROP_STALLED):
            break

    norm = state.free_norm(U)
    if loglik_fn is not None and norm > tol:
        s, U, norm = _ascent_fallback(state, loglik_fn, stats, spec, s, U, trace)
    if norm <= tol or not state.free.any():
        # either converged or every coordinate is pinned with outward score
        return state.finish(s, U, True, kind, trace)
    raise OptimizationError(
        f"{kind} fit did not converge: score norm {norm:.3e} > {tol:.3e}", list(trace))


def _ascent_fallback(state: _RootState, loglik_fn, stats, spec, s, U, trace):
    """Direct maximization of the conditional log-likelihood (Nelder-Mead)."""
    from scipy.optimize import minimize

    def neg(svec):
        theta = state.coords.to_theta(svec)
        if not state.coords.admissible(spec, theta):
            return 1e30
        try:
            return -loglik_fn(stats, spec, theta, cache=state.cache)
        except (ModelError, SpectralDegeneracyError, np.linalg.LinAlgError):
            return 1e30

    res = minimize(neg, s, method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
    U_new = state.eval_at(res.x)
    if U_new is not None and state.free_norm(U_new) < state.free_norm(U):
        s, U = res.x, U_new
        state.flags.append("fallback")
        trace.append(state.free_norm(U))
    return s, U, state.free_norm(U)


def _newton_root(state: _RootState, loglik_fn, stats, spec, init, kind, tol,
                 max_iter) -> FitResult:
    s0 = state.coords.to_solver(init)
    s = s0.copy()
    U = state.eval_at(s)
    if U is None:
        raise ModelError("initializer is inadmissible")
    trace = [state.free_norm(U)]
    for _ in range(max_iter):
        norm = state.free_norm(U)
        if norm <= tol:
            return state.finish(s, U, True, kind, trace)
        idx = np.flatnonzero(state.free)
        steps = np.maximum(1e-6, 1e-6 * np.abs(s[idx]))

        def reduced(sub):
            full = s.copy()
            full[idx] = sub
            u = state.eval_at(full)
            if u is None:
                raise OptimizationError("score evaluation left the admissible region")
            return u[idx]

        try:
            J = _fd_jacobian(reduced, s[idx], steps)
            step_sub = np.linalg.solve(J, -U[idx])
        except OptimizationError:
            break
        except np.linalg.LinAlgError:
            step_sub = np.linalg.lstsq(J, -U[idx], rcond=None)[0]
        step = np.zeros(state.dim)
        step[idx] = step_sub
        limit = 2.0 * max(1.0, np.abs(s).max())
        if np.linalg.norm(step) > limit:
            step *= limit / np.linalg.norm(step)
        improved = False
        alpha = 1.0
        while alpha >= 2.0**-12:
            U_new = state.eval_at(s + alpha * step)
            if U_new is not None and state.free_norm(U_new) < norm:
                s = s + alpha * step
                U = U_new
                trace.append(state.free_norm(U))
                improved = True
                break
            alpha *= 0.5
        drop = _BOUNDARY_LOG_DROP if improved else _BOUNDARY_LOG_DROP_STALLED
        pinned = state.pin_collapsed(s, s0, U, drop)
        if pinned and not state.free.any():
            return state.finish(s, U, True, kind, trace)
        if not improved and not pinned:
            break

    norm = state.free_norm(U)
    if norm <= tol:
        return state.finish(s, U, True, kind, trace)
    if loglik_fn is not None:
        s, U, norm = _ascent_fallback(state, loglik_fn, stats, spec, s, U, trace)
        if norm <= tol:
            return state.finish(s, U, True, kind, trace)
    if state.hit_boundary:
        # Constrained root: the admissibility edge binds; report rather than fail.
        if "boundary" not in state.flags:
            state.flags.append("boundary")
        return state.finish(s, U, False, kind, trace)
    raise OptimizationError(
        f"{kind} fit did not converge: score norm {norm:.3e} > {tol:.3e}", list(trace))


def _with_multistart(fit_once, stats, spec, init, multistart: int, rng=None) -> FitResult:
    result = fit_once(init)
    if multistart <= 0:
        return result
    gen = np.random.default_rng(0 if rng is None else rng)
    disagree = False
    base = result.theta_hat.as_array()
    for _ in range(multistart):
        jitter = init.replace(init.as_array() * np.exp(gen.normal(0.0, 0.5, init.K + 1)))
        try:
            other = fit_once(jitter)
        except (OptimizationError, ModelError):
            continue
        rel = np.abs(other.theta_hat.as_array() - base) / np.maximum(np.abs(base), 1e-12)
        if rel.max() > 1e-4:
            disagree = True
    if disagree:
        result = replace(result, flags=result.flags + ("multistart-disagreement",))
    return result


def fit_conditional_mle(stats, spec, init: ParamVector | None = None,
                        marked: bool = False, multistart: int = 0) -> FitResult:
    """Root of the full conditional score (damped Newton, FD Jacobian)."""
    init = init if init is not None else default_init(stats, spec)

    def score(st, sp, th, cache=None):
        return full_score(st, sp, th, marked=marked, cache=cache)

    def loglik(st, sp, th, cache=None):
        return loglik_conditional(st, sp, th, marked=marked, cache=cache)

    def once(start):
        return _solve_score_root(score, loglik, stats, spec, start, "conditional-mle")

    return _with_multistart(once, stats, spec, init, multistart)


def fit_qmle(stats, spec, init: ParamVector | None = None,
             marked: bool = False, multistart: int = 0) -> FitResult:
    """Root of the working score (same solver, no tilt sensitivities)."""
    init = init if init is not None else default_init(stats, spec)

    def score(st, sp, th, cache=None):
        return working_score(st, sp, th, marked=marked, cache=cache)

    def once(start):
        return _solve_score_root(score, None, stats, spec, start, "qmle")

    return _with_multistart(once, stats, spec, init, multistart)

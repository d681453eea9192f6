"""Composite birth-death model: structural functions, parameters, rates.

The process lives on {0, 1, ..., N} with absorbing state 0. Births from state
k occur at rate lambda_k(beta) = sum_i beta_i * f_i(k), an additive mixture of
K mechanisms with known structural functions f_i; deaths occur at rate
mu * r(k). Structural functions are tabulated densely so rate evaluation is
allocation-free.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError

# Tabulated binomials above this size are no longer exact in double precision.
_OVERFLOW_GUARD = 1e15


@dataclass(frozen=True)
class StructuralFunctions:
    """Capacity N, mechanism count K, and tabulated f_i(k), r(k)."""

    N: int
    f: np.ndarray  # shape (K, N+1), f[i, k] = f_{i+1}(k)
    r: np.ndarray  # shape (N+1,)
    family: str = "custom"

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        r = np.asarray(self.r, dtype=float)
        if self.N < 2:
            raise ValueError(f"capacity N must be >= 2, got {self.N}")
        if f.ndim != 2 or f.shape[1] != self.N + 1 or f.shape[0] < 1:
            raise ValueError(f"f must have shape (K, N+1), got {f.shape}")
        if r.shape != (self.N + 1,):
            raise ValueError(f"r must have shape (N+1,), got {r.shape}")
        if not (np.isfinite(f).all() and np.isfinite(r).all()):
            raise ValueError("structural tables must be finite")
        if (f < 0).any() or (r < 0).any():
            raise ValueError("structural tables must be nonnegative")
        if (f[:, 0] != 0).any() or (f[:, self.N] != 0).any():
            raise ValueError("every mechanism must satisfy f_i(0) = f_i(N) = 0")
        if r[0] != 0 or (r[1:] <= 0).any():
            raise ValueError("r must satisfy r(0) = 0 and r(k) > 0 for k >= 1")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "r", r)

    @property
    def K(self) -> int:
        return self.f.shape[0]

    def scale_factors(self) -> np.ndarray:
        """Reporting scale for birth coordinates: N^i for the SIS family, else 1."""
        if self.family == "sis":
            return np.array([float(self.N) ** (i + 1) for i in range(self.K)])
        return np.ones(self.K)


@dataclass(frozen=True)
class ParamVector:
    """Parameters theta = (beta_1..beta_K, mu) with their admissibility space.

    ``test_mech`` is None for the estimation space (all coordinates > 0) or a
    1-based mechanism number whose beta coordinate may be <= 0 provided every
    birth rate on the transient states stays strictly positive.
    """

    beta: np.ndarray
    mu: float
    test_mech: int | None = None

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a 1-d sequence")
        if not np.isfinite(beta).all() or not np.isfinite(self.mu):
            raise ValueError("parameters must be finite")
        if self.test_mech is not None and not 1 <= self.test_mech <= beta.size:
            raise ValueError(f"test mechanism {self.test_mech} out of range 1..{beta.size}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "mu", float(self.mu))

    @property
    def K(self) -> int:
        return self.beta.size

    @property
    def space(self) -> str:
        return "estimation" if self.test_mech is None else f"test({self.test_mech})"

    def as_array(self) -> np.ndarray:
        return np.append(self.beta, self.mu)

    def replace(self, array: np.ndarray) -> "ParamVector":
        """New ParamVector with the same space and coordinates from ``array``."""
        array = np.asarray(array, dtype=float)
        return ParamVector(array[:-1], array[-1], self.test_mech)


@dataclass(frozen=True)
class RateVector:
    """Total birth and death rates indexed by state 0..N."""

    lam: np.ndarray
    mu_rates: np.ndarray


@dataclass(frozen=True)
class AdmissibilityReport:
    admissible: bool
    failures: tuple[str, ...] = ()
    violating_states: tuple[int, ...] = ()


def pascal_binomials(N: int, K: int) -> np.ndarray:
    """Table C(k, i) for k = 0..N, i = 1..K via the Pascal recurrence."""
    table = np.zeros((K + 1, N + 1))
    table[0, :] = 1.0
    for k in range(1, N + 1):
        for i in range(1, min(k, K) + 1):
            table[i, k] = table[i - 1, k - 1] + table[i, k - 1]
    return table[1:, :]


def sis_structural(N: int, K: int) -> StructuralFunctions:
    """SIS family on the complete hypergraph: f_i(k) = C(k, i)(N-k), r(k) = k."""
    if N < 2:
        raise ValueError(f"capacity N must be >= 2, got {N}")
    if not 1 <= K <= N - 1:
        raise ValueError(f"mechanism count K must satisfy 1 <= K <= N-1, got {K}")
    binom = pascal_binomials(N, K)
    if binom[K - 1].max() * N > _OVERFLOW_GUARD:
        raise ValueError(
            f"K={K} too large for N={N}: tabulated rates exceed the exact "
            f"double-precision range (guard {_OVERFLOW_GUARD:g})"
        )
    f = binom * (N - np.arange(N + 1))[None, :]
    r = np.arange(N + 1, dtype=float)
    return StructuralFunctions(N=N, f=f, r=r, family="sis")


def rate_vector(spec: StructuralFunctions, theta: ParamVector) -> RateVector:
    if theta.K != spec.K:
        raise ValueError(f"theta has {theta.K} mechanisms, spec has {spec.K}")
    lam = theta.beta @ spec.f
    return RateVector(lam=lam, mu_rates=theta.mu * spec.r)


def birth_rate(spec: StructuralFunctions, theta: ParamVector, k: int) -> float:
    if not 0 <= k <= spec.N:
        raise ValueError(f"state {k} out of range 0..{spec.N}")
    return float(theta.beta @ spec.f[:, k])


def death_rate(spec: StructuralFunctions, theta: ParamVector, k: int) -> float:
    if not 0 <= k <= spec.N:
        raise ValueError(f"state {k} out of range 0..{spec.N}")
    return theta.mu * float(spec.r[k])


def validate_admissible(spec: StructuralFunctions, theta: ParamVector) -> AdmissibilityReport:
    """Check irreducibility of the killed chain plus declared-space membership.

    Irreducibility of the tridiagonal killed generator on {1..N} is exactly:
    lambda_k > 0 for k = 1..N-1 and mu*r(k) > 0 for k = 2..N.
    """
    failures: list[str] = []
    states: list[int] = []
    if theta.K != spec.K:
        return AdmissibilityReport(False, (f"theta has {theta.K} mechanisms, spec has {spec.K}",))

    rates = rate_vector(spec, theta)
    bad_birth = [k for k in range(1, spec.N) if rates.lam[k] <= 0]
    if bad_birth:
        failures.append(f"lambda_k <= 0 at states {bad_birth[:5]}")
        states.extend(bad_birth)
    bad_death = [k for k in range(2, spec.N + 1) if rates.mu_rates[k] <= 0]
    if bad_death:
        failures.append(f"mu_k <= 0 at states {bad_death[:5]}")
        states.extend(bad_death)

    if theta.mu <= 0:
        failures.append("mu <= 0")
    if theta.test_mech is None:
        if (theta.beta <= 0).any():
            idx = [int(i) + 1 for i in np.flatnonzero(theta.beta <= 0)]
            failures.append(f"beta coordinates {idx} not strictly positive (estimation space)")
    else:
        others = np.delete(theta.beta, theta.test_mech - 1)
        if (others <= 0).any():
            failures.append("a non-test beta coordinate is not strictly positive")

    return AdmissibilityReport(not failures, tuple(failures), tuple(states))


def require_admissible(spec: StructuralFunctions, theta: ParamVector) -> None:
    report = validate_admissible(spec, theta)
    if not report.admissible:
        raise ModelError("; ".join(report.failures))


# --- model specification files -------------------------------------------------
#
# JSON schema:
#   N        int >= 2
#   K        int >= 1
#   family   "sis" | "custom"
#   f        [[...]] K rows of N+1 nonnegative reals (custom only)
#   r        [...] N+1 nonnegative reals (custom only)
#   theta    {"beta": [...], "mu": number} (optional)
#   test_mech  1-based mechanism number (optional, declares the test space)


def model_from_dict(data: dict) -> tuple[StructuralFunctions, ParamVector | None]:
    try:
        N = int(data["N"])
        K = int(data["K"])
        family = data.get("family", "sis")
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed model specification: {exc}") from exc
    if family == "sis":
        spec = sis_structural(N, K)
    elif family == "custom":
        if "f" not in data or "r" not in data:
            raise ModelError("custom family requires explicit f and r tables")
        spec = StructuralFunctions(N=N, f=np.asarray(data["f"], dtype=float),
                                   r=np.asarray(data["r"], dtype=float), family="custom")
        if spec.K != K:
            raise ModelError(f"f table has {spec.K} rows but K = {K}")
    else:
        raise ModelError(f"unknown family {family!r}")

    theta = None
    if "theta" in data:
        t = data["theta"]
        theta = ParamVector(np.asarray(t["beta"], dtype=float), float(t["mu"]),
                            data.get("test_mech"))
        if theta.K != K:
            raise ModelError(f"theta has {theta.K} mechanisms but K = {K}")
    return spec, theta


def load_model(path) -> tuple[StructuralFunctions, ParamVector | None]:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def model_to_dict(spec: StructuralFunctions, theta: ParamVector | None = None) -> dict:
    data: dict = {"N": spec.N, "K": spec.K, "family": spec.family}
    if spec.family == "custom":
        data["f"] = spec.f.tolist()
        data["r"] = spec.r.tolist()
    if theta is not None:
        data["theta"] = {"beta": theta.beta.tolist(), "mu": theta.mu}
        if theta.test_mech is not None:
            data["test_mech"] = theta.test_mech
    return data

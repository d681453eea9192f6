"""Exact simulation: original absorbing chain, rejection conditioning, Q-process.

Randomness discipline
---------------------
Every trajectory consumes one dedicated counter-based stream: a Philox
generator keyed by SeedSequence(entropy=base_seed, spawn_key=(replicate_id,
attempt)). Uniforms are drawn from that stream in blocks of 4096 and consumed
in event order as (waiting time, direction, mechanism mark if requested), so
identical (base_seed, replicate_id) reproduce identical trajectories
bit-for-bit regardless of worker scheduling. Waiting times are inverse-CDF
exponentials, -log1p(-u)/rate.
"""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import RejectionBudgetError
from .model import ParamVector, StructuralFunctions, rate_vector, require_admissible
from .spectral import spectral_bundle

_BLOCK = 4096


@dataclass(frozen=True)
class RngStream:
    """Replicate-indexed source of independent Philox substreams."""

    base_seed: int
    replicate_id: int = 0

    def generator(self, attempt: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.base_seed,
                                     spawn_key=(self.replicate_id, attempt))
        return np.random.Generator(np.random.Philox(seq))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"rng must be RngStream or numpy Generator, got {type(rng)!r}")


@dataclass(frozen=True)
class Trajectory:
    """Initial state plus ordered jump events on (0, horizon].

    ``states`` holds the state just after each event; ``marks`` holds 1-based
    mechanism numbers for birth events (0 for deaths) or None when unmarked.
    ``absorbed_at`` is the hitting time of 0, if reached within the horizon.
    """

    x0: int
    horizon: float
    times: np.ndarray       # (n,) float64, strictly increasing in (0, horizon]
    directions: np.ndarray  # (n,) int8, +1 birth / -1 death
    states: np.ndarray      # (n,) int32, state after each event
    marks: np.ndarray | None = None  # (n,) int16
    absorbed_at: float | None = None

    @property
    def n_events(self) -> int:
        return self.times.size

    @property
    def final_state(self) -> int:
        return int(self.states[-1]) if self.n_events else self.x0

    @property
    def survived(self) -> bool:
        return self.absorbed_at is None

    def validate(self, N: int | None = None) -> None:
        """Raise ValueError if the event record is internally inconsistent."""
        t, d, s = self.times, self.directions, self.states
        if not (t.shape == d.shape == s.shape):
            raise ValueError("event arrays have mismatched lengths")
        if t.size and (t[0] <= 0 or np.diff(t).min() <= 0 or t[-1] > self.horizon):
            raise ValueError("event times must be strictly increasing in (0, horizon]")
        path = np.concatenate(([self.x0], s))
        if not np.array_equal(np.diff(path), d):
            raise ValueError("directions inconsistent with the state path")
        if path.min() < 0 or (N is not None and path.max() > N):
            raise ValueError("state path leaves 0..N")
        if N is not None and (d[path[:-1] == N] == 1).any():
            raise ValueError("birth recorded from state N")
        if (d[path[:-1] == 0] == -1).any():
            raise ValueError("death recorded from state 0")
        if self.absorbed_at is not None:
            if self.x0 == 0:
                if t.size:
                    raise ValueError("events recorded from an absorbed start")
            elif not (t.size and t[-1] == self.absorbed_at and s[-1] == 0):
                raise ValueError("absorption time inconsistent with events")
        if self.marks is not None:
            if self.marks.shape != t.shape:
                raise ValueError("marks length mismatch")
            if ((self.marks > 0) != (d == 1)).any():
                raise ValueError("birth events must carry marks, deaths must not")


def state_at(traj: Trajectory, t: float) -> int:
    """Right-continuous path value at time t."""
    if not 0 <= t <= traj.horizon:
        raise ValueError(f"time {t} outside [0, {traj.horizon}]")
    idx = int(np.searchsorted(traj.times, t, side="right")) - 1
    return traj.x0 if idx < 0 else int(traj.states[idx])


def _mark_cumulatives(spec: StructuralFunctions, theta: ParamVector) -> list:
    """Per-state cumulative mechanism probabilities beta_i f_i(k) / lambda_k."""
    lam = theta.beta @ spec.f
    cums = []
    for k in range(spec.N + 1):
        if lam[k] > 0:
            cums.append(np.cumsum(theta.beta * spec.f[:, k] / lam[k]).tolist())
        else:
            cums.append(None)
    return cums


def _gillespie(lam, tot, x0, T, gen, mark_cums, absorbing: bool) -> Trajectory:
    """Shared event loop; lam/tot are per-state rate tables (Python lists)."""
    times: list[float] = []
    dirs: list[int] = []
    states: list[int] = []
    marks: list[int] | None = [] if mark_cums is not None else None

    k = x0
    t = 0.0
    absorbed = 0.0 if (absorbing and x0 == 0) else None
    buf = gen.random(_BLOCK).tolist()
    bi = 0
    log1p = math.log1p
    while absorbed is None:
        total = tot[k]
        if bi >= _BLOCK - 3:
            buf = gen.random(_BLOCK).tolist()
            bi = 0
        t += -log1p(-buf[bi]) / total
        bi += 1
        if t >= T:
            break
        if buf[bi] * total < lam[k]:
            bi += 1
            if marks is not None:
                u = buf[bi]
                bi += 1
                cums = mark_cums[k]
                m = 1
                while u > cums[m - 1]:
                    m += 1
                marks.append(m)
            k += 1
            dirs.append(1)
        else:
            bi += 1
            if marks is not None:
                marks.append(0)
            k -= 1
            dirs.append(-1)
        times.append(t)
        states.append(k)
        if absorbing and k == 0:
            absorbed = t

    return Trajectory(
        x0=x0,
        horizon=float(T),
        times=np.asarray(times, dtype=np.float64),
        directions=np.asarray(dirs, dtype=np.int8),
        states=np.asarray(states, dtype=np.int32),
        marks=None if marks is None else np.asarray(marks, dtype=np.int16),
        absorbed_at=absorbed,
    )


def simulate_original(spec, theta, x0: int, T: float, rng, mark: bool = False) -> Trajectory:
    """Gillespie simulation of the absorbing chain up to absorption or T."""
    if not 0 <= x0 <= spec.N:
        raise ValueError(f"x0 = {x0} out of range 0..{spec.N}")
    if T <= 0:
        raise ValueError("horizon T must be positive")
    require_admissible(spec, theta)
    gen = _as_generator(rng)
    rates = rate_vector(spec, theta)
    lam = rates.lam.tolist()
    tot = (rates.lam + rates.mu_rates).tolist()
    cums = _mark_cumulatives(spec, theta) if mark else None
    return _gillespie(lam, tot, x0, T, gen, cums, absorbing=True)


def truncate(traj: Trajectory, T: float) -> Trajectory:
    """Restriction of a trajectory to the window [0, T]."""
    if T > traj.horizon:
        raise ValueError("cannot extend a trajectory")
    n = int(np.searchsorted(traj.times, T, side="right"))
    absorbed = traj.absorbed_at if (traj.absorbed_at is not None and traj.absorbed_at <= T) else None
    return Trajectory(
        x0=traj.x0,
        horizon=float(T),
        times=traj.times[:n].copy(),
        directions=traj.directions[:n].copy(),
        states=traj.states[:n].copy(),
        marks=None if traj.marks is None else traj.marks[:n].copy(),
        absorbed_at=absorbed,
    )


def simulate_survival_conditioned(
    spec,
    theta,
    x0: int,
    T: float,
    rng: RngStream,
    mark: bool = False,
    max_attempts: int = 1000,
    condition_horizon: float | None = None,
) -> tuple[Trajectory, int]:
    """First path (with its attempt count) surviving past the conditioning horizon.

    Exact rejection sampling from P(. | tau_0 > T'): fresh substreams per
    attempt, so the accepted path is reproducible independently of how many
    rejections preceded it on other workers. ``condition_horizon`` T' >= T
    conditions on longer survival than the observation window (default T).
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    if not isinstance(rng, RngStream):
        raise TypeError("survival-conditioned sampling needs an RngStream for attempt splitting")
    Tc = T if condition_horizon is None else float(condition_horizon)
    if Tc < T:
        raise ValueError("condition_horizon must be >= T")
    for attempt in range(max_attempts):
        traj = simulate_original(spec, theta, x0, Tc, rng.generator(attempt), mark=mark)
        if traj.survived:
            if Tc > T:
                traj = truncate(traj, T)
            return traj, attempt + 1
    raise RejectionBudgetError(attempts=max_attempts, survivors=0)


def simulate_q_process(spec, theta, x0: int, T: float, rng, mark: bool = False) -> Trajectory:
    """Gillespie simulation of the Doob-transformed ergodic chain on {1..N}.

    Mechanism marks use the original proportions beta_i f_i(k) / lambda_k:
    the tilt factor is common to all mechanisms and cancels.
    """
    if not 1 <= x0 <= spec.N:
        raise ValueError(f"x0 = {x0} out of range 1..{spec.N}")
    if T <= 0:
        raise ValueError("horizon T must be positive")
    gen = _as_generator(rng)
    _, _, Q = spectral_bundle(spec, theta)
    lam = Q.lambda_tilde.tolist()
    tot = (Q.lambda_tilde + Q.mu_tilde).tolist()
    cums = _mark_cumulatives(spec, theta) if mark else None
    return _gillespie(lam, tot, x0, T, gen, cums, absorbing=False)


# --- trajectory files ------------------------------------------------------
#
# CSV: header t,direction,mark,state_after; direction is "birth"/"death";
# mark is a 1-based mechanism number for marked births, empty otherwise.
# Sidecar JSON: x0, horizon T, absorbed_at, marked flag, plus caller metadata
# (seed, theta, model reference).


def save_trajectory(traj: Trajectory, csv_path, meta: dict | None = None, meta_path=None) -> None:
    csv_path = Path(csv_path)
    if meta_path is None:
        meta_path = csv_path.with_suffix(".meta.json")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "direction", "mark", "state_after"])
        marks = traj.marks
        for j in range(traj.n_events):
            writer.writerow([
                repr(float(traj.times[j])),
                "birth" if traj.directions[j] == 1 else "death",
                int(marks[j]) if (marks is not None and marks[j] > 0) else "",
                int(traj.states[j]),
            ])
    sidecar = {
        "x0": traj.x0,
        "T": traj.horizon,
        "absorbed_at": traj.absorbed_at,
        "marked": traj.marks is not None,
        "n_events": traj.n_events,
    }
    if meta:
        sidecar.update(meta)
    with open(meta_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_trajectory(csv_path, meta_path=None) -> tuple[Trajectory, dict]:
    csv_path = Path(csv_path)
    if meta_path is None:
        meta_path = csv_path.with_suffix(".meta.json")
    with open(meta_path) as fh:
        meta = json.load(fh)
    times, dirs, states, marks = [], [], [], []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            times.append(float(row["t"]))
            dirs.append(1 if row["direction"] == "birth" else -1)
            marks.append(int(row["mark"]) if row["mark"] else 0)
            states.append(int(row["state_after"]))
    traj = Trajectory(
        x0=int(meta["x0"]),
        horizon=float(meta["T"]),
        times=np.asarray(times, dtype=np.float64),
        directions=np.asarray(dirs, dtype=np.int8),
        states=np.asarray(states, dtype=np.int32),
        marks=np.asarray(marks, dtype=np.int16) if meta.get("marked") else None,
        absorbed_at=meta.get("absorbed_at"),
    )
    traj.validate()
    return traj, meta

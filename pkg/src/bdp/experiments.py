"""Batch experiment harness: replicate orchestration and figure-grade outputs.

Each experiment writes four artifacts into its output directory:
``replicates.csv`` (one row per replicate result), ``summary.json`` (statistics
recomputable from the CSV plus the echoed configuration), ``plot_*.svg``, and
``errors.jsonl`` (one JSON object per flagged replicate failure). Outputs are
byte-deterministic functions of (config, base_seed), also under parallel
replicate execution: replicate r always consumes the stream (base_seed, r) and
results are committed in replicate order.
"""

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import svgplot
from .asymptotics import (
    fisher_information_observed,
    godambe,
    ks_distance_normal,
    normal_cdf,
    rn_derivative,
    rn_full_window,
    wald_test,
)
from .errors import BdpError, ExperimentError, RejectionBudgetError
from .inference import (
    SpectralCache,
    default_init,
    fit_conditional_mle,
    fit_qmle,
    mle_marked_closed_form,
    mle_unconditional,
    sufficient_stats,
)
from .model import ParamVector, model_from_dict
from .simulate import (
    RngStream,
    simulate_original,
    simulate_q_process,
    simulate_survival_conditioned,
)
from .spectral import diagnostics_dict

EXPERIMENTS = ("trajectory", "bias-naive", "consistency", "estimator-means",
               "null-test", "diagnostics")
_SAMPLERS = ("conditioned", "q-process", "original")
_ESTIMATORS = ("naive", "conditional-mle", "qmle")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: dict
    x0: int
    horizons: tuple
    replicates: int
    base_seed: int
    marked: bool = False
    estimators: tuple = ("conditional-mle", "qmle")
    sampler: str = "conditioned"
    max_attempts: int = 1000
    condition_horizon: float | None = None
    mechanism: int = 2
    levels: tuple = (0.01, 0.05, 0.10)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ExperimentError(f"unknown experiment {self.experiment!r}")
        if self.sampler not in _SAMPLERS:
            raise ExperimentError(f"unknown sampler {self.sampler!r}")
        bad = set(self.estimators) - set(_ESTIMATORS)
        if bad:
            raise ExperimentError(f"unknown estimators {sorted(bad)}")
        if self.replicates < 1:
            raise ExperimentError("replicates must be >= 1")
        if not self.horizons:
            raise ExperimentError("horizons must be nonempty")
        object.__setattr__(self, "horizons", tuple(float(t) for t in self.horizons))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "levels", tuple(float(a) for a in self.levels))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ExperimentError(f"unknown config fields {sorted(unknown)}")
        missing = {"experiment", "model", "x0", "horizons", "replicates", "base_seed"} - set(data)
        if missing:
            raise ExperimentError(f"missing config fields {sorted(missing)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ExperimentError(f"config parse error: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "model": self.model,
            "x0": self.x0,
            "horizons": list(self.horizons),
            "replicates": self.replicates,
            "base_seed": self.base_seed,
            "marked": self.marked,
            "estimators": list(self.estimators),
            "sampler": self.sampler,
            "max_attempts": self.max_attempts,
            "condition_horizon": self.condition_horizon,
            "mechanism": self.mechanism,
            "levels": list(self.levels),
        }


def _sample(config: ExperimentConfig, spec, theta0, T: float, rep: int, marked: bool):
    """One trajectory for replicate ``rep`` at horizon T; returns (traj, attempts)."""
    stream = RngStream(config.base_seed, rep)
    if config.sampler == "q-process":
        x0 = max(config.x0, 1)
        return simulate_q_process(spec, theta0, x0, T, stream, mark=marked), 1
    if config.sampler == "original":
        return simulate_original(spec, theta0, config.x0, T, stream, mark=marked), 1
    return simulate_survival_conditioned(
        spec, theta0, config.x0, T, stream, mark=marked,
        max_attempts=config.max_attempts, condition_horizon=config.condition_horizon)


def _theta_fields(spec, theta: ParamVector) -> dict:
    scale = spec.scale_factors()
    row = {f"b{i + 1}": float(theta.beta[i] * scale[i]) for i in range(spec.K)}
    row.update({f"beta{i + 1}": float(theta.beta[i]) for i in range(spec.K)})
    row["mu"] = theta.mu
    return row


def _fit_row(base: dict, spec, fit) -> dict:
    row = dict(base)
    row.update(_theta_fields(spec, fit.theta_hat))
    row["converged"] = int(fit.converged)
    row["iterations"] = fit.iterations
    row["flags"] = ";".join(fit.flags)
    return row


# --- per-replicate workers (top level: picklable) ----------------------------


def _rep_trajectory(config, spec, theta0, rep) -> list:
    T = config.horizons[0]
    traj, attempts = _sample(config, spec, theta0, T, rep, config.marked)
    stats = sufficient_stats(traj, spec)
    avg_state = float(np.arange(spec.N + 1) @ stats.occupation) / T
    return [{
        "replicate": rep, "T": T, "estimator": "", "marked": int(config.marked),
        "attempts": attempts, "n_events": traj.n_events,
        "survived": int(traj.survived), "final_state": traj.final_state,
        "time_avg_state": avg_state,
    }]


def _rep_bias(config, spec, theta0, rep) -> list:
    T = config.horizons[0]
    traj, attempts = _sample(config, spec, theta0, T, rep, marked=True)
    stats = sufficient_stats(traj, spec)
    base = {"replicate": rep, "T": T, "attempts": attempts, "n_events": traj.n_events}
    return [
        _fit_row({**base, "estimator": "naive", "marked": 0}, spec,
                 mle_unconditional(stats.unmarked(), spec)),
        _fit_row({**base, "estimator": "naive", "marked": 1}, spec,
                 mle_marked_closed_form(stats, spec)),
    ]


def _rep_consistency(config, spec, theta0, rep) -> list:
    rows = []
    fitters = {"conditional-mle": fit_conditional_mle, "qmle": fit_qmle}
    wanted = [e for e in config.estimators if e in fitters]
    for T in config.horizons:
        traj, attempts = _sample(config, spec, theta0, T, rep, marked=True)
        stats = sufficient_stats(traj, spec)
        base = {"replicate": rep, "T": T, "attempts": attempts, "n_events": traj.n_events}
        modes = (False, True) if config.marked else (False,)
        for name in wanted:
            for marked in modes:
                fit = fitters[name](stats, spec, marked=marked)
                rows.append(_fit_row({**base, "estimator": name, "marked": int(marked)},
                                     spec, fit))
    return rows


def _rep_means(config, spec, theta0, rep) -> list:
    rows = []
    for T in config.horizons:
        traj, attempts = _sample(config, spec, theta0, T, rep, marked=True)
        stats = sufficient_stats(traj, spec)
        base = {"replicate": rep, "T": T, "attempts": attempts, "n_events": traj.n_events,
                "marked": int(config.marked)}
        for name in config.estimators:
            if name == "naive":
                fit = (mle_marked_closed_form(stats, spec) if config.marked
                       else mle_unconditional(stats.unmarked(), spec))
            elif name == "conditional-mle":
                fit = fit_conditional_mle(stats, spec, marked=config.marked)
            else:
                fit = fit_qmle(stats, spec, marked=config.marked)
            rows.append(_fit_row({**base, "estimator": name}, spec, fit))
    return rows


def _rep_nulltest(config, spec, theta0, rep) -> list:
    T = config.horizons[0]
    traj, attempts = _sample(config, spec, theta0, T, rep, marked=config.marked)
    stats = sufficient_stats(traj, spec)
    # Anchor the initializer on the enlarged test space so the tested
    # coordinate may cross zero during the fit.
    seed = default_init(stats, spec)
    test_init = ParamVector(seed.beta, seed.mu, config.mechanism)
    fit = fit_conditional_mle(stats, spec, init=test_init, marked=False)
    I_hat = fisher_information_observed(stats, spec, fit.theta_hat)
    wald = wald_test(fit, I_hat, T, config.mechanism, levels=config.levels)
    row = _fit_row({"replicate": rep, "T": T, "estimator": "conditional-mle",
                    "marked": 0, "attempts": attempts, "n_events": traj.n_events},
                   spec, fit)
    row.update({
        "Z": wald.Z, "W": wald.W, "se": wald.se, "p": wald.p_one_sided,
        "boundary": int(wald.boundary),
    })
    for level in config.levels:
        row[f"reject_{level:g}"] = int(wald.reject_at[level])
    return [row]


_WORKERS = {
    "trajectory": _rep_trajectory,
    "bias-naive": _rep_bias,
    "consistency": _rep_consistency,
    "estimator-means": _rep_means,
    "null-test": _rep_nulltest,
}


def _run_one(args):
    config_dict, rep = args
    config = ExperimentConfig.from_dict(config_dict)
    spec, theta0 = model_from_dict(config.model)
    if theta0 is None:
        raise ExperimentError("model file must carry theta for experiments")
    try:
        return rep, _WORKERS[config.experiment](config, spec, theta0, rep), None
    except BdpError as exc:
        return rep, [], {"replicate": rep, "error": type(exc).__name__, "message": str(exc)}


# --- summaries ----------------------------------------------------------------


def _mean(xs):
    return sum(xs) / len(xs) if xs else math.nan


def _sd(xs):
    if len(xs) < 2:
        return math.nan
    m = _mean(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def _group_stats(rows, spec, truth_fields: dict) -> dict:
    out = {"count": len(rows)}
    for name in truth_fields:
        vals = [r[name] for r in rows if isinstance(r.get(name), float)]
        if not vals:
            continue
        mean, sd = _mean(vals), _sd(vals)
        mc_se = sd / math.sqrt(len(vals)) if len(vals) > 1 else math.nan
        truth = truth_fields[name]
        rmse = math.sqrt(_mean([(v - truth) ** 2 for v in vals]))
        out[name] = {"mean": mean, "sd": sd, "mc_se": mc_se, "rmse": rmse,
                     "truth": truth, "bias": mean - truth}
    return out


def _summarize(config: ExperimentConfig, rows: list, spec, theta0) -> dict:
    truth = _theta_fields(spec, theta0)
    coords = [f"b{i + 1}" for i in range(spec.K)] + ["mu"]
    truth_fields = {c: truth[c] for c in coords}
    stats: dict = {}
    if config.experiment == "trajectory":
        survived = [r["survived"] for r in rows]
        stats["survival_fraction"] = _mean(survived) if survived else math.nan
        stats["mean_time_avg_state"] = _mean(
            [r["time_avg_state"] for r in rows if r["survived"]])
        stats["replicates_done"] = len(rows)
    elif config.experiment in ("bias-naive", "consistency", "estimator-means"):
        groups: dict = {}
        for r in rows:
            groups.setdefault((r["T"], r["estimator"], r["marked"]), []).append(r)
        for key in sorted(groups):
            T, est, marked = key
            label = f"T={T:g}|{est}|{'marked' if marked else 'unmarked'}"
            stats[label] = _group_stats(groups[key], spec, truth_fields)
        stats["mean_attempts"] = _mean([r["attempts"] for r in rows])
    elif config.experiment == "null-test":
        zs = [r["Z"] for r in rows]
        ws = [r["W"] for r in rows]
        stats["z_mean"] = _mean(zs)
        stats["z_sd"] = _sd(zs)
        stats["ks_normal"] = ks_distance_normal(zs) if zs else math.nan
        stats["p_w_zero"] = _mean([1.0 if w == 0.0 else 0.0 for w in ws])
        for level in config.levels:
            stats[f"size_{level:g}"] = _mean([float(r[f"reject_{level:g}"]) for r in rows])
        stats["boundary_fraction"] = _mean([float(r["boundary"]) for r in rows])
        stats["count"] = len(rows)
    return stats


# --- plots --------------------------------------------------------------------


def _scatter_plots(config, rows, spec, theta0, out_dir):
    if spec.K < 2:
        return
    truth = _theta_fields(spec, theta0)
    groups: dict = {}
    for r in rows:
        if r.get("estimator"):
            groups.setdefault((r["T"], r["estimator"], r["marked"]), []).append(r)
    for (T, est, marked), rs in sorted(groups.items()):
        xs = [r["b1"] for r in rs]
        ys = [r["b2"] for r in rs]
        mode = "marked" if marked else "unmarked"
        name = f"plot_scatter_{est}_{mode}_T{T:g}.svg"
        svg = svgplot.scatter_svg(
            {est: (xs, ys, "steelblue")},
            xlabel="b1 = N beta1", ylabel="b2 = N^2 beta2",
            title=f"{est} ({mode}), T={T:g}, R={len(rs)}",
            cross=(truth["b1"], truth["b2"]),
            circle=(_mean(xs), _mean(ys)),
        )
        (out_dir / name).write_text(svg)


def _means_plots(config, rows, spec, theta0, out_dir):
    truth = _theta_fields(spec, theta0)
    colors = {"naive": "firebrick", "conditional-mle": "steelblue", "qmle": "seagreen"}
    for coord in [f"b{i + 1}" for i in range(spec.K)] + ["mu"]:
        series = {}
        for est in config.estimators:
            pts: dict = {}
            for r in rows:
                if r["estimator"] == est:
                    pts.setdefault(r["T"], []).append(r[coord])
            ts = sorted(pts)
            if ts:
                series[est] = (ts, [_mean(pts[t]) for t in ts], colors.get(est, "gray"))
        if series:
            svg = svgplot.line_svg(series, xlabel="horizon T", ylabel=f"mean {coord}",
                                   title=f"estimator means: {coord}", hline=truth[coord])
            (out_dir / f"plot_means_{coord}.svg").write_text(svg)


def _nulltest_plot(config, rows, out_dir):
    zs = [r["Z"] for r in rows]
    if not zs:
        return
    grid = [min(zs) + (max(zs) - min(zs)) * i / 200 for i in range(201)]
    dens = [math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) for z in grid]
    svg = svgplot.histogram_svg(zs, bins=30, xlabel="Z", title="null distribution of Z",
                                curve=(grid, dens), vline=0.0)
    (out_dir / "plot_null_z.svg").write_text(svg)


def _trajectory_plot(config, spec, theta0, out_dir):
    T = config.horizons[0]
    for rep in range(config.replicates):
        try:
            traj, _ = _sample(config, spec, theta0, T, rep, config.marked)
        except RejectionBudgetError:
            continue
        if traj.survived:
            path = [traj.x0] + traj.states.tolist()
            svg = svgplot.step_path_svg(traj.times.tolist(), path, T,
                                        title=f"sample path, replicate {rep}")
            (out_dir / "plot_trajectory.svg").write_text(svg)
            return


# --- driver --------------------------------------------------------------------


_CSV_COLUMNS = {
    "trajectory": ["replicate", "T", "estimator", "marked", "attempts", "n_events",
                   "survived", "final_state", "time_avg_state"],
    "null-test": None,  # derived from config
}


def _csv_columns(config: ExperimentConfig, spec) -> list:
    if config.experiment == "trajectory":
        return _CSV_COLUMNS["trajectory"]
    theta_cols = ([f"b{i + 1}" for i in range(spec.K)]
                  + [f"beta{i + 1}" for i in range(spec.K)] + ["mu"])
    cols = ["replicate", "T", "estimator", "marked", "attempts", "n_events",
            *theta_cols, "converged", "iterations", "flags"]
    if config.experiment == "null-test":
        cols += ["Z", "W", "se", "p", "boundary"]
        cols += [f"reject_{level:g}" for level in config.levels]
    return cols


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(c, "")) for c in columns])


def read_rows_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row: dict = {}
            for key, val in raw.items():
                if key in ("replicate", "marked", "attempts", "n_events", "converged",
                           "iterations", "survived", "final_state", "boundary") \
                        or key.startswith("reject_"):
                    row[key] = int(val) if val != "" else ""
                elif key in ("estimator", "flags"):
                    row[key] = val
                else:
                    row[key] = float(val) if val != "" else ""
            rows.append(row)
    return rows


def default_jobs() -> int:
    env = os.environ.get("BDP_JOBS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def run_experiment(config: ExperimentConfig, out_dir, jobs: int | None = None) -> dict:
    """Execute the configured experiment; returns the summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec, theta0 = model_from_dict(config.model)
    if theta0 is None:
        raise ExperimentError("model must carry theta")
    jobs = default_jobs() if jobs is None else max(1, jobs)

    rows: list = []
    errors: list = []
    if config.experiment == "diagnostics":
        summary_stats = diagnostics_dict(spec, theta0)
        summary_stats.update(_info_diagnostics(spec, theta0))
        summary_stats.update(_rn_trace(config, spec, theta0))
        columns = ["replicate"]
    else:
        tasks = [(config.to_dict(), rep) for rep in range(config.replicates)]
        if jobs > 1 and config.replicates > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_one, tasks, chunksize=1))
        else:
            results = [_run_one(t) for t in tasks]
        results.sort(key=lambda r: r[0])
        for _, rep_rows, err in results:
            rows.extend(rep_rows)
            if err is not None:
                errors.append(err)
        budget_failures = sum(1 for e in errors if e["error"] == "RejectionBudgetError")
        if budget_failures > 0.5 * config.replicates:
            _write_errors(out_dir, errors)
            raise ExperimentError(
                f"rejection budget exhausted in {budget_failures}/{config.replicates} "
                "replicates: parameters look subcritical for this horizon")
        summary_stats = _summarize(config, rows, spec, theta0)
        columns = _csv_columns(config, spec)

    write_rows_csv(out_dir / "replicates.csv", columns, rows)
    summary = {"config": config.to_dict(), "stats": summary_stats,
               "errors_flagged": len(errors)}
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_errors(out_dir, errors)

    if config.experiment == "trajectory":
        _trajectory_plot(config, spec, theta0, out_dir)
    elif config.experiment in ("bias-naive", "consistency"):
        _scatter_plots(config, rows, spec, theta0, out_dir)
    elif config.experiment == "estimator-means":
        _means_plots(config, rows, spec, theta0, out_dir)
    elif config.experiment == "null-test":
        _nulltest_plot(config, rows, out_dir)
    return summary


def _write_errors(out_dir: Path, errors: list) -> None:
    with open(out_dir / "errors.jsonl", "w") as fh:
        for err in errors:
            fh.write(json.dumps(err, sort_keys=True) + "\n")


def _info_diagnostics(spec, theta0) -> dict:
    try:
        info = godambe(spec, theta0)
    except BdpError as exc:
        return {"information": {"error": type(exc).__name__, "message": str(exc)}}
    return {"information": {
        "fisher": info.fisher.tolist(),
        "J": info.J.tolist(),
        "H": info.H.tolist(),
        "godambe": info.G.tolist(),
    }}


def _rn_trace(config: ExperimentConfig, spec, theta0) -> dict:
    """Change-of-measure trace on one conditioned path at the first horizon."""
    T = config.horizons[0]
    try:
        traj, _ = simulate_survival_conditioned(
            spec, theta0, max(config.x0, 1), T, RngStream(config.base_seed, 0),
            max_attempts=config.max_attempts)
    except BdpError as exc:
        return {"rn_trace": {"error": type(exc).__name__, "message": str(exc)}}
    cache = SpectralCache(spec)
    ts = [T * i / 10 for i in range(10)]
    return {"rn_trace": {
        "T": T,
        "t": ts,
        "fixed_window": [rn_derivative(spec, theta0, traj, t, T, cache=cache) for t in ts],
        "full_window": rn_full_window(spec, theta0, traj, T, cache=cache),
    }}


def validate_outputs(out_dir) -> dict:
    """Recompute summary statistics from replicates.csv; assert equality.

    Returns the recomputed summary. Raises ExperimentError on mismatch, which
    would indicate hidden state not captured by the per-replicate CSV.
    """
    out_dir = Path(out_dir)
    with open(out_dir / "summary.json") as fh:
        stored = json.load(fh)
    config = ExperimentConfig.from_dict(stored["config"])
    spec, theta0 = model_from_dict(config.model)
    if config.experiment == "diagnostics":
        recomputed = diagnostics_dict(spec, theta0)
        recomputed.update(_info_diagnostics(spec, theta0))
        recomputed.update(_rn_trace(config, spec, theta0))
    else:
        rows = read_rows_csv(out_dir / "replicates.csv")
        recomputed = _summarize(config, rows, spec, theta0)
    stored_stats = json.loads(json.dumps(stored["stats"]))
    recomputed_stats = json.loads(json.dumps(recomputed))
    if stored_stats != recomputed_stats:
        raise ExperimentError("summary.json does not match statistics recomputed "
                              "from replicates.csv")
    return recomputed

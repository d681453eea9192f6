"""Command-line interface.

    bdp simulate    --config model.json [--sampler ...] [--seed S] [--out DIR]
    bdp fit         --config model.json --trajectory t.csv [--estimator ...]
    bdp test        --config model.json --trajectory t.csv --mechanism I
    bdp diagnostics --config model.json [--out DIR]
    bdp run         --config experiment.json [--jobs N] [--seed S] [--out DIR]
    bdp validate    --out DIR

Module errors surface as machine-readable JSON on stderr and a nonzero exit
code. BDP_JOBS provides the default for --jobs.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .asymptotics import (
    fisher_information,
    fisher_information_observed,
    standard_errors,
    wald_test,
)
from .errors import BdpError
from .experiments import ExperimentConfig, default_jobs, run_experiment, validate_outputs
from .inference import (
    fit_conditional_mle,
    fit_qmle,
    mle_marked_closed_form,
    mle_unconditional,
    sufficient_stats,
)
from .model import ParamVector, load_model, model_to_dict
from .simulate import (
    RngStream,
    load_trajectory,
    save_trajectory,
    simulate_original,
    simulate_q_process,
    simulate_survival_conditioned,
)
from .spectral import diagnostics_dict


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_theta(theta, what="this subcommand"):
    if theta is None:
        raise BdpError(f"model file must include theta for {what}")
    return theta


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    spec, theta = load_model(args.config)
    theta = _require_theta(theta, "simulation")
    out = _out_dir(args)
    stream = RngStream(args.seed, args.replicate)
    attempts = 1
    if args.sampler == "original":
        traj = simulate_original(spec, theta, args.x0, args.horizon, stream, mark=args.marked)
    elif args.sampler == "q-process":
        traj = simulate_q_process(spec, theta, max(args.x0, 1), args.horizon, stream,
                                  mark=args.marked)
    else:
        traj, attempts = simulate_survival_conditioned(
            spec, theta, args.x0, args.horizon, stream, mark=args.marked,
            max_attempts=args.max_attempts)
    meta = {
        "sampler": args.sampler,
        "seed": args.seed,
        "replicate": args.replicate,
        "attempts": attempts,
        "model": model_to_dict(spec, theta),
    }
    save_trajectory(traj, out / "trajectory.csv", meta=meta)
    print(str(out / "trajectory.csv"))
    return 0


def _fit_report(spec, stats, fit, se, info_kind) -> dict:
    scale = spec.scale_factors()
    return {
        "estimator": fit.kind,
        "theta": {"beta": fit.theta_hat.beta.tolist(), "mu": fit.theta_hat.mu},
        "b_scaled": (fit.theta_hat.beta * scale).tolist(),
        "space": fit.theta_hat.space,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "score_norm": fit.score_norm,
        "flags": list(fit.flags),
        "trace": list(fit.trace),
        "se": None if se is None else list(se),
        "info": info_kind,
        "T": stats.horizon,
    }


def load_fit_report(path) -> dict:
    with open(path) as fh:
        report = json.load(fh)
    for key in ("estimator", "theta", "converged", "flags", "se", "T"):
        if key not in report:
            raise BdpError(f"not a fit report: missing {key!r}")
    return report


def cmd_fit(args) -> int:
    spec, theta = load_model(args.config)
    traj, _ = load_trajectory(args.trajectory)
    stats = sufficient_stats(traj, spec)
    init = theta
    if args.estimator == "naive":
        fit = mle_unconditional(stats.unmarked(), spec, init=init)
        se, info_kind = None, None
    elif args.estimator == "marked-closed-form":
        fit = mle_marked_closed_form(stats, spec)
        se, info_kind = None, None
    elif args.estimator == "conditional-mle":
        fit = fit_conditional_mle(stats, spec, init=init, marked=args.marked)
        if args.population_info:
            I_hat = fisher_information(spec, fit.theta_hat)
            info_kind = "population-fisher"
        else:
            I_hat = fisher_information_observed(stats, spec, fit.theta_hat)
            info_kind = "observed-fisher"
        se = standard_errors(I_hat, stats.horizon)
    else:
        fit = fit_qmle(stats, spec, init=init, marked=args.marked)
        from .asymptotics import godambe

        info_kind = "population-godambe"
        se = standard_errors(godambe(spec, fit.theta_hat).G, stats.horizon)
    report = _fit_report(spec, stats, fit, se, info_kind)
    out = _out_dir(args)
    _write_json(out / "fit_report.json", report)
    print(str(out / "fit_report.json"))
    return 0


def cmd_test(args) -> int:
    spec, theta = load_model(args.config)
    traj, _ = load_trajectory(args.trajectory)
    stats = sufficient_stats(traj, spec)
    from .inference import default_init

    seed = default_init(stats, spec)
    init = ParamVector(seed.beta, seed.mu, args.mechanism)
    fit = fit_conditional_mle(stats, spec, init=init)
    if args.population_info:
        I_hat = fisher_information(spec, fit.theta_hat)
        info_kind = "population-fisher"
    else:
        I_hat = fisher_information_observed(stats, spec, fit.theta_hat)
        info_kind = "observed-fisher"
    wald = wald_test(fit, I_hat, stats.horizon, args.mechanism, levels=tuple(args.levels))
    report = {
        "mechanism": wald.mechanism,
        "Z": wald.Z,
        "W": wald.W,
        "se": wald.se,
        "p_one_sided": wald.p_one_sided,
        "reject_at": {f"{level:g}": bool(flag) for level, flag in wald.reject_at.items()},
        "boundary": wald.boundary,
        "info": info_kind,
        "theta": {"beta": fit.theta_hat.beta.tolist(), "mu": fit.theta_hat.mu},
        "T": stats.horizon,
    }
    out = _out_dir(args)
    _write_json(out / "test_report.json", report)
    print(str(out / "test_report.json"))
    return 0


def cmd_diagnostics(args) -> int:
    spec, theta = load_model(args.config)
    theta = _require_theta(theta, "diagnostics")
    payload = diagnostics_dict(spec, theta)
    from .experiments import _info_diagnostics

    payload.update(_info_diagnostics(spec, theta))
    if args.trajectory:
        from .asymptotics import rn_derivative, rn_full_window
        from .inference import SpectralCache

        traj, _ = load_trajectory(args.trajectory)
        cache = SpectralCache(spec)
        T = traj.horizon
        ts = [T * i / 10 for i in range(10)]
        payload["rn_trace"] = {
            "T": T,
            "t": ts,
            "fixed_window": [rn_derivative(spec, theta, traj, t, T, cache=cache) for t in ts],
            "full_window": rn_full_window(spec, theta, traj, T, cache=cache),
        }
    out = _out_dir(args)
    _write_json(out / "diagnostics.json", payload)
    print(str(out / "diagnostics.json"))
    return 0


def cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        data = config.to_dict()
        data["base_seed"] = args.seed
        config = ExperimentConfig.from_dict(data)
    run_experiment(config, args.out, jobs=args.jobs)
    print(str(Path(args.out) / "summary.json"))
    return 0


def cmd_validate(args) -> int:
    validate_outputs(args.out)
    print(f"ok: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bdp",
        description="Composite birth-death processes: simulation, survival-conditioned "
                    "inference, and batch experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate one trajectory")
    sim.add_argument("--config", required=True, help="model JSON (with theta)")
    sim.add_argument("--sampler", default="original",
                     choices=["original", "conditioned", "q-process"])
    sim.add_argument("--x0", type=int, default=1)
    sim.add_argument("-T", "--horizon", type=float, required=True)
    sim.add_argument("--marked", action="store_true")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--replicate", type=int, default=0)
    sim.add_argument("--max-attempts", type=int, default=1000)
    sim.add_argument("--out", default=".")
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit estimators to a trajectory file")
    fit.add_argument("--config", required=True, help="model JSON")
    fit.add_argument("--trajectory", required=True)
    fit.add_argument("--estimator", default="conditional-mle",
                     choices=["naive", "marked-closed-form", "conditional-mle", "qmle"])
    fit.add_argument("--marked", action="store_true")
    fit.add_argument("--population-info", action="store_true",
                     help="use the population information matrix for SEs")
    fit.add_argument("--out", default=".")
    fit.set_defaults(func=cmd_fit)

    tst = sub.add_parser("test", help="one-sided Wald test for a birth mechanism")
    tst.add_argument("--config", required=True)
    tst.add_argument("--trajectory", required=True)
    tst.add_argument("--mechanism", type=int, required=True,
                     help="1-based mechanism number under test")
    tst.add_argument("--levels", type=float, nargs="+", default=[0.01, 0.05, 0.10])
    tst.add_argument("--population-info", action="store_true")
    tst.add_argument("--out", default=".")
    tst.set_defaults(func=cmd_test)

    diag = sub.add_parser("diagnostics", help="dump spectral and information diagnostics")
    diag.add_argument("--config", required=True)
    diag.add_argument("--trajectory", default=None,
                      help="optional trajectory for a change-of-measure trace")
    diag.add_argument("--out", default=".")
    diag.set_defaults(func=cmd_diagnostics)

    run = sub.add_parser("run", help="run a batch experiment")
    run.add_argument("--config", required=True, help="experiment JSON")
    run.add_argument("--jobs", type=int, default=default_jobs())
    run.add_argument("--seed", type=int, default=None, help="override base_seed")
    run.add_argument("--out", required=True)
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="recheck summary.json against replicates.csv")
    val.add_argument("--out", required=True)
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BdpError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

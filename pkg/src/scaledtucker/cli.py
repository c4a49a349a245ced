"""Command-line interface.

Exit codes: 0 success, 1 solver divergence, 2 bad input or violated contract.
Every subcommand prints its resolved configuration (defaults included) to
stderr as one JSON line before doing any work.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, fileio, rng, solver
from .errors import TuckerError

log = logging.getLogger("scaledtucker")

EXIT_OK, EXIT_DIVERGED, EXIT_INPUT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _triple(text: str) -> tuple[int, int, int]:
    try:
        parts = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or three comma-separated integers, got {text!r}")
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return tuple(parts)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def _style(text: str):
    if text == "gaussian":
        return ("gaussian_core", None)
    if text.startswith("kappa:"):
        try:
            k = float(text.split(":", 1)[1])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad kappa in {text!r}")
        return ("prescribed_kappa", k)
    raise argparse.ArgumentTypeError(f"style must be 'gaussian' or 'kappa:<value>', got {text!r}")


def _solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--r", type=_triple, required=True, help="multilinear rank (int or r1,r2,r3)")
    p.add_argument("--eta", type=float, default=0.3, help="step size")
    p.add_argument("--alg", choices=("scaledgd", "gd"), default="scaledgd", help="update rule")
    p.add_argument("--max-iters", type=int, default=500, help="iteration budget")
    p.add_argument("--rel-tol", type=float, default=1e-3,
                   help="stop at this relative error (with --truth) or relative loss change (without)")
    p.add_argument("--truth", help="TNS3 ground truth, enables relative-error tracking")
    p.add_argument("--sigma-max", type=float, default=None, help="sigma_max for GD when no truth is given")
    p.add_argument("--traj", help="write the trajectory CSV here")
    p.add_argument("--out", help="write the final factors (TFQ1) here")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for trial-level parallelism")
    common.add_argument("--deterministic", action="store_true",
                        help="serial execution and zeroed timings, for byte-identical outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    fmt = argparse.ArgumentDefaultsHelpFormatter
    top = _Parser(prog="scaledtucker", description="Low-rank Tucker estimation by scaled gradient descent.",
                  formatter_class=fmt)
    top.add_argument("--version", action="version", version=__version__)
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-truth", parents=[common], formatter_class=fmt, help="generate a ground-truth tensor")
    p.add_argument("--n", type=_triple, required=True, help="dimensions (int or n1,n2,n3)")
    p.add_argument("--r", type=_triple, required=True, help="multilinear rank (int or r1,r2,r3)")
    p.add_argument("--style", type=_style, default="gaussian", help="'gaussian' or 'kappa:<value>'")
    p.add_argument("--seed", type=int, default=0, help="random seed (TUCKER_SEED overrides)")
    p.add_argument("--out", required=True, help="TNS3 output")
    p.add_argument("--factors-out", help="also write the factors as TFQ1")

    p = sub.add_parser("sample", parents=[common], formatter_class=fmt, help="sample noisy entries of a tensor")
    p.add_argument("--truth", required=True, help="TNS3 input")
    p.add_argument("--p", type=float, default=0.1, help="observation probability")
    p.add_argument("--snr-db", type=float, default=None, help="add Gaussian noise at this SNR")
    p.add_argument("--seed", type=int, default=0, help="random seed (TUCKER_SEED overrides)")
    p.add_argument("--out", required=True, help="OBS1 output")

    p = sub.add_parser("complete", parents=[common], formatter_class=fmt, help="tensor completion")
    p.add_argument("--obs", required=True, help="OBS1 observations")
    _solver_flags(p)
    p.add_argument("--init", choices=("spectral", "random"), default="spectral", help="initialization")
    p.add_argument("--init-seed", type=int, default=0, help="seed for random initialization")
    p.add_argument("--p-mode", choices=("given", "estimated"), default="given",
                   help="use the file's p or |Omega| / (n1 n2 n3)")
    p.add_argument("--projection-B", type=float, default=None, help="enable the scaled projection with this radius")

    p = sub.add_parser("regress", parents=[common], formatter_class=fmt, help="tensor regression")
    p.add_argument("--design", help="design descriptor JSON {m, dims, seed}")
    p.add_argument("--m", type=int, default=None, help="number of measurements (instead of --design)")
    p.add_argument("--design-seed", type=int, default=0, help="design seed when --m is used")
    p.add_argument("--y", help="YVC1 measurements; computed from --truth when absent")
    p.add_argument("--y-out", help="write the measurements used as YVC1")
    p.add_argument("--design-out", help="write the design descriptor used as JSON")
    _solver_flags(p)

    p = sub.add_parser("factorize", parents=[common], formatter_class=fmt, help="fit Tucker factors to a tensor")
    p.add_argument("--target", required=True, help="TNS3 tensor to factorize")
    _solver_flags(p)
    p.add_argument("--init-factors", help="TFQ1 initial factors (default: random)")
    p.add_argument("--init-seed", type=int, default=0, help="seed for random initialization")

    p = sub.add_parser("trip-probe", parents=[common], formatter_class=fmt,
                       help="estimate the restricted isometry constant of a Gaussian design")
    p.add_argument("--m", type=int, required=True, help="number of measurements")
    p.add_argument("--n", type=_triple, required=True, help="dimensions")
    p.add_argument("--r", type=_triple, required=True, help="multilinear rank")
    p.add_argument("--trials", type=int, default=100, help="random test tensors")
    p.add_argument("--seed", type=int, default=0, help="seed of the design and the test tensors")

    p = sub.add_parser("experiment", parents=[common], formatter_class=fmt, help="run an experiment sweep")
    p.add_argument("--config", help="JSON file with ExperimentConfig fields")
    p.add_argument("--kind", choices=("kappa_sweep", "phase_transition", "convergence"), default=None,
                   help="experiment type (required unless given in --config)")
    p.add_argument("--n", type=int, default=None, help="dimension")
    p.add_argument("--r", type=int, default=None, help="rank")
    p.add_argument("--p", type=float, default=None, help="observation probability")
    p.add_argument("--p-list", type=_floats, default=None, help="comma-separated probabilities")
    p.add_argument("--kappa-list", type=_floats, default=None, help="comma-separated condition numbers")
    p.add_argument("--snr-db", type=_floats, default=None, help="comma-separated SNR levels")
    p.add_argument("--seeds", type=int, default=None, help="use seeds 0..N-1")
    p.add_argument("--max-iters", type=int, default=None, help="iteration budget per run")
    p.add_argument("--eta", type=float, default=None, help="step size")
    p.add_argument("--init", choices=("spectral", "random"), default=None, help="initialization")
    p.add_argument("--algorithms", default=None, help="comma-separated subset of scaledgd,gd")
    p.add_argument("--out", required=True, help="output path stem (.csv and .json are written)")
    return top


def _write_run_outputs(args, traj) -> int:
    if args.traj:
        fileio.write_text(args.traj, traj.to_csv())
    if args.out and traj.final is not None:
        fileio.write_tfq1(args.out, traj.final)
    last = traj.iterations[-1]
    summary = {"stop_reason": traj.stop_reason, "iterations": last.iter, "loss": last.loss}
    if np.isfinite(last.rel_err):
        summary["rel_err"] = last.rel_err
    print(json.dumps(summary))
    return EXIT_DIVERGED if traj.stop_reason == "diverged" else EXIT_OK


def _load_truth(path, r):
    from .factors import ground_truth_from_tensor

    if path is None:
        return None
    return ground_truth_from_tensor(fileio.read_tns3(path), r)


def _cmd_gen_truth(a) -> int:
    from .factors import make_ground_truth

    style, kappa = a.style
    G = make_ground_truth(a.n, a.r, style, a.seed, kappa=kappa)
    fileio.write_tns3(a.out, G.tensor)
    if a.factors_out:
        fileio.write_tfq1(a.factors_out, G.factors)
    print(json.dumps({"sigma_max": G.sigma_max, "sigma_min": G.sigma_min, "kappa": G.sigma.kappa, "mu": G.mu}))
    return EXIT_OK


def _cmd_sample(a) -> int:
    from .completion import observe, sample_mask, snr_to_noise_sigma

    X = fileio.read_tns3(a.truth)
    noise = snr_to_noise_sigma(a.snr_db, X) if a.snr_db is not None else 0.0
    obs = observe(X, sample_mask(X.shape, a.p, a.seed), noise, a.seed)
    fileio.write_obs1(a.out, obs.dims, obs.p, obs.indices, obs.values)
    print(json.dumps({"count": obs.count, "noise_sigma": noise}))
    return EXIT_OK


def _cmd_complete(a) -> int:
    from .completion import CompletionParams, ObservationSet, solve_completion

    dims, p, idx, vals = fileio.read_obs1(a.obs)
    obs = ObservationSet(dims, idx, vals, p)
    params = CompletionParams(eta=a.eta, max_iters=a.max_iters, rel_tol=a.rel_tol,
                              use_projection=a.projection_B is not None, projection_B=a.projection_B,
                              p_mode=a.p_mode, init=a.init, init_seed=a.init_seed)
    traj = solve_completion(obs, a.r, params, _load_truth(a.truth, a.r), a.alg, a.sigma_max)
    return _write_run_outputs(a, traj)


def _cmd_regress(a) -> int:
    from .regression import GaussianDesign, solve_regression

    if a.design:
        design = GaussianDesign.from_json(fileio.read_json(a.design))
    elif a.m is not None:
        if not a.truth:
            raise ValueError("--m without --design needs --truth to define the dimensions")
        design = None
    else:
        raise ValueError("give either --design or --m")
    truth = _load_truth(a.truth, a.r)
    if design is None:
        design = GaussianDesign(a.m, truth.dims, a.design_seed)
    if a.y:
        y = fileio.read_yvc1(a.y)
    elif truth is not None:
        y = design.forward(truth.tensor)
    else:
        raise ValueError("give --y or --truth")
    if a.y_out:
        fileio.write_yvc1(a.y_out, y)
    if a.design_out:
        fileio.write_json(a.design_out, design.to_json())
    params = solver.SolverParams(eta=a.eta, max_iters=a.max_iters, rel_tol=a.rel_tol)
    traj = solve_regression(design, y, a.r, params, truth, a.alg, sigma_max=a.sigma_max)
    return _write_run_outputs(a, traj)


def _cmd_factorize(a) -> int:
    from .factors import random_factors
    from .tensor_core import check_rank, fro_norm, sigma_extremes

    X = fileio.read_tns3(a.target)
    r = check_rank(X.shape, a.r)
    if a.init_factors:
        F0 = fileio.read_tfq1(a.init_factors)
    else:
        F0 = random_factors(X.shape, r, a.init_seed, fro_norm(X) / np.sqrt(np.prod(r)))
    params = solver.SolverParams(eta=a.eta, max_iters=a.max_iters, rel_tol=a.rel_tol)
    smax = a.sigma_max if a.sigma_max is not None else sigma_extremes(X, r).sigma_max
    step = solver.make_stepper(a.alg, smax)
    rel = solver.relative_error_fn(X)
    traj = solver.run_iterations(F0, solver._factorization_oracle(X), step, params, rel)
    return _write_run_outputs(a, traj)


def _cmd_trip(a) -> int:
    from .regression import GaussianDesign, trip_probe

    est = trip_probe(GaussianDesign(a.m, a.n, a.seed), a.r, a.trials, a.seed)
    print(json.dumps({"delta_hat": est.delta_hat, "trials": est.trials, "r": list(est.r),
                      "worst_ratio_low": est.worst_ratio_low, "worst_ratio_high": est.worst_ratio_high}))
    return EXIT_OK


def _cmd_experiment(a) -> int:
    from .experiments import ExperimentConfig, run_experiment

    d = fileio.read_json(a.config) if a.config else {}
    overrides = {"kind": a.kind, "n": a.n, "r": a.r, "p": a.p, "p_list": a.p_list, "kappa_list": a.kappa_list,
                 "snr_db": a.snr_db, "max_iters": a.max_iters, "eta": a.eta, "init": a.init}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if a.seeds is not None:
        d["seeds"] = list(range(a.seeds))
    if a.algorithms:
        d["algorithms"] = a.algorithms.split(",")
    if "kind" not in d:
        raise ValueError("experiment kind missing (--kind or config)")
    d["threads"] = 1 if a.deterministic else a.threads
    d["output_path"] = a.out
    cfg = ExperimentConfig.from_json(d)
    print(json.dumps({"experiment": cfg.to_json(), "config_hash": cfg.config_hash}), file=sys.stderr)
    table, _ = run_experiment(cfg)
    for row in table:
        print(json.dumps(row))
    return EXIT_OK


_COMMANDS = {
    "gen-truth": _cmd_gen_truth,
    "sample": _cmd_sample,
    "complete": _cmd_complete,
    "regress": _cmd_regress,
    "factorize": _cmd_factorize,
    "trip-probe": _cmd_trip,
    "experiment": _cmd_experiment,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "seed"):
            args.seed = rng.resolve_seed(args.seed)
    except ValueError:
        print(f"error: TUCKER_SEED must be an integer, got {os.environ.get('TUCKER_SEED')!r}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps({"resolved": vars(args)}, default=str), file=sys.stderr)
    solver.use_wall_clock(not args.deterministic)
    try:
        return _COMMANDS[args.command](args)
    except (TuckerError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        solver.use_wall_clock(True)


def main() -> None:
    sys.exit(dispatch())

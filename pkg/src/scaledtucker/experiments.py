"""Desk-scale reproductions of the numerical studies on tensor completion:
condition-number sweeps, phase transitions and convergence curves (with
random initialization or additive noise)."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, fileio
from .completion import CompletionParams, observe, sample_mask, snr_to_noise_sigma, solve_completion
from .errors import ParameterError, TuckerError
from .factors import make_ground_truth

__all__ = [
    "ExperimentConfig",
    "RunRecord",
    "run_trial",
    "run_kappa_sweep",
    "run_phase_transition",
    "run_convergence",
    "noise_summary",
    "ms_per_iteration",
    "run_experiment",
    "write_outputs",
]

log = logging.getLogger(__name__)

SUCCESS_TOL = 1e-3
KINDS = ("kappa_sweep", "phase_transition", "convergence")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    n: int = 100
    r: int = 5
    p: float = 0.1
    p_list: tuple = (0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.3)
    kappa_list: tuple = (1.0, 2.0, 5.0, 10.0)
    eta: float = 0.3
    max_iters: int = 200
    seeds: tuple = tuple(range(10))
    init: str = "spectral"
    snr_db: tuple | None = None
    algorithms: tuple = ("scaledgd", "gd")
    rel_tol: float = SUCCESS_TOL
    threads: int = 1
    output_path: str | None = None

    def __post_init__(self):
        for name in ("p_list", "kappa_list", "seeds", "algorithms"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.snr_db is not None:
            snr = self.snr_db if np.ndim(self.snr_db) else (self.snr_db,)
            object.__setattr__(self, "snr_db", tuple(float(s) for s in snr))
        if self.kind not in KINDS:
            raise ParameterError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.seeds:
            raise ParameterError("seeds must be non-empty")
        if any(k < 1 for k in self.kappa_list):
            raise ParameterError("kappa values must be >= 1")
        if self.init not in ("spectral", "random"):
            raise ParameterError(f"init must be 'spectral' or 'random', got {self.init!r}")
        for a in self.algorithms:
            if a not in ("scaledgd", "gd"):
                raise ParameterError(f"unknown algorithm {a!r}")
        if self.threads < 1:
            raise ParameterError("threads must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("output_path")
        d.pop("threads")
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    algorithm: str
    kappa: float | None
    seed: int
    p: float
    snr_db: float | None = None
    iterations: list = field(default_factory=list)  # (iter, rel_err, wall_ms)
    iters_to_tol: int = -1  # -1 when the tolerance was never reached
    success: bool = False
    final_rel_err: float = math.nan
    stop_reason: str = ""

    def rel_errors(self) -> np.ndarray:
        return np.array([it[1] for it in self.iterations])


def run_trial(cfg: ExperimentConfig, alg: str, seed: int, *, kappa: float | None = None, p: float | None = None,
              snr_db: float | None = None, rel_tol: float | None = None) -> RunRecord:
    """One completion run. Solver failures become unsuccessful records."""
    p = cfg.p if p is None else p
    rel_tol = cfg.rel_tol if rel_tol is None else rel_tol
    rec = RunRecord(cfg.config_hash, alg, kappa, int(seed), float(p), snr_db)
    try:
        if kappa is None:
            G = make_ground_truth(cfg.n, cfg.r, "gaussian_core", seed)
        else:
            G = make_ground_truth(cfg.n, cfg.r, "prescribed_kappa", seed, kappa=kappa)
        noise = snr_to_noise_sigma(snr_db, G.tensor) if snr_db is not None else 0.0
        obs = observe(G.tensor, sample_mask(G.dims, p, seed), noise, seed)
        params = CompletionParams(eta=cfg.eta, max_iters=cfg.max_iters, rel_tol=rel_tol, init=cfg.init,
                                  init_seed=seed)
        traj = solve_completion(obs, cfg.r, params, G, alg)
    except (TuckerError, np.linalg.LinAlgError, FloatingPointError) as exc:
        rec.stop_reason = f"error: {type(exc).__name__}: {exc}"
        return rec
    rec.iterations = [(it.iter, it.rel_err, it.wall_ms) for it in traj.iterations]
    rec.final_rel_err = traj.iterations[-1].rel_err
    hit = traj.iters_to(SUCCESS_TOL)
    rec.iters_to_tol = -1 if hit is None else hit
    rec.success = rec.final_rel_err <= SUCCESS_TOL
    rec.stop_reason = traj.stop_reason
    return rec


def _map(cfg: ExperimentConfig, jobs):
    """Run ``jobs`` (callables) on ``cfg.threads`` threads, results in job order."""
    if cfg.threads == 1:
        return [j() for j in jobs]
    with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
        return list(ex.map(lambda j: j(), jobs))


def _censored_median(counts, cap: int) -> tuple[float, bool]:
    """Median with failures counted as ``cap + 1``; the flag tells whether the
    median itself is censored (then it is only a lower bound)."""
    vals = np.array([c if c >= 0 else cap + 1 for c in counts], dtype=float)
    med = float(np.median(vals))
    return med, bool(med > cap)


def ms_per_iteration(rec: RunRecord) -> float:
    """Mean wall time of one update plus gradient evaluation; the warmup
    evaluation at the initial point is excluded."""
    if len(rec.iterations) < 2:
        return math.nan
    (i0, _, w0), (i1, _, w1) = rec.iterations[0], rec.iterations[-1]
    return (w1 - w0) / (i1 - i0)


def run_kappa_sweep(cfg: ExperimentConfig):
    """Median iterations to relative error 1e-3 per (kappa, algorithm)."""
    if cfg.kind != "kappa_sweep":
        raise ParameterError("run_kappa_sweep needs kind='kappa_sweep'")
    keys = [(alg, k, s) for alg in cfg.algorithms for k in cfg.kappa_list for s in cfg.seeds]
    records = _map(cfg, [lambda a=a, k=k, s=s: run_trial(cfg, a, s, kappa=k) for a, k, s in keys])
    table = []
    for alg in cfg.algorithms:
        for k in cfg.kappa_list:
            recs = [r for r in records if r.algorithm == alg and r.kappa == k]
            med, censored = _censored_median([r.iters_to_tol for r in recs], cfg.max_iters)
            table.append({"kappa": k, "algorithm": alg, "median_iters": med, "censored": censored,
                          "successes": sum(r.success for r in recs), "runs": len(recs)})
    return table, records


def run_phase_transition(cfg: ExperimentConfig):
    """Success rate (relative error <= 1e-3 at the end) per sampling rate."""
    if cfg.kind != "phase_transition":
        raise ParameterError("run_phase_transition needs kind='phase_transition'")
    alg = cfg.algorithms[0]
    keys = [(p, s) for p in cfg.p_list for s in cfg.seeds]
    records = _map(cfg, [lambda p=p, s=s: run_trial(cfg, alg, s, p=p) for p, s in keys])
    table = []
    for p in cfg.p_list:
        recs = [r for r in records if r.p == p]
        table.append({"n": cfg.n, "p": p, "scaled_sample_size": p * cfg.n ** 1.5 / cfg.r,
                      "success_rate": sum(r.success for r in recs) / len(recs), "trials": len(recs)})
    return table, records


def run_convergence(cfg: ExperimentConfig):
    """Per-iteration error curves for every (algorithm, kappa or SNR, seed).

    With ``snr_db`` set the truth has a Gaussian core and runs use the full
    iteration budget (``rel_tol`` is ignored) so that the noise floor is visible.
    """
    if cfg.kind != "convergence":
        raise ParameterError("run_convergence needs kind='convergence'")
    jobs = []
    if cfg.snr_db is not None:
        for alg in cfg.algorithms:
            for snr in cfg.snr_db:
                for s in cfg.seeds:
                    jobs.append(lambda a=alg, q=snr, s=s: run_trial(cfg, a, s, snr_db=q, rel_tol=0.0))
    else:
        for alg in cfg.algorithms:
            for k in cfg.kappa_list:
                for s in cfg.seeds:
                    jobs.append(lambda a=alg, k=k, s=s: run_trial(cfg, a, s, kappa=k))
    return _map(cfg, jobs)


def noise_summary(records, tail: int = 10, factor: float = 1.5):
    """Plateau error and iteration counts per (algorithm, SNR).

    ``plateau`` is the median error over the last ``tail`` iterations.
    ``iters_to_own`` is the first iteration within ``factor`` of the run's own
    plateau; ``iters_to_common`` the first iteration within ``factor`` of the
    largest plateau among all SNR levels of the same algorithm and seed.
    Values are medians over seeds.
    """
    out = []
    groups = {}
    for r in records:
        groups.setdefault((r.algorithm, r.seed), []).append(r)
    per = []
    for (alg, seed), recs in groups.items():
        plateaus = {r.snr_db: float(np.median(r.rel_errors()[-tail:])) for r in recs}
        worst = max(plateaus.values())
        for r in recs:
            e = r.rel_errors()
            own = int(np.argmax(e <= factor * plateaus[r.snr_db]))
            common = int(np.argmax(e <= factor * worst))
            per.append((alg, r.snr_db, plateaus[r.snr_db], own, common))
    for alg in sorted({x[0] for x in per}):
        for snr in sorted({x[1] for x in per if x[0] == alg}):
            rows = [x for x in per if x[0] == alg and x[1] == snr]
            out.append({"algorithm": alg, "snr_db": snr,
                        "plateau": float(np.median([x[2] for x in rows])),
                        "iters_to_own": float(np.median([x[3] for x in rows])),
                        "iters_to_common": float(np.median([x[4] for x in rows]))})
    return out


# --------------------------------------------------------------------------
# outputs


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row[k] for k in header})
    return buf.getvalue()


def _curve_rows(records):
    for r in records:
        for it, err, ms in r.iterations:
            yield {"algorithm": r.algorithm, "kappa": r.kappa, "snr_db": r.snr_db, "p": r.p, "seed": r.seed,
                   "iter": it, "rel_err": repr(err), "wall_ms": f"{ms:.3f}"}


def write_outputs(cfg: ExperimentConfig, table, records, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.json``; the JSON holds the config, its
    hash, the library version and the summary table."""
    base = Path(path)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    if cfg.kind == "convergence":
        header = ["algorithm", "kappa", "snr_db", "p", "seed", "iter", "rel_err", "wall_ms"]
        fileio.write_text(csv_path, _csv(_curve_rows(records), header))
    else:
        fileio.write_text(csv_path, _csv(table, list(table[0].keys())))
    failures = [{"algorithm": r.algorithm, "kappa": r.kappa, "p": r.p, "seed": r.seed, "reason": r.stop_reason}
                for r in records if r.stop_reason.startswith("error")]
    summary = {"config": cfg.to_json(), "config_hash": cfg.config_hash, "version": __version__,
               "table": table, "failures": failures}
    fileio.write_json(json_path, summary)
    return csv_path, json_path


def run_experiment(cfg: ExperimentConfig):
    """Dispatch on ``cfg.kind``; returns ``(table, records)`` and writes outputs
    when ``cfg.output_path`` is set."""
    if cfg.kind == "kappa_sweep":
        table, records = run_kappa_sweep(cfg)
    elif cfg.kind == "phase_transition":
        table, records = run_phase_transition(cfg)
    else:
        records = run_convergence(cfg)
        if cfg.snr_db is not None:
            table = noise_summary(records)
        else:
            table = []
            for alg in cfg.algorithms:
                for k in cfg.kappa_list:
                    recs = [r for r in records if r.algorithm == alg and r.kappa == k]
                    med, cens = _censored_median([r.iters_to_tol for r in recs], cfg.max_iters)
                    per_iter = [ms_per_iteration(r) for r in recs]
                    per_iter = [v for v in per_iter if np.isfinite(v)]
                    table.append({"algorithm": alg, "kappa": k, "median_iters": med, "censored": cens,
                                  "ms_per_iter": float(np.median(per_iter)) if per_iter else math.nan})
    if cfg.output_path:
        write_outputs(cfg, table, records, cfg.output_path)
    return table, records

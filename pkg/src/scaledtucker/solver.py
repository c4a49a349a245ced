"""ScaledGD and plain GD steps over a gradient oracle, the shared iteration
loop, and the tensor factorization solver."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import DimensionError, IllConditionedIterate, ParameterError
from .factors import FactorQuad, GroundTruth, PrecondState, factor_grams, reconstruct, scaled_projection
from .tensor_core import as_tensor3, fro_norm, matricize, mode_product, multilinear_multiply, tensorize

__all__ = [
    "GradientBundle",
    "SolverParams",
    "IterRecord",
    "Trajectory",
    "scaled_step",
    "plain_step",
    "gradients_from_residual",
    "factorization_loss",
    "factorization_gradients",
    "make_stepper",
    "run_iterations",
    "run_factorization",
    "relative_error_fn",
    "factored_relative_error_fn",
]

ALGORITHMS = ("scaledgd", "gd")

_clock = time.perf_counter


def use_wall_clock(enabled: bool = True) -> None:
    """Switch trajectory timing off (all ``wall_ms`` zero) for reproducible output files."""
    global _clock
    _clock = time.perf_counter if enabled else (lambda: 0.0)

DIVERGENCE_FACTOR = 1e6
PLATEAU_WINDOW = 5


@dataclass(frozen=True)
class GradientBundle:
    grad_U: np.ndarray
    grad_V: np.ndarray
    grad_W: np.ndarray
    grad_S: np.ndarray

    @property
    def parts(self):
        return (self.grad_U, self.grad_V, self.grad_W, self.grad_S)

    def check_against(self, F: FactorQuad) -> None:
        for g, a, name in zip(self.parts, (F.U, F.V, F.W, F.S), "UVWS"):
            if g.shape != a.shape:
                raise DimensionError(f"grad_{name} has shape {g.shape}, expected {a.shape}")

    def inner(self, D: FactorQuad) -> float:
        """``<g, D>`` summed over all four blocks."""
        return float(sum(np.vdot(g, d) for g, d in zip(self.parts, (D.U, D.V, D.W, D.S))))


# --------------------------------------------------------------------------
# steps


def _right_solve_spd(M: np.ndarray, G: np.ndarray, mode: int, which: str) -> np.ndarray:
    """``M G^{-1}`` for symmetric positive definite ``G``, by Cholesky.

    A failed factorization is retried once with ``1e-12 trace(G) / r`` added to
    the diagonal before giving up.
    """
    r = G.shape[0]
    tr = float(np.trace(G))
    if not np.isfinite(tr) or tr <= 0.0:
        raise IllConditionedIterate(mode, which)
    for attempt in range(2):
        try:
            c = scipy.linalg.cho_factor(G, lower=True)
            return scipy.linalg.cho_solve(c, M.T).T
        except np.linalg.LinAlgError:
            G = G + (1e-12 * tr / r) * np.eye(r)
    raise IllConditionedIterate(mode, which)


def scaled_step(F: FactorQuad, g: GradientBundle, eta: float, grams: PrecondState | None = None) -> FactorQuad:
    """One ScaledGD update; each factor gradient is right-preconditioned by the
    inverse Gram of its breve co-factor, the core gradient by the inverse factor Grams."""
    g.check_against(F)
    grams = grams or factor_grams(F)
    new = []
    for k, (A, gA, Gb) in enumerate(zip(F.factors, g.parts[:3], grams.breve)):
        new.append(A - eta * _right_solve_spd(gA, Gb, k + 1, "breve"))
    dS = g.grad_S
    for k, Gk in enumerate(grams.plain):
        # apply Gk^{-1} to every mode-k fiber
        M = _right_solve_spd(matricize(dS, k + 1).T, Gk, k + 1, "factor").T
        dS = tensorize(M, dS.shape, k + 1)
    return FactorQuad(*new, F.S - eta * dS)


def plain_step(F: FactorQuad, g: GradientBundle, eta: float, sigma_max: float) -> FactorQuad:
    """Vanilla GD with factor step ``eta / sigma_max^2`` and core step ``eta``."""
    if not sigma_max > 0:
        raise ParameterError(f"sigma_max must be positive, got {sigma_max}")
    g.check_against(F)
    a = eta / sigma_max ** 2
    return FactorQuad(F.U - a * g.grad_U, F.V - a * g.grad_V, F.W - a * g.grad_W, F.S - eta * g.grad_S)


def make_stepper(alg: str, sigma_max: float | None = None) -> Callable:
    if alg == "scaledgd":
        return scaled_step
    if alg == "gd":
        if sigma_max is None:
            raise ParameterError("the GD baseline needs sigma_max of the ground truth")
        return lambda F, g, eta: plain_step(F, g, eta, sigma_max)
    raise ParameterError(f"unknown algorithm {alg!r}; choose from {ALGORITHMS}")


# --------------------------------------------------------------------------
# gradients


def gradients_from_residual(F: FactorQuad, E: np.ndarray, scale: float = 1.0) -> GradientBundle:
    """Gradients of ``scale/2 ||(U,V,W).S - T||^2`` given the residual tensor ``E``.

    ``grad_U = M1(E) breve_U`` is evaluated as ``M1((I, V^T, W^T) . E) M1(S)^T``.
    """
    E = as_tensor3(E)
    if E.shape != F.dims:
        raise DimensionError(f"residual shape {E.shape} does not match factor dims {F.dims}")
    U, V, W, S = F.U, F.V, F.W, F.S
    EV = mode_product(E, V.T, 2)  # n1 x r2 x n3
    EVW = mode_product(EV, W.T, 3)  # n1 x r2 x r3
    EU = mode_product(E, U.T, 1)  # r1 x n2 x n3
    EUW = mode_product(EU, W.T, 3)  # r1 x n2 x r3
    EUV = mode_product(EU, V.T, 2)  # r1 x r2 x n3
    gU = matricize(EVW, 1) @ matricize(S, 1).T
    gV = matricize(EUW, 2) @ matricize(S, 2).T
    gW = matricize(EUV, 3) @ matricize(S, 3).T
    gS = mode_product(EUV, W.T, 3)
    if scale != 1.0:
        gU, gV, gW, gS = (scale * x for x in (gU, gV, gW, gS))
    return GradientBundle(gU, gV, gW, gS)


def factorization_loss(F: FactorQuad, X_target: np.ndarray) -> float:
    return 0.5 * fro_norm(reconstruct(F) - X_target) ** 2


def factorization_gradients(F: FactorQuad, X_target: np.ndarray) -> GradientBundle:
    X_target = as_tensor3(X_target)
    if X_target.shape != F.dims:
        raise DimensionError(f"target shape {X_target.shape} does not match factor dims {F.dims}")
    return gradients_from_residual(F, reconstruct(F) - X_target)


def _factorization_oracle(X_target: np.ndarray):
    def oracle(F):
        E = reconstruct(F) - X_target
        return 0.5 * float(np.vdot(E, E)), gradients_from_residual(F, E)

    return oracle


# --------------------------------------------------------------------------
# iteration loop


@dataclass(frozen=True)
class SolverParams:
    eta: float = 0.3
    max_iters: int = 500
    rel_tol: float = 1e-3
    use_projection: bool = False
    projection_B: float | None = None
    record_every: int = 1

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ParameterError(f"eta must lie in (0, 1], got {self.eta}")
        if int(self.max_iters) < 1:
            raise ParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.rel_tol >= 0:
            raise ParameterError(f"rel_tol must be >= 0, got {self.rel_tol}")
        if int(self.record_every) < 1:
            raise ParameterError("record_every must be >= 1")
        if self.use_projection and not (self.projection_B and self.projection_B > 0):
            raise ParameterError("projection needs a positive radius projection_B")

    def with_(self, **kw) -> "SolverParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class IterRecord:
    iter: int
    loss: float
    rel_err: float  # nan when no ground truth is available
    wall_ms: float


@dataclass
class Trajectory:
    iterations: list = field(default_factory=list)
    final: FactorQuad | None = None
    converged: bool = False
    stop_reason: str = "max_iters"  # tol | max_iters | diverged

    def rel_errors(self) -> np.ndarray:
        return np.array([r.rel_err for r in self.iterations])

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.iterations])

    def iters_to(self, tol: float) -> int | None:
        """First recorded iteration whose relative error is at most ``tol``."""
        for r in self.iterations:
            if r.rel_err <= tol:
                return r.iter
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "loss", "rel_err", "wall_ms"])
        for r in self.iterations:
            w.writerow([r.iter, repr(r.loss), repr(r.rel_err), f"{r.wall_ms:.3f}"])
        return buf.getvalue()


def relative_error_fn(X_star: np.ndarray) -> Callable[[FactorQuad], float]:
    nrm = fro_norm(X_star)

    def rel(F):
        return fro_norm(reconstruct(F) - X_star) / nrm

    return rel


def factored_relative_error_fn(G: GroundTruth, dense_below: float = 1e-5) -> Callable[[FactorQuad], float]:
    """Relative error against ``G`` evaluated from the factors in O(n r^2 + r^4).

    Uses ``||X - X*||^2 = ||X||^2 - 2 <X, X*> + ||X*||^2``; values below
    ``dense_below`` are recomputed densely since the expansion loses digits there.
    """
    Us, Vs, Ws, Ss = G.factors.U, G.factors.V, G.factors.W, G.factors.S
    n2 = float(np.vdot(Ss, Ss))  # orthonormal factors preserve the norm
    dense = None

    def rel(F):
        nonlocal dense
        self_sq = float(np.vdot(F.S, multilinear_multiply(F.U.T @ F.U, F.V.T @ F.V, F.W.T @ F.W, F.S)))
        cross = float(np.vdot(multilinear_multiply(Us.T @ F.U, Vs.T @ F.V, Ws.T @ F.W, F.S), Ss))
        val = math.sqrt(max(self_sq - 2 * cross + n2, 0.0) / n2)
        if val < dense_below:
            if dense is None:
                dense = relative_error_fn(G.tensor if G.tensor is not None else reconstruct(G.factors))
            val = dense(F)
        return val

    return rel


def run_iterations(F0: FactorQuad, oracle: Callable, step: Callable, params: SolverParams,
                   rel_err: Callable | None = None, clock: Callable | None = None) -> Trajectory:
    """Iterate ``F <- step(F, grad, eta)`` with an optional scaled projection.

    ``oracle(F)`` returns ``(loss, GradientBundle)``. With ``rel_err`` the run
    stops once the relative error reaches ``params.rel_tol``; without it, once
    the relative loss change over the last five iterations drops below
    ``rel_tol``. A non-finite loss or growth by 1e6 over the initial loss
    marks the run as diverged. ``wall_ms`` counts oracle and step time only.
    """
    if not F0.is_finite():
        raise ParameterError("initial factors contain non-finite entries")
    clock = clock or _clock
    traj = Trajectory()
    F = F0
    loss0 = None
    elapsed = 0.0
    history: list[float] = []
    for t in range(params.max_iters + 1):
        t0 = clock()
        loss, g = oracle(F)
        elapsed += clock() - t0
        err = rel_err(F) if rel_err is not None else math.nan
        if loss0 is None:
            loss0 = loss
        history.append(loss)
        diverged = not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * max(loss0, np.finfo(float).tiny)
        if rel_err is not None:
            done = err <= params.rel_tol
        else:
            done = loss == 0.0 or (
                len(history) > PLATEAU_WINDOW
                and abs(history[-1 - PLATEAU_WINDOW] - loss) <= params.rel_tol * history[-1 - PLATEAU_WINDOW]
            )
        last = diverged or done or t == params.max_iters
        if t % params.record_every == 0 or last:
            traj.iterations.append(IterRecord(t, float(loss), float(err), 1e3 * elapsed))
        if diverged:
            traj.stop_reason = "diverged"
            break
        if done:
            traj.stop_reason, traj.converged = "tol", True
            break
        if t == params.max_iters:
            break
        t0 = clock()
        F = step(F, g, params.eta)
        if params.use_projection:
            F = scaled_projection(F, params.projection_B)
        elapsed += clock() - t0
    traj.final = F
    return traj


def run_factorization(G: GroundTruth, F0: FactorQuad, params: SolverParams, alg: str = "scaledgd") -> Trajectory:
    """Fit ``reconstruct(G)`` from ``F0`` by ScaledGD (or the GD baseline)."""
    X = G.tensor if G.tensor is not None else reconstruct(G.factors)
    if F0.dims != X.shape:
        raise DimensionError(f"initial factors have dims {F0.dims}, truth has {X.shape}")
    step = make_stepper(alg, G.sigma_max)
    return run_iterations(F0, _factorization_oracle(X), step, params, relative_error_fn(X))

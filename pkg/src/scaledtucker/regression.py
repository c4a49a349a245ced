"""Tensor regression with a Gaussian design.

Measurement ``i`` is ``y_i = <A_i, X>`` with ``A_i`` having i.i.d. ``N(0, 1/m)``
entries. ``A_i`` is never stored: its vectorization is cut into blocks of
``block`` entries and block ``b`` is drawn from the stream keyed
``(seed, "design", i, b)``, so any pass over the design regenerates exactly
the same numbers regardless of how measurements are batched.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import DimensionError, ParameterError
from .factors import FactorQuad, GroundTruth, reconstruct
from .solver import (
    GradientBundle,
    SolverParams,
    Trajectory,
    factored_relative_error_fn,
    gradients_from_residual,
    make_stepper,
    relative_error_fn,
    run_iterations,
)
from .tensor_core import as_tensor3, check_rank, hosvd, sigma_extremes, unvec, vec

__all__ = [
    "GaussianDesign",
    "IdentityDesign",
    "TripEstimate",
    "forward",
    "adjoint",
    "regression_loss",
    "regression_gradients",
    "spectral_init_regression",
    "solve_regression",
    "solve_regression_gd",
    "trip_probe",
]

DEFAULT_BLOCK = 4096
# rows of the design materialized at once, in entries
CHUNK_ENTRIES = 1 << 20


class GaussianDesign:
    """Seeded streaming description of ``m`` Gaussian measurement tensors."""

    def __init__(self, m: int, dims, seed: int = 0, block: int = DEFAULT_BLOCK):
        self.m = int(m)
        self.dims = tuple(int(d) for d in dims)
        self.seed = int(seed)
        self.block = int(block)
        if self.m < 1:
            raise ParameterError(f"m must be >= 1, got {m}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise DimensionError(f"invalid dims {self.dims}")
        if self.block < 1:
            raise ParameterError("block must be >= 1")
        self.size = int(np.prod(self.dims))
        self._scale = 1.0 / math.sqrt(self.m)

    def __repr__(self):
        return f"GaussianDesign(m={self.m}, dims={self.dims}, seed={self.seed})"

    def to_json(self) -> dict:
        return {"m": self.m, "dims": list(self.dims), "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "GaussianDesign":
        try:
            return cls(d["m"], d["dims"], d["seed"])
        except KeyError as exc:
            raise ParameterError(f"design descriptor lacks field {exc}") from exc

    def _row(self, i: int, out: np.ndarray) -> None:
        N, B = self.size, self.block
        for b, start in enumerate(range(0, N, B)):
            stop = min(start + B, N)
            rng.stream(self.seed, "design", i, b).standard_normal(out=out[start:stop])
        out *= self._scale

    def rows(self, start: int, stop: int) -> np.ndarray:
        """Vectorized ``A_start, ..., A_{stop-1}`` as rows of a matrix."""
        out = np.empty((stop - start, self.size))
        for k, i in enumerate(range(start, stop)):
            self._row(i, out[k])
        return out

    def measurement(self, i: int) -> np.ndarray:
        if not 0 <= i < self.m:
            raise ParameterError(f"measurement index {i} outside [0, {self.m})")
        return unvec(self.rows(i, i + 1)[0], self.dims)

    def _chunks(self):
        step = max(1, CHUNK_ENTRIES // self.size)
        for start in range(0, self.m, step):
            stop = min(start + step, self.m)
            yield start, stop, self.rows(start, stop)

    def _check_tensor(self, X) -> np.ndarray:
        X = as_tensor3(X)
        if X.shape != self.dims:
            raise DimensionError(f"tensor shape {X.shape} does not match design dims {self.dims}")
        return X

    def _check_vector(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.size != self.m:
            raise DimensionError(f"vector of length {y.size}, design has m = {self.m}")
        return y

    def forward_many(self, Xs: np.ndarray) -> np.ndarray:
        """``A`` applied to each column of ``Xs`` (``n1 n2 n3 x k`` vectorized tensors)."""
        Xs = np.asarray(Xs, dtype=np.float64)
        out = np.empty((self.m, Xs.shape[1]))
        for start, stop, A in self._chunks():
            out[start:stop] = A @ Xs
        return out

    def forward(self, X) -> np.ndarray:
        return self.forward_many(vec(self._check_tensor(X))[:, None])[:, 0]

    def adjoint(self, y) -> np.ndarray:
        y = self._check_vector(y)
        acc = np.zeros(self.size)
        for start, stop, A in self._chunks():
            acc += y[start:stop] @ A
        return unvec(acc, self.dims)

    def residual_and_adjoint(self, X, y):
        """``(A(X) - y, A*(A(X) - y))`` in a single pass over the design."""
        x = vec(self._check_tensor(X))
        y = self._check_vector(y)
        r = np.empty(self.m)
        acc = np.zeros(self.size)
        for start, stop, A in self._chunks():
            rc = A @ x - y[start:stop]
            r[start:stop] = rc
            acc += rc @ A
        return r, unvec(acc, self.dims)


class IdentityDesign:
    """``A = vec`` and ``A* = unvec``; an exact isometry for testing."""

    def __init__(self, dims):
        self.dims = tuple(int(d) for d in dims)
        self.size = self.m = int(np.prod(self.dims))

    def forward(self, X):
        return vec(X)

    def forward_many(self, Xs):
        return np.asarray(Xs, dtype=np.float64)

    def adjoint(self, y):
        return unvec(y, self.dims)

    def residual_and_adjoint(self, X, y):
        r = vec(X) - np.asarray(y, dtype=np.float64)
        return r, unvec(r, self.dims)


def forward(design, X) -> np.ndarray:
    return design.forward(X)


def adjoint(design, y) -> np.ndarray:
    return design.adjoint(y)


def regression_loss(F: FactorQuad, design, y) -> float:
    r = design.forward(reconstruct(F)) - y
    return 0.5 * float(r @ r)


def _oracle(design, y):
    def oracle(F):
        r, E = design.residual_and_adjoint(reconstruct(F), y)
        return 0.5 * float(r @ r), gradients_from_residual(F, E)

    return oracle


def regression_gradients(F: FactorQuad, design, y) -> GradientBundle:
    """Gradients of ``1/2 ||A((U,V,W).S) - y||^2``."""
    return _oracle(design, y)(F)[1]


def spectral_init_regression(design, y, r) -> FactorQuad:
    """``HOSVD_r(A*(y))``. Warns when ``y`` is zero or ``m`` is below the
    number of degrees of freedom of a rank-``r`` Tucker tensor."""
    r = check_rank(design.dims, r)
    y = np.asarray(y, dtype=np.float64)
    dof = sum(n * k for n, k in zip(design.dims, r)) + int(np.prod(r))
    if not np.any(y):
        warnings.warn("measurement vector is zero; initialization is degenerate", RuntimeWarning, stacklevel=2)
    elif design.m < dof:
        warnings.warn(f"m = {design.m} is below the {dof} degrees of freedom; initialization is low-information",
                      RuntimeWarning, stacklevel=2)
    return hosvd(design.adjoint(y), r)


def _truth_metrics(truth, r):
    if truth is None:
        return None, None
    if isinstance(truth, GroundTruth):
        return factored_relative_error_fn(truth), truth.sigma_max
    X = as_tensor3(truth)
    return relative_error_fn(X), sigma_extremes(X, r).sigma_max


def solve_regression(design, y, r, params: SolverParams | None = None, truth=None, alg: str = "scaledgd",
                     F0: FactorQuad | None = None, sigma_max: float | None = None) -> Trajectory:
    """Spectral initialization followed by ScaledGD (or GD) iterations.

    Step sizes up to ``eta = 2/5`` are within the range covered by the theory;
    larger values are accepted but carry no guarantee.
    """
    params = params or SolverParams()
    r = check_rank(design.dims, r)
    y = np.asarray(y, dtype=np.float64)
    rel, smax = _truth_metrics(truth, r)
    step = make_stepper(alg, sigma_max if sigma_max is not None else smax)
    if F0 is None:
        F0 = spectral_init_regression(design, y, r)
    return run_iterations(F0, _oracle(design, y), step, params, rel)


def solve_regression_gd(design, y, r, params: SolverParams | None = None, truth=None,
                        sigma_max: float | None = None) -> Trajectory:
    if truth is None and sigma_max is None:
        raise ParameterError("GD needs the ground truth (or its sigma_max)")
    return solve_regression(design, y, r, params, truth, "gd", sigma_max=sigma_max)


# --------------------------------------------------------------------------
# restricted isometry probe


@dataclass(frozen=True)
class TripEstimate:
    delta_hat: float
    trials: int
    r: tuple
    worst_ratio_low: float
    worst_ratio_high: float


def _random_unit_tucker(dims, r, seed: int, t: int) -> np.ndarray:
    facs = [rng.random_orthonormal(dims[k], r[k], rng.stream(seed, "trip-factor", t, k)) for k in range(3)]
    S = rng.stream(seed, "trip-core", t).standard_normal(r)
    X = reconstruct(FactorQuad(*facs, S))
    return X / np.linalg.norm(X)


def trip_probe(design, r, trials: int, seed: int) -> TripEstimate:
    """Largest observed ``|‖A(X)‖^2 / ‖X‖^2 - 1|`` over random unit-norm rank-``r`` tensors.

    A lower bound on the restricted isometry constant, not a certificate.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    r = check_rank(design.dims, r)
    Xs = np.stack([vec(_random_unit_tucker(design.dims, r, seed, t)) for t in range(trials)], axis=1)
    Y = design.forward_many(Xs)
    ratios = np.sum(Y * Y, axis=0) / np.sum(Xs * Xs, axis=0)
    return TripEstimate(float(np.max(np.abs(ratios - 1.0))), int(trials), r,
                        float(ratios.min()), float(ratios.max()))

"""Tensor completion under Bernoulli sampling.

The loss is ``1/(2p) ||P_Omega((U,V,W).S) - Y||^2``. Residuals and gradients
are evaluated on the observed entries only, using the row cache
``U M1(S)`` (an ``n1 x r2 r3`` matrix) so that each entry costs ``O(r^2)``
after an ``O(n1 r^3)`` setup; no ``n1 n2 n3`` array is ever allocated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import rng
from .errors import DimensionError, InitError, ParameterError
from .factors import FactorQuad, GroundTruth, random_factors, scaled_projection
from .solver import (
    GradientBundle,
    SolverParams,
    Trajectory,
    factored_relative_error_fn,
    make_stepper,
    relative_error_fn,
    run_iterations,
)
from .tensor_core import _fix_signs, as_tensor3, check_rank, matricize, sigma_extremes, tensorize

__all__ = [
    "Mask",
    "ObservationSet",
    "CompletionParams",
    "sample_mask",
    "observe",
    "snr_to_noise_sigma",
    "sparse_residual",
    "completion_loss",
    "completion_gradients",
    "dense_completion_gradients",
    "spectral_init_completion",
    "random_init_completion",
    "solve_completion",
    "solve_completion_gd",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Mask:
    dims: tuple
    indices: np.ndarray  # |Omega| x 3, lexicographically sorted
    p: float


def _lex_key(idx: np.ndarray, dims) -> np.ndarray:
    return (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]


def sample_mask(dims, p: float, seed: int) -> Mask:
    """Include each entry independently with probability ``p``.

    The draw for slice ``i1`` comes from its own stream, so the mask does not
    depend on how the work is split.
    """
    dims = tuple(int(d) for d in dims)
    if not 0 < p <= 1:
        raise ParameterError(f"p must lie in (0, 1], got {p}")
    n1, n2, n3 = dims
    j, k = np.divmod(np.arange(n2 * n3), n3)
    parts = []
    for i in range(n1):
        if p == 1:
            hit = np.arange(n2 * n3)
        else:
            hit = np.flatnonzero(rng.stream(seed, "mask", i).random(n2 * n3) < p)
        parts.append(np.stack([np.full(hit.size, i), j[hit], k[hit]], axis=1))
    idx = np.concatenate(parts).astype(np.int64) if parts else np.empty((0, 3), np.int64)
    return Mask(dims, idx, float(p))


@dataclass(eq=False)
class ObservationSet:
    dims: tuple
    indices: np.ndarray
    values: np.ndarray
    p: float

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64).reshape(-1, 3)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise DimensionError(f"invalid dims {self.dims}")
        if self.indices.shape[0] != self.values.size:
            raise DimensionError("indices and values differ in length")
        if self.indices.size and (self.indices.min() < 0 or np.any(self.indices.max(axis=0) >= self.dims)):
            raise DimensionError("observation index outside dims")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("observed values must be finite")
        if not 0 < self.p <= 1:
            raise ParameterError(f"p must lie in (0, 1], got {self.p}")
        key = _lex_key(self.indices, self.dims)
        if np.any(np.diff(key) <= 0):
            order = np.argsort(key, kind="stable")
            key = key[order]
            if np.any(np.diff(key) == 0):
                raise ParameterError("duplicate observation indices")
            self.indices = self.indices[order]
            self.values = self.values[order]

    @property
    def count(self) -> int:
        return self.values.size

    @property
    def p_estimated(self) -> float:
        return self.count / float(np.prod(self.dims))

    @cached_property
    def unfold_columns(self):
        """Column index of every observed entry in each mode-k matricization."""
        i1, i2, i3 = self.indices.T
        n1, n2, n3 = self.dims
        return (i2 + i3 * n2, i1 + i3 * n1, i1 + i2 * n1)

    @cached_property
    def _csr_layout(self):
        out = []
        for k in range(3):
            rows, cols = self.indices[:, k], self.unfold_columns[k]
            order = np.lexsort((cols, rows))
            indptr = np.zeros(self.dims[k] + 1, dtype=np.int64)
            np.cumsum(np.bincount(rows, minlength=self.dims[k]), out=indptr[1:])
            out.append((order, cols[order], indptr))
        return tuple(out)

    def unfolded(self, mode: int, values: np.ndarray | None = None) -> sp.csr_matrix:
        """Sparse mode-``mode`` matricization of the observed tensor (or of
        ``values`` placed on the observed entries)."""
        v = self.values if values is None else values
        order, cols, indptr = self._csr_layout[mode - 1]
        n = self.dims
        shape = (n[mode - 1], int(np.prod(n)) // n[mode - 1])
        return sp.csr_matrix((v[order], cols, indptr), shape=shape)

    def dense(self) -> np.ndarray:
        """Zero-filled dense tensor; for tests and small instances only."""
        Y = np.zeros(self.dims)
        Y[tuple(self.indices.T)] = self.values
        return Y


def snr_to_noise_sigma(snr_db: float, X: np.ndarray) -> float:
    """``sigma_w`` with ``SNR = 10 log10(||X||_F^2 / (n1 n2 n3 sigma_w^2))``."""
    X = as_tensor3(X)
    return float(np.sqrt(np.vdot(X, X) / (X.size * 10.0 ** (snr_db / 10.0))))


def observe(X: np.ndarray, mask: Mask, noise_sigma: float = 0.0, seed: int = 0) -> ObservationSet:
    """Observed entries of ``X`` plus optional i.i.d. ``N(0, noise_sigma^2)`` noise."""
    X = as_tensor3(X)
    if X.shape != mask.dims:
        raise DimensionError(f"tensor shape {X.shape} does not match mask dims {mask.dims}")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be non-negative")
    vals = X[tuple(mask.indices.T)].copy()
    if noise_sigma > 0:
        vals += noise_sigma * rng.stream(seed, "noise").standard_normal(vals.size)
    return ObservationSet(mask.dims, mask.indices, vals, mask.p)


# --------------------------------------------------------------------------
# sparse kernels


class _EntryCache:
    """Contractions of the current factors shared by the loss and the gradients.

    Predictions use ``T = M1(S) (W kron V)^T`` (``r1 x n2 n3``), so each
    observed entry costs ``O(r1)`` once ``T`` is formed.
    """

    def __init__(self, F: FactorQuad, obs: ObservationSet):
        if F.dims != obs.dims:
            raise DimensionError(f"factor dims {F.dims} do not match observation dims {obs.dims}")
        self.F = F
        self.obs = obs
        self.kron = (np.kron(F.W, F.V), np.kron(F.W, F.U), np.kron(F.V, F.U))
        Tt = self.kron[0] @ matricize(F.S, 1).T  # T^T, rows are contiguous
        I = obs.indices[:, 0]
        col = obs.unfold_columns[0]
        self.pred = np.einsum("ma,ma->m", F.U[I], Tt[col])


def sparse_residual(F: FactorQuad, obs: ObservationSet) -> np.ndarray:
    """``<S, u_i1 o v_i2 o w_i3> - y`` for every observed entry."""
    return _EntryCache(F, obs).pred - obs.values


def _effective_p(obs: ObservationSet, p: float | None) -> float:
    return obs.p if p is None else float(p)


def completion_loss(F: FactorQuad, obs: ObservationSet, p: float | None = None) -> float:
    R = sparse_residual(F, obs)
    return 0.5 * float(R @ R) / _effective_p(obs, p)


def _gradients(cache: _EntryCache, R: np.ndarray, scale: float) -> GradientBundle:
    """``grad_U = M1(R) (W kron V) M1(S)^T`` with ``M1(R)`` sparse, and so on.

    The core gradient reuses ``Z1 = M1(R) (W kron V)``: ``M1(grad_S) = U^T Z1``.
    """
    F, obs = cache.F, cache.obs
    Z = [obs.unfolded(k + 1, R) @ cache.kron[k] for k in range(3)]
    gU, gV, gW = (Z[k] @ matricize(F.S, k + 1).T for k in range(3))
    gS = tensorize(F.U.T @ Z[0], F.ranks, 1)
    return GradientBundle(scale * gU, scale * gV, scale * gW, scale * gS)


def _oracle(obs: ObservationSet, p: float):
    def oracle(F):
        cache = _EntryCache(F, obs)
        R = cache.pred - obs.values
        return 0.5 * float(R @ R) / p, _gradients(cache, R, 1.0 / p)

    return oracle


def completion_gradients(F: FactorQuad, obs: ObservationSet, p: float | None = None) -> GradientBundle:
    p = _effective_p(obs, p)
    if not p > 0:
        raise ParameterError("p must be positive")
    cache = _EntryCache(F, obs)
    return _gradients(cache, cache.pred - obs.values, 1.0 / p)


def dense_completion_gradients(F: FactorQuad, obs: ObservationSet, p: float | None = None) -> GradientBundle:
    """Reference path through the dense masked residual tensor."""
    from .factors import reconstruct
    from .solver import gradients_from_residual

    p = _effective_p(obs, p)
    E = np.zeros(obs.dims)
    sel = tuple(obs.indices.T)
    E[sel] = reconstruct(F)[sel] - obs.values
    return gradients_from_residual(F, E, 1.0 / p)


# --------------------------------------------------------------------------
# initialization


def spectral_init_completion(obs: ObservationSet, r, B: float | None = None, p: float | None = None) -> FactorQuad:
    """Top eigenvectors of the diagonal-deleted ``p^-2 M_k(Y) M_k(Y)^T`` for each
    mode, and the core ``p^-1 (U^T, V^T, W^T) . Y``; optionally projected."""
    r = check_rank(obs.dims, r)
    p = _effective_p(obs, p)
    facs = []
    for k in range(3):
        M = obs.unfolded(k + 1)
        G = np.asarray((M @ M.T).todense()) / p ** 2
        np.fill_diagonal(G, 0.0)
        try:
            w, Q = scipy.linalg.eigh(G, subset_by_index=(G.shape[0] - r[k], G.shape[0] - 1))
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise InitError(f"eigendecomposition failed for mode {k + 1}: {exc}") from exc
        facs.append(_fix_signs(Q[:, np.argsort(w)[::-1]]))
    F0 = FactorQuad(*facs, np.zeros(r))
    cache = _EntryCache(F0, obs)
    # the core gradient at a zero core with residual -Y is -(1/p)(U^T,V^T,W^T).Y
    S = -_gradients(cache, -obs.values, 1.0 / p).grad_S
    F = FactorQuad(*facs, S)
    return scaled_projection(F, B) if B is not None else F


def random_init_completion(obs: ObservationSet, r, seed: int, p: float | None = None) -> FactorQuad:
    """Factors with i.i.d. ``N(0, 1/n_k)`` entries and a core with i.i.d.
    ``N(0, ||Y||^2 / (p r1 r2 r3))`` entries."""
    r = check_rank(obs.dims, r)
    p = _effective_p(obs, p)
    return random_factors(obs.dims, r, seed, np.linalg.norm(obs.values) / np.sqrt(p * np.prod(r)))


# --------------------------------------------------------------------------
# solvers


@dataclass(frozen=True)
class CompletionParams(SolverParams):
    p_mode: str = "given"  # given | estimated
    p_value: float | None = None  # overrides obs.p when p_mode == "given"
    init: str = "spectral"  # spectral | random | provided
    init_factors: FactorQuad | None = field(default=None, compare=False)
    init_seed: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.p_mode not in ("given", "estimated"):
            raise ParameterError(f"p_mode must be 'given' or 'estimated', got {self.p_mode!r}")
        if self.init not in ("spectral", "random", "provided"):
            raise ParameterError(f"unknown init {self.init!r}")
        if self.init == "provided" and self.init_factors is None:
            raise ParameterError("init='provided' needs init_factors")

    def resolve_p(self, obs: ObservationSet) -> float:
        if self.p_mode == "estimated":
            return obs.p_estimated
        return obs.p if self.p_value is None else float(self.p_value)


def _initial(obs: ObservationSet, r, params: CompletionParams, p: float) -> FactorQuad:
    if params.init == "provided":
        F0 = params.init_factors
        if F0.dims != obs.dims:
            raise DimensionError(f"provided factors have dims {F0.dims}, observations {obs.dims}")
        return F0
    if params.init == "random":
        return random_init_completion(obs, r, params.init_seed, p)
    B = params.projection_B if params.use_projection else None
    return spectral_init_completion(obs, r, B, p)


def _truth_metrics(truth, r):
    """``(relative error function, sigma_max)`` from a GroundTruth or a dense tensor."""
    if truth is None:
        return None, None
    if isinstance(truth, GroundTruth):
        return factored_relative_error_fn(truth), truth.sigma_max
    X = as_tensor3(truth)
    return relative_error_fn(X), sigma_extremes(X, r).sigma_max


def solve_completion(obs: ObservationSet, r, params: CompletionParams | None = None, truth=None,
                     alg: str = "scaledgd", sigma_max: float | None = None) -> Trajectory:
    """Spectral (or random) initialization followed by ScaledGD or GD iterations.

    ``truth`` (a GroundTruth or dense tensor) switches stopping to the
    relative error criterion and supplies ``sigma_max`` for GD.
    """
    params = params or CompletionParams()
    r = check_rank(obs.dims, r)
    p = params.resolve_p(obs)
    rel, smax = _truth_metrics(truth, r)
    step = make_stepper(alg, sigma_max if sigma_max is not None else smax)
    F0 = _initial(obs, r, params, p)
    return run_iterations(F0, _oracle(obs, p), step, params, rel)


def solve_completion_gd(obs: ObservationSet, r, params: CompletionParams | None = None, truth=None,
                        sigma_max: float | None = None) -> Trajectory:
    """The GD baseline; ``sigma_max`` defaults to that of ``truth``."""
    if truth is None and sigma_max is None:
        raise ParameterError("GD needs the ground truth (or its sigma_max)")
    return solve_completion(obs, r, params, truth, "gd", sigma_max)

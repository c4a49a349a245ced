"""Dense order-3 tensor algebra.

Tensors are plain ``float64`` numpy arrays of shape ``(n1, n2, n3)``. Their
vectorization runs with the first index fastest, i.e. entry ``(i1, i2, i3)``
(0-based) sits at ``i1 + i2*n1 + i3*n1*n2`` -- this is ``ravel(order="F")``.

Matricizations follow the same convention: the mode-1 unfolding has
``X[i1, i2, i3]`` at row ``i1``, column ``i2 + i3*n2``; mode 2 puts it at row
``i2``, column ``i1 + i3*n1``; mode 3 at row ``i3``, column ``i1 + i2*n1``. With
that choice

    M1((U, V, W) . S) = U M1(S) (W kron V)^T
    M2((U, V, W) . S) = V M2(S) (W kron U)^T
    M3((U, V, W) . S) = W M3(S) (V kron U)^T

and ``vec((U, V, W) . S) = (W kron V kron U) vec(S)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DegenerateRankError, DimensionError, RankError

# Singular values below this fraction of sigma_1 count as zero.
RANK_RTOL = 1e-12

# Use the n_k x n_k Gram eigenproblem instead of an SVD when the other two
# dimensions are at least this many times larger than n_k.
GRAM_PATH_RATIO = 4

_MODES = (1, 2, 3)
# axis order that brings mode k to the front while keeping the other two in
# increasing order
_PERM = {1: (0, 1, 2), 2: (1, 0, 2), 3: (2, 0, 1)}
_INV_PERM = {k: tuple(np.argsort(p)) for k, p in _PERM.items()}


def as_tensor3(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise DimensionError(f"expected an order-3 tensor, got shape {X.shape}")
    return X


def _check_mode(mode: int) -> int:
    if mode not in _MODES:
        raise DimensionError(f"mode must be 1, 2 or 3, got {mode!r}")
    return mode


def vec(X: np.ndarray) -> np.ndarray:
    """Column-major vectorization (first index fastest)."""
    return as_tensor3(X).ravel(order="F")


def unvec(x: np.ndarray, dims) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    dims = tuple(int(d) for d in dims)
    if x.ndim != 1 or x.size != int(np.prod(dims)):
        raise DimensionError(f"vector of length {x.size} cannot hold a {dims} tensor")
    return x.reshape(dims, order="F")


def matricize(X: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding, an ``n_mode x (product of the other dims)`` matrix."""
    X = as_tensor3(X)
    mode = _check_mode(mode)
    Y = np.transpose(X, _PERM[mode])
    return Y.reshape(Y.shape[0], -1, order="F")


def tensorize(M: np.ndarray, dims, mode: int = 1) -> np.ndarray:
    """Inverse of :func:`matricize`."""
    M = np.asarray(M, dtype=np.float64)
    mode = _check_mode(mode)
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise DimensionError(f"dims must have three entries, got {dims}")
    lead = dims[mode - 1]
    rest = [d for k, d in enumerate(dims) if k != mode - 1]
    if M.ndim != 2 or M.shape != (lead, rest[0] * rest[1]):
        raise DimensionError(f"mode-{mode} matricization of a {dims} tensor must be "
                             f"{lead}x{rest[0] * rest[1]}, got {M.shape}")
    Y = M.reshape((lead, rest[0], rest[1]), order="F")
    return np.ascontiguousarray(np.transpose(Y, _INV_PERM[mode]))


def mode_product(X: np.ndarray, A: np.ndarray, mode: int) -> np.ndarray:
    """``X x_mode A``: multiply every mode-``mode`` fiber of ``X`` by ``A``."""
    X = as_tensor3(X)
    A = np.asarray(A, dtype=np.float64)
    k = _check_mode(mode) - 1
    if A.ndim != 2 or A.shape[1] != X.shape[k]:
        raise DimensionError(f"cannot apply a {A.shape} matrix along mode {mode} of a {X.shape} tensor")
    return np.moveaxis(np.tensordot(A, X, axes=(1, k)), 0, k)


def multilinear_multiply(A, B, C, S) -> np.ndarray:
    """``(A, B, C) . S`` computed as three successive mode products.

    No Kronecker product of the factors is ever formed, so the cost is
    ``O(n1 r1 r2 r3 + n1 n2 r2 r3 + n1 n2 n3 r3)`` for square-ish shapes.
    """
    S = as_tensor3(S)
    for k, M in enumerate((A, B, C)):
        M = np.asarray(M)
        if M.ndim != 2 or M.shape[1] != S.shape[k]:
            raise DimensionError(f"factor {k + 1} has shape {M.shape}, core has {S.shape}")
    Y = mode_product(S, A, 1)
    Y = mode_product(Y, B, 2)
    return mode_product(Y, C, 3)


def inner(X1: np.ndarray, X2: np.ndarray) -> float:
    X1 = as_tensor3(X1)
    X2 = as_tensor3(X2)
    if X1.shape != X2.shape:
        raise DimensionError(f"inner product of {X1.shape} and {X2.shape} tensors")
    return float(np.dot(X1.ravel(), X2.ravel()))


def fro_norm(X: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(X).ravel()))


def _fix_signs(Q: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive."""
    if Q.size == 0:
        return Q
    idx = np.argmax(np.abs(Q), axis=0)
    s = np.sign(Q[idx, np.arange(Q.shape[1])])
    s[s == 0] = 1.0
    return Q * s


@dataclass(frozen=True)
class LeadingSubspace:
    vectors: np.ndarray  # n x r, orthonormal columns
    singular_values: np.ndarray  # all singular values, descending
    tie: bool  # sigma_r == sigma_{r+1} up to RANK_RTOL * sigma_1


def leading_left_singular(M: np.ndarray, r: int) -> LeadingSubspace:
    """Top-``r`` left singular vectors of ``M`` with a deterministic sign convention."""
    M = np.asarray(M, dtype=np.float64)
    n, c = M.shape
    if c >= GRAM_PATH_RATIO * n:
        w, Q = scipy.linalg.eigh(M @ M.T)
        order = np.argsort(w)[::-1]
        w = np.clip(w[order], 0.0, None)
        Q = Q[:, order]
        svals = np.sqrt(w)
    else:
        Q, svals, _ = scipy.linalg.svd(M, full_matrices=False)
    tie = False
    if r < svals.size and svals.size:
        tie = bool(abs(svals[r - 1] - svals[r]) <= RANK_RTOL * max(svals[0], np.finfo(float).tiny))
    return LeadingSubspace(_fix_signs(Q[:, :r].copy()), svals, tie)


@dataclass(frozen=True)
class FactorQuad:
    """Tucker factors ``(U, V, W, S)`` representing ``(U, V, W) . S``.

    No orthonormality is assumed; shapes must be consistent.
    """

    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        for name in ("U", "V", "W", "S"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.U.ndim != 2 or self.V.ndim != 2 or self.W.ndim != 2 or self.S.ndim != 3:
            raise DimensionError("U, V, W must be matrices and S an order-3 tensor")
        if (self.U.shape[1], self.V.shape[1], self.W.shape[1]) != self.S.shape:
            raise DimensionError(f"factor ranks {(self.U.shape[1], self.V.shape[1], self.W.shape[1])} "
                                 f"do not match core shape {self.S.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.U.shape[0], self.V.shape[0], self.W.shape[0])

    @property
    def ranks(self) -> tuple[int, int, int]:
        return self.S.shape

    @property
    def factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.U, self.V, self.W)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in (self.U, self.V, self.W, self.S))


def check_rank(dims, r) -> tuple[int, int, int]:
    """Validate a multilinear rank; a scalar means the same rank in every mode."""
    r = tuple(int(x) for x in r) if np.ndim(r) else (int(r),) * 3
    dims = tuple(int(x) for x in dims)
    if len(r) != 3:
        raise RankError(f"rank must have three entries, got {r}")
    for k in range(3):
        other = dims[(k + 1) % 3] * dims[(k + 2) % 3]
        if r[k] < 1 or r[k] > dims[k] or r[k] > other:
            raise RankError(f"r_{k + 1} = {r[k]} is not admissible for a {dims} tensor")
    return r


def hosvd(X: np.ndarray, r) -> FactorQuad:
    """Truncated higher-order SVD: per-mode leading singular vectors and projected core."""
    X = as_tensor3(X)
    r = check_rank(X.shape, r)
    U, V, W = (leading_left_singular(matricize(X, k + 1), r[k]).vectors for k in range(3))
    S = multilinear_multiply(U.T, V.T, W.T, X)
    return FactorQuad(U, V, W, S)


def _singular_values(M: np.ndarray, r: int) -> np.ndarray:
    """All singular values, descending. Wide matrices go through the Gram
    eigenvalues unless sigma_r is small enough relative to sigma_1 to lose
    digits that way."""
    n, c = M.shape
    if c >= GRAM_PATH_RATIO * n:
        s = np.sqrt(np.clip(scipy.linalg.eigvalsh(M @ M.T)[::-1], 0.0, None))
        if s[0] > 0 and s[r - 1] >= 1e-6 * s[0]:
            return s
    return scipy.linalg.svdvals(M)


@dataclass(frozen=True)
class SigmaReport:
    sigma_max: float
    sigma_min: float
    kappa: float
    per_mode: tuple  # ((sigma_1, sigma_rk) for k = 1, 2, 3)
    ties: tuple = (False, False, False)


def sigma_extremes(X: np.ndarray, r) -> SigmaReport:
    """Largest and r_k-th singular values of each matricization, and their ratio."""
    X = as_tensor3(X)
    r = check_rank(X.shape, r)
    per_mode = []
    ties = []
    for k in range(3):
        s = _singular_values(matricize(X, k + 1), r[k])
        s1, sr = float(s[0]), float(s[r[k] - 1])
        if s1 <= 0.0 or sr <= RANK_RTOL * s1:
            raise DegenerateRankError(k + 1, sr)
        per_mode.append((s1, sr))
        ties.append(bool(r[k] < s.size and abs(s[r[k] - 1] - s[r[k]]) <= RANK_RTOL * s1))
    smax = max(p[0] for p in per_mode)
    smin = min(p[1] for p in per_mode)
    return SigmaReport(smax, smin, smax / smin, tuple(per_mode), tuple(ties))

"""Factor quadruples: reconstruction, preconditioner Grams, incoherence,
scaled projection, scaled distance and synthetic ground truths."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from . import rng
from .errors import ContractError, DimensionError, ParameterError, RankError
from .tensor_core import (
    FactorQuad,
    SigmaReport,
    check_rank,
    fro_norm,
    hosvd,
    matricize,
    mode_product,
    multilinear_multiply,
    sigma_extremes,
)

__all__ = [
    "FactorQuad",
    "PrecondState",
    "GroundTruth",
    "DistReport",
    "reconstruct",
    "reparameterize",
    "factor_grams",
    "incoherence",
    "scaled_row_norms",
    "scaled_projection",
    "scaled_distance",
    "make_ground_truth",
    "random_factors",
    "ground_truth_from_tensor",
]

log = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-10


def reconstruct(F: FactorQuad) -> np.ndarray:
    return multilinear_multiply(F.U, F.V, F.W, F.S)


def reparameterize(F: FactorQuad, Q1, Q2, Q3) -> FactorQuad:
    """``(U Q1, V Q2, W Q3, (Q1^-1, Q2^-1, Q3^-1) . S)``; reconstructs the same tensor."""
    inv = [np.linalg.inv(Q) for Q in (Q1, Q2, Q3)]
    return FactorQuad(F.U @ Q1, F.V @ Q2, F.W @ Q3, multilinear_multiply(*inv, F.S))


@dataclass(frozen=True)
class PrecondState:
    """The six r_k x r_k Grams that define the ScaledGD preconditioners.

    ``gram_breve_U`` equals ``breve_U^T breve_U`` with
    ``breve_U = (W kron V) M1(S)^T``, but is assembled from ``V^T V``,
    ``W^T W`` and the core only, so the ``(n2 n3) x r1`` matrix never exists.
    """

    gram_breve_U: np.ndarray
    gram_breve_V: np.ndarray
    gram_breve_W: np.ndarray
    gram_U: np.ndarray
    gram_V: np.ndarray
    gram_W: np.ndarray

    @property
    def breve(self):
        return (self.gram_breve_U, self.gram_breve_V, self.gram_breve_W)

    @property
    def plain(self):
        return (self.gram_U, self.gram_V, self.gram_W)


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def factor_grams(F: FactorQuad) -> PrecondState:
    GU, GV, GW = (_sym(A.T @ A) for A in F.factors)
    S = F.S
    # M_k(S) (G_c kron G_b) M_k(S)^T == M_k(S) M_k((.., G_b, .., G_c) . S)^T
    TU = mode_product(mode_product(S, GV, 2), GW, 3)
    TV = mode_product(mode_product(S, GU, 1), GW, 3)
    TW = mode_product(mode_product(S, GU, 1), GV, 2)
    bU = _sym(matricize(S, 1) @ matricize(TU, 1).T)
    bV = _sym(matricize(S, 2) @ matricize(TV, 2).T)
    bW = _sym(matricize(S, 3) @ matricize(TW, 3).T)
    return PrecondState(bU, bV, bW, GU, GV, GW)


# --------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class GroundTruth:
    factors: FactorQuad  # orthonormal U, V, W
    sigma: SigmaReport
    mu: float
    style: str  # "gaussian_core" | "prescribed_kappa" | "from_tensor"
    seed: int
    kappa_target: float | None = None
    # singular values of M_k(X*) on the diagonal of Sigma_{*,k}, k = 1, 2, 3
    mode_sigmas: tuple = ()
    # max off-diagonal / max diagonal of M_k(S*) M_k(S*)^T after rotation
    rotation_residual: float = 0.0
    tensor: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def dims(self):
        return self.factors.dims

    @property
    def ranks(self):
        return self.factors.ranks

    @property
    def sigma_max(self) -> float:
        return self.sigma.sigma_max

    @property
    def sigma_min(self) -> float:
        return self.sigma.sigma_min


def _core_mode_sigmas(S: np.ndarray) -> tuple:
    out = []
    for k in (1, 2, 3):
        M = matricize(S, k)
        out.append(np.sqrt(np.clip(np.diag(M @ M.T), 0.0, None)))
    return tuple(out)


def _offdiag_residual(S: np.ndarray) -> float:
    worst = 0.0
    for k in (1, 2, 3):
        M = matricize(S, k)
        G = M @ M.T
        d = np.abs(np.diag(G)).max()
        off = np.abs(G - np.diag(np.diag(G))).max()
        worst = max(worst, off / d if d > 0 else 0.0)
    return worst


def _rotate_core(U, V, W, S, passes: int = 3):
    """Absorb the per-mode left singular vectors of the core into the factors.

    Afterwards every ``M_k(S) M_k(S)^T`` is diagonal with non-increasing entries.
    """
    facs = [U, V, W]
    resid = _offdiag_residual(S)
    for _ in range(passes):
        for k in range(3):
            M = matricize(S, k + 1)
            w, A = scipy.linalg.eigh(M @ M.T)
            A = A[:, np.argsort(w)[::-1]]
            S = mode_product(S, A.T, k + 1)
            facs[k] = facs[k] @ A
        resid = _offdiag_residual(S)
        if resid <= 1e-10:
            break
    return (*facs, S, resid)


def _finish_truth(F: FactorQuad, style: str, seed: int, kappa=None, resid=0.0) -> GroundTruth:
    X = reconstruct(F)
    sig = sigma_extremes(X, F.ranks)
    mode_sigmas = _core_mode_sigmas(F.S)
    mu = incoherence(F)
    return GroundTruth(F, sig, mu, style, int(seed), kappa, mode_sigmas, resid, X)


def make_ground_truth(n, r, style: str = "gaussian_core", seed: int = 0,
                      kappa: float | None = None) -> GroundTruth:
    """Random orthonormal factors with either an i.i.d. N(0,1) core or a core
    whose condition number is exactly ``kappa``.

    ``prescribed_kappa`` needs cubic ranks ``r1 = r2 = r3 = r`` and builds
    ``S(j1, j2, j3) = s_j1 / sqrt(r)`` when ``j1 + j2 + j3 = 0 (mod r)`` (1-based),
    zero elsewhere, with ``s`` equally spaced from 1 down to ``1 / kappa``; the
    resulting tensor has ``sigma_max = 1`` and ``sigma_min = 1 / kappa``.
    """
    n = tuple(int(x) for x in (n if np.ndim(n) else (n, n, n)))
    r = tuple(int(x) for x in (r if np.ndim(r) else (r, r, r)))
    for k in range(3):
        if not 1 <= r[k] <= n[k]:
            raise RankError(f"r_{k + 1} = {r[k]} must lie in [1, n_{k + 1} = {n[k]}]")
    check_rank(n, r)
    seed = int(seed)
    U, V, W = (rng.random_orthonormal(n[k], r[k], rng.stream(seed, "truth-factor", k)) for k in range(3))

    if style == "gaussian_core":
        S = rng.stream(seed, "truth-core").standard_normal(r)
        U, V, W, S, resid = _rotate_core(U, V, W, S)
        if resid > 1e-10:
            log.warning("core rotation left off-diagonal residual %.2e", resid)
        return _finish_truth(FactorQuad(U, V, W, S), style, seed, None, resid)

    if style == "prescribed_kappa":
        if kappa is None or kappa < 1:
            raise ParameterError(f"prescribed_kappa needs kappa >= 1, got {kappa}")
        if len(set(r)) != 1:
            raise ParameterError(f"prescribed_kappa needs cubic ranks, got {r}")
        rr = r[0]
        svals = np.linspace(1.0, 1.0 / kappa, rr)
        j = np.arange(1, rr + 1)
        hit = (j[:, None, None] + j[None, :, None] + j[None, None, :]) % rr == 0
        S = np.where(hit, svals[:, None, None] / np.sqrt(rr), 0.0)
        return _finish_truth(FactorQuad(U, V, W, S), style, seed, float(kappa), _offdiag_residual(S))

    raise ParameterError(f"unknown ground-truth style {style!r}")


def ground_truth_from_tensor(X: np.ndarray, r) -> GroundTruth:
    """Canonical factors of an (approximately) rank-``r`` tensor via HOSVD."""
    F = hosvd(X, r)
    return _finish_truth(F, "from_tensor", 0, None, _offdiag_residual(F.S))


def random_factors(dims, r, seed: int, core_sd: float) -> FactorQuad:
    """Factors with i.i.d. ``N(0, 1/n_k)`` entries and an i.i.d. ``N(0, core_sd^2)`` core."""
    facs = [rng.stream(seed, "init-factor", k).standard_normal((dims[k], r[k])) / np.sqrt(dims[k])
            for k in range(3)]
    return FactorQuad(*facs, core_sd * rng.stream(seed, "init-core").standard_normal(tuple(r)))


# --------------------------------------------------------------------------
# incoherence and scaled projection


def incoherence(G) -> float:
    """``max_k (n_k / r_k) ||U_k||_{2,inf}^2`` for orthonormal factors."""
    F = G.factors if isinstance(G, GroundTruth) else G
    mu = 0.0
    for A in F.factors:
        n, r = A.shape
        if np.abs(A.T @ A - np.eye(r)).max() > ORTHONORMAL_TOL:
            raise ContractError("incoherence is defined for orthonormal factors only")
        mu = max(mu, n / r * float(np.max(np.sum(A * A, axis=1))))
    return mu


def scaled_row_norms(F: FactorQuad, grams: PrecondState | None = None):
    """Row l2 norms of ``U breve_U^T``, ``V breve_V^T`` and ``W breve_W^T``.

    Each is ``sqrt(u_i G u_i^T)`` with ``G`` the matching breve Gram.
    """
    grams = grams or factor_grams(F)
    out = []
    for A, G in zip(F.factors, grams.breve):
        q = np.einsum("ij,jk,ik->i", A, G, A)
        out.append(np.sqrt(np.clip(q, 0.0, None)))
    return tuple(out)


def incoherence_level(F: FactorQuad) -> float:
    """``max_k sqrt(n_k) ||A_k breve_k^T||_{2,inf}``, the quantity bounded by B."""
    norms = scaled_row_norms(F)
    return max(np.sqrt(A.shape[0]) * float(nr.max(initial=0.0)) for A, nr in zip(F.factors, norms))


def scaled_projection(F: FactorQuad, B: float) -> FactorQuad:
    """Shrink each factor row so that ``sqrt(n_k) ||row breve_k^T|| <= B``.

    All three factors are scaled using Grams of the input; the core is left alone.
    """
    if not B > 0:
        raise ParameterError(f"projection radius must be positive, got {B}")
    norms = scaled_row_norms(F)
    out = []
    for A, nr in zip(F.factors, norms):
        lhs = np.sqrt(A.shape[0]) * nr
        scale = np.ones_like(lhs)
        over = lhs > B
        scale[over] = B / lhs[over]
        out.append(A * scale[:, None])
    return FactorQuad(*out, F.S)


# --------------------------------------------------------------------------
# scaled distance


@dataclass(frozen=True)
class DistReport:
    dist: float
    aligners: tuple
    residual: float
    rel_fro: float
    converged: bool
    sweeps: int


class _Alignment:
    """Objective and stationarity residual of the factor alignment problem."""

    def __init__(self, F: FactorQuad, G: GroundTruth):
        self.F = F
        self.Fs = G.factors
        self.sig2 = [s ** 2 for s in G.mode_sigmas]
        self.sig = list(G.mode_sigmas)
        self.scale = G.sigma_max ** 2
        self.grams = [A.T @ A for A in F.factors]
        self.cross = [A.T @ As for A, As in zip(F.factors, self.Fs.factors)]

    def core(self, Qs, invs=None):
        invs = invs if invs is not None else [np.linalg.inv(Q) for Q in Qs]
        return multilinear_multiply(*invs, self.F.S)

    def objective(self, Qs) -> float:
        total = 0.0
        for A, As, Q, s in zip(self.F.factors, self.Fs.factors, Qs, self.sig):
            total += float(np.sum(((A @ Q - As) * s) ** 2))
        total += float(np.sum((self.core(Qs) - self.Fs.S) ** 2))
        return total

    def stationarity(self, Qs):
        """Per-mode residual matrices ``(A Q)^T (A Q - A*) Sig^2 - M_k(D) M_k(S~)^T``."""
        St = self.core(Qs)
        D = St - self.Fs.S
        res = []
        for k, (Q, G, C, s2) in enumerate(zip(Qs, self.grams, self.cross, self.sig2)):
            lhs = Q.T @ (G @ Q - C) * s2[None, :]
            rhs = matricize(D, k + 1) @ matricize(St, k + 1).T
            res.append(lhs - rhs)
        return res

    def residual(self, Qs) -> float:
        return float(np.sqrt(sum(np.sum(R ** 2) for R in self.stationarity(Qs)))) / self.scale

    def fixed_point(self, Qs, k: int) -> np.ndarray:
        """Solve the mode-k stationarity condition for Q_k, freezing its right side."""
        Q = Qs[k]
        St = self.core(Qs)
        D = St - self.Fs.S
        rhs = self.cross[k] * self.sig2[k][None, :]
        rhs = rhs + np.linalg.solve(Q.T, matricize(D, k + 1) @ matricize(St, k + 1).T)
        return np.linalg.solve(self.grams[k], rhs) / self.sig2[k][None, :]

    # flat parametrization used by the quasi-Newton polish
    def unpack(self, x):
        out, i = [], 0
        for r in self.F.ranks:
            out.append(x[i:i + r * r].reshape(r, r))
            i += r * r
        return out

    def value_and_grad(self, x):
        Qs = self.unpack(x)
        try:
            invs = [np.linalg.inv(Q) for Q in Qs]
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(x)
        val = self.objective(Qs)
        St = self.core(Qs, invs)
        D = St - self.Fs.S
        grads = []
        for k, (Q, Qi, G, C, s2) in enumerate(zip(Qs, invs, self.grams, self.cross, self.sig2)):
            g = (G @ Q - C) * s2[None, :] - Qi.T @ (matricize(D, k + 1) @ matricize(St, k + 1).T)
            grads.append(2.0 * g.ravel())
        return val, np.concatenate(grads)


def scaled_distance(F: FactorQuad, G: GroundTruth, tol: float = 1e-8, max_sweeps: int = 200,
                    damping: float = 0.5) -> DistReport:
    """Scaled distance between ``F`` and the ground-truth factors.

    The alignment matrices are found by damped block fixed-point sweeps on the
    first-order optimality conditions, started from per-mode least squares.
    A sweep that increases the objective is retried with half the damping
    step. If the stationarity residual is still above ``tol`` after
    ``max_sweeps``, a BFGS polish is attempted and the better point kept.
    The returned ``dist`` is the objective at the returned aligners, hence an
    upper bound on the infimum.
    """
    if F.dims != G.dims or F.ranks != G.ranks:
        raise DimensionError(f"factor shapes {F.dims}/{F.ranks} differ from truth {G.dims}/{G.ranks}")
    if not G.sigma_min > 0:
        raise ParameterError("ground truth must have sigma_min > 0")
    prob = _Alignment(F, G)
    try:
        Qs = [np.linalg.solve(Gk, Ck) for Gk, Ck in zip(prob.grams, prob.cross)]
    except np.linalg.LinAlgError:
        Qs = [np.eye(r) for r in F.ranks]
    if any(abs(np.linalg.det(Q)) < 1e-300 for Q in Qs):
        Qs = [np.eye(r) for r in F.ranks]

    obj = prob.objective(Qs)
    res = prob.residual(Qs)
    sweeps = 0
    step = damping
    while res > tol and sweeps < max_sweeps:
        sweeps += 1
        trial = list(Qs)
        try:
            for k in range(3):
                target = prob.fixed_point(trial, k)
                trial[k] = (1.0 - step) * trial[k] + step * target
            new_obj = prob.objective(trial)
        except np.linalg.LinAlgError:
            new_obj = np.inf
        if not np.isfinite(new_obj) or new_obj > obj * (1 + 1e-12) + 1e-300:
            step *= 0.5
            if step < 1e-6:
                break
            continue
        Qs, obj = trial, new_obj
        res = prob.residual(Qs)
        step = min(damping, 2 * step)

    if res > tol:
        x0 = np.concatenate([Q.ravel() for Q in Qs])
        sol = scipy.optimize.minimize(prob.value_and_grad, x0, jac=True, method="BFGS",
                                      options={"gtol": 1e-14, "maxiter": 2000})
        cand = prob.unpack(sol.x)
        if np.isfinite(sol.fun) and sol.fun < obj:
            cand_res = prob.residual(cand)
            Qs, obj, res = cand, float(sol.fun), cand_res

    X = reconstruct(F)
    rel = fro_norm(X - G.tensor) / fro_norm(G.tensor)
    return DistReport(float(np.sqrt(max(obj, 0.0))), tuple(Qs), float(res), float(rel), bool(res <= tol), sweeps)

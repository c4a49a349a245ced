import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rel
from scaledtucker.errors import DegenerateRankError, DimensionError, RankError
from scaledtucker.factors import make_ground_truth, reconstruct
from scaledtucker.tensor_core import (
    fro_norm,
    hosvd,
    inner,
    leading_left_singular,
    matricize,
    mode_product,
    multilinear_multiply,
    sigma_extremes,
    tensorize,
    unvec,
    vec,
)

dims_st = st.tuples(*[st.integers(1, 5)] * 3)
seed_st = st.integers(0, 2**32 - 1)


def _tensor(dims, seed):
    return np.random.default_rng(seed).standard_normal(dims)


def test_matricize_zero():
    assert np.array_equal(matricize(np.zeros((2, 2, 2)), 1), np.zeros((2, 4)))


def test_matricize_index_formula():
    X = np.zeros((2, 3, 2))
    X[0, 1, 0] = 5.0  # X(1,2,1) in 1-based indexing
    M = matricize(X, 1)
    expected = np.zeros((2, 6))
    expected[0, 1] = 5.0
    assert np.array_equal(M, expected)


def test_matricize_all_modes_match_column_formulas(rng):
    X = rng.standard_normal((3, 4, 5))
    n1, n2, n3 = X.shape
    for i1, i2, i3 in [(0, 0, 0), (2, 3, 4), (1, 2, 3), (2, 0, 4)]:
        assert matricize(X, 1)[i1, i2 + i3 * n2] == X[i1, i2, i3]
        assert matricize(X, 2)[i2, i1 + i3 * n1] == X[i1, i2, i3]
        assert matricize(X, 3)[i3, i1 + i2 * n1] == X[i1, i2, i3]


def test_vec_is_first_index_fastest():
    X = np.arange(24.0).reshape((2, 3, 4), order="F")
    assert np.array_equal(vec(X), np.arange(24.0))
    assert np.array_equal(unvec(vec(X), X.shape), X)


@settings(max_examples=40, deadline=None)
@given(dims_st, seed_st)
def test_matricization_frobenius_and_roundtrip(dims, seed):
    X = _tensor(dims, seed)
    for k in (1, 2, 3):
        M = matricize(X, k)
        assert abs(np.linalg.norm(M) - np.sqrt(np.sum(X * X))) <= 1e-12 * max(1.0, np.linalg.norm(M))
        assert np.array_equal(tensorize(M, dims, k), X)


def test_tensorize_rejects_wrong_dims(rng):
    M = matricize(rng.standard_normal((2, 3, 2)), 1)
    with pytest.raises(DimensionError):
        tensorize(M, (3, 2, 2), 1)


def test_tensorize_mode2_roundtrip_exact(rng):
    X = rng.standard_normal((3, 4, 5))
    assert np.max(np.abs(tensorize(matricize(X, 2), X.shape, 2) - X)) == 0.0


def test_identity_factors(rng):
    S = rng.standard_normal((2, 3, 4))
    assert np.allclose(multilinear_multiply(np.eye(2), np.eye(3), np.eye(4), S), S, rtol=0, atol=0)


def test_composition_law(rng):
    U, V, W, Q1, Q2, Q3 = (rng.standard_normal((2, 2)) for _ in range(6))
    S = rng.standard_normal((2, 2, 2))
    lhs = multilinear_multiply(U, V, W, multilinear_multiply(Q1, Q2, Q3, S))
    rhs = multilinear_multiply(U @ Q1, V @ Q2, W @ Q3, S)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(rhs))


def test_vec_kronecker_relation(rng):
    U, V, W = (rng.standard_normal((3, 2)) for _ in range(3))
    S = rng.standard_normal((2, 2, 2))
    X = multilinear_multiply(U, V, W, S)
    explicit = np.kron(W, np.kron(V, U)) @ vec(S)
    assert rel(vec(X), explicit) <= 1e-12


def test_matricization_kronecker_relations(rng):
    U, V, W = rng.standard_normal((4, 2)), rng.standard_normal((5, 3)), rng.standard_normal((6, 2))
    S = rng.standard_normal((2, 3, 2))
    X = multilinear_multiply(U, V, W, S)
    assert rel(matricize(X, 1), U @ matricize(S, 1) @ np.kron(W, V).T) <= 1e-12
    assert rel(matricize(X, 2), V @ matricize(S, 2) @ np.kron(W, U).T) <= 1e-12
    assert rel(matricize(X, 3), W @ matricize(S, 3) @ np.kron(V, U).T) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(seed_st)
def test_adjoint_and_norm_bound(seed):
    g = np.random.default_rng(seed)
    U, V, W = g.standard_normal((4, 2)), g.standard_normal((3, 3)), g.standard_normal((5, 2))
    S = g.standard_normal((2, 3, 2))
    X = g.standard_normal((4, 3, 5))
    lhs = inner(multilinear_multiply(U, V, W, S), X)
    rhs = inner(S, multilinear_multiply(U.T, V.T, W.T, X))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))
    Q = [g.standard_normal((2, 2)), g.standard_normal((3, 3)), g.standard_normal((2, 2))]
    bound = np.prod([np.linalg.norm(q, 2) for q in Q]) * fro_norm(S)
    assert fro_norm(multilinear_multiply(*Q, S)) <= bound * (1 + 1e-10)


def test_inner_basics(rng):
    X = rng.standard_normal((3, 4, 2))
    assert np.isclose(inner(X, X), fro_norm(X) ** 2, rtol=1e-14)
    assert inner(X, np.zeros_like(X)) == 0.0
    Y = rng.standard_normal((3, 4, 2))
    for k in (1, 2, 3):
        assert np.isclose(inner(X, Y), np.sum(matricize(X, k) * matricize(Y, k)), rtol=1e-12)
    with pytest.raises(DimensionError):
        inner(X, np.zeros((2, 2, 2)))


def test_mode_product_shape_check(rng):
    with pytest.raises(DimensionError):
        mode_product(rng.standard_normal((2, 3, 4)), np.eye(2), 2)
    with pytest.raises(DimensionError):
        matricize(np.zeros((2, 2, 2)), 4)


# --------------------------------------------------------------------------
# HOSVD


def _hooi_best_error(X, r, restarts=4, seed=0):
    """Best rank-r Tucker approximation error found by multi-restart HOOI run to stagnation."""
    g = np.random.default_rng(seed)
    best = np.inf
    starts = [hosvd(X, r).factors] + [
        tuple(np.linalg.qr(g.standard_normal((X.shape[k], r[k])))[0] for k in range(3)) for _ in range(restarts)
    ]
    for facs in starts:
        facs = list(facs)
        prev = np.inf
        for _ in range(500):
            for k in range(3):
                others = [f.T for f in facs]
                others[k] = np.eye(X.shape[k])
                Y = multilinear_multiply(*others, X)
                u, _, _ = np.linalg.svd(matricize(Y, k + 1), full_matrices=False)
                facs[k] = u[:, : r[k]]
            core = multilinear_multiply(*(f.T for f in facs), X)
            err = np.sqrt(max(fro_norm(X) ** 2 - fro_norm(core) ** 2, 0.0))
            if prev - err <= 1e-13 * fro_norm(X):
                break
            prev = err
        best = min(best, err)
    return best


def test_hosvd_exact_on_low_rank(rng):
    U, V, W = (np.linalg.qr(rng.standard_normal((n, k)))[0] for n, k in [(8, 2), (7, 3), (6, 2)])
    X = multilinear_multiply(U, V, W, rng.standard_normal((2, 3, 2)))
    F = hosvd(X, (2, 3, 2))
    assert fro_norm(reconstruct(F) - X) <= 1e-10 * fro_norm(X)
    for A in F.factors:
        assert np.max(np.abs(A.T @ A - np.eye(A.shape[1]))) <= 1e-12


def test_hosvd_all_ones_rank_one():
    X = np.ones((4, 4, 4))
    assert fro_norm(reconstruct(hosvd(X, (1, 1, 1))) - X) <= 1e-12 * fro_norm(X)


@pytest.mark.parametrize("seed", range(5))
def test_hosvd_quasi_optimal_against_hooi(seed):
    g = np.random.default_rng(seed)
    # low-rank signal plus dense noise, so the truncation is not exact
    U, V, W = (np.linalg.qr(g.standard_normal((9, 3)))[0] for _ in range(3))
    X = multilinear_multiply(U, V, W, g.standard_normal((3, 3, 3))) + 0.3 * g.standard_normal((9, 9, 9))
    r = (3, 3, 3)
    err_hosvd = fro_norm(X - reconstruct(hosvd(X, r)))
    err_best = _hooi_best_error(X, r, seed=seed)
    assert err_best <= err_hosvd * (1 + 1e-12)
    assert err_hosvd <= np.sqrt(3) * err_best


def test_hosvd_error_non_increasing_in_rank(rng):
    X = rng.standard_normal((6, 5, 4))
    errs = [fro_norm(X - reconstruct(hosvd(X, (k, 3, 3)))) for k in range(1, 7)]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(errs, errs[1:]))


def test_hosvd_rank_error():
    with pytest.raises(RankError):
        hosvd(np.zeros((3, 3, 3)), (4, 1, 1))
    with pytest.raises(RankError):
        hosvd(np.zeros((2, 2, 3)), (1, 1, 5))


def test_thin_gram_path_matches_svd(rng):
    M = rng.standard_normal((5, 60))  # takes the Gram path
    a = leading_left_singular(M, 3)
    u, s, _ = np.linalg.svd(M, full_matrices=False)
    assert np.allclose(np.abs(a.vectors.T @ u[:, :3]), np.eye(3), atol=1e-10)
    assert np.allclose(a.singular_values, s, rtol=1e-10)
    # sign convention: largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(a.vectors), axis=0)
    assert np.all(a.vectors[idx, np.arange(3)] > 0)


def test_tie_flag():
    M = np.diag([3.0, 2.0, 2.0, 1.0])
    assert leading_left_singular(M, 2).tie
    assert not leading_left_singular(M, 1).tie


# --------------------------------------------------------------------------
# singular-value extremes


def test_sigma_extremes_prescribed_kappa():
    G = make_ground_truth(20, 4, "prescribed_kappa", 3, kappa=10)
    rep = sigma_extremes(G.tensor, (4, 4, 4))
    assert abs(rep.kappa - 10) <= 1e-8 * 10
    assert abs(rep.sigma_max - 1) <= 1e-10 and abs(rep.sigma_min - 0.1) <= 1e-10


def test_sigma_extremes_match_core_for_orthonormal_truth():
    G = make_ground_truth(15, (3, 4, 2), "gaussian_core", 5)
    rep = sigma_extremes(G.tensor, G.ranks)
    for k in range(3):
        s = np.linalg.svd(matricize(G.factors.S, k + 1), compute_uv=False)
        assert np.allclose(rep.per_mode[k], (s[0], s[-1]), rtol=1e-10)


def test_sigma_extremes_homogeneous(rng):
    X = rng.standard_normal((5, 6, 7))
    a, b = sigma_extremes(X, (2, 2, 2)), sigma_extremes(3.5 * X, (2, 2, 2))
    assert np.isclose(b.sigma_max, 3.5 * a.sigma_max, rtol=1e-12)
    assert np.isclose(b.sigma_min, 3.5 * a.sigma_min, rtol=1e-12)
    assert np.isclose(b.kappa, a.kappa, rtol=1e-12)
    assert a.kappa >= 1


def test_sigma_extremes_degenerate_reports_mode(rng):
    u = rng.standard_normal(5)
    X = np.einsum("i,j,k->ijk", u, rng.standard_normal(6), rng.standard_normal(7))
    with pytest.raises(DegenerateRankError) as exc:
        sigma_extremes(X, (2, 1, 1))
    assert exc.value.mode == 1

import numpy as np
import pytest

from masakit.errors import NumericalError, ValidationError
from masakit.linalg import (
    CholeskyFactor,
    cholesky,
    solve_lower_triangular,
    svd,
    truncated_approx,
)


def test_svd_identity():
    res = svd(np.eye(2))
    assert np.allclose(res.singular_values, [1.0, 1.0])


def test_svd_diagonal_signed_permutation():
    res = svd(np.diag([3.0, 2.0]))
    assert np.allclose(res.singular_values, [3.0, 2.0])
    assert np.allclose(np.abs(res.left_vectors), np.eye(2), atol=1e-12)
    assert np.allclose(np.abs(res.right_vectors_t), np.eye(2), atol=1e-12)


def test_svd_reconstructs_random_matrix():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(5, 3))
    res = svd(m)
    assert np.max(np.abs(res.reconstruct() - m)) < 1e-10
    # orthogonality of the left vectors
    gram = res.left_vectors.T @ res.left_vectors
    assert np.max(np.abs(gram - np.eye(3))) <= 1e-10
    # descending singular values
    assert np.all(np.diff(res.singular_values) <= 0)


def test_svd_sign_convention():
    rng = np.random.default_rng(8)
    res = svd(rng.normal(size=(6, 4)))
    for j in range(res.left_vectors.shape[1]):
        col = res.left_vectors[:, j]
        assert col[np.argmax(np.abs(col))] >= 0


def test_svd_deterministic():
    rng = np.random.default_rng(9)
    m = rng.normal(size=(7, 5))
    a, b = svd(m), svd(m.copy())
    assert np.array_equal(a.left_vectors, b.left_vectors)
    assert np.array_equal(a.singular_values, b.singular_values)
    assert np.array_equal(a.right_vectors_t, b.right_vectors_t)


def test_svd_rejects_nonfinite():
    with pytest.raises(ValidationError):
        svd(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_truncated_full_rank_is_identity():
    rng = np.random.default_rng(11)
    m = rng.normal(size=(4, 4))
    assert np.max(np.abs(truncated_approx(m, 4) - m)) < 1e-10


def test_truncated_rank_one_exact():
    u = np.array([1.0, -2.0, 0.5])
    v = np.array([3.0, 1.0])
    m = np.outer(u, v)
    assert np.max(np.abs(truncated_approx(m, 1) - m)) < 1e-12


def test_truncated_error_matches_svd_tail():
    rng = np.random.default_rng(12)
    m = rng.normal(size=(6, 4))
    res = svd(m)
    err = np.linalg.norm(m - truncated_approx(m, 2))
    expect = np.sqrt(res.singular_values[2] ** 2 + res.singular_values[3] ** 2)
    assert abs(err - expect) < 1e-9


def test_truncated_eckart_young_sweep():
    rng = np.random.default_rng(13)
    m = rng.normal(size=(8, 5))
    sq = svd(m).singular_values ** 2
    for r in range(1, 6):
        err2 = np.sum((m - truncated_approx(m, r)) ** 2)
        tail = float(np.sum(sq[r:]))
        assert abs(err2 - tail) <= 1e-8 * max(1.0, float(np.sum(sq)))


def test_truncated_rank_bounds():
    m = np.eye(3)
    with pytest.raises(ValidationError):
        truncated_approx(m, 0)
    with pytest.raises(ValidationError):
        truncated_approx(m, 4)


def test_cholesky_identity():
    f = cholesky(np.eye(3))
    assert f.ridge_used == 0.0
    assert np.array_equal(f.lower, np.eye(3))


def test_cholesky_hand_case():
    f = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    assert np.allclose(f.lower, [[2.0, 0.0], [1.0, np.sqrt(2.0)]])
    assert np.allclose(f.lower @ f.lower.T, [[4.0, 2.0], [2.0, 3.0]])


def test_cholesky_rank_deficient_uses_ridge():
    a = np.array([[1.0, 1.0], [1.0, 1.0]])
    f = cholesky(a)
    assert f.ridge_used > 0.0
    recon = f.lower @ f.lower.T
    assert np.linalg.norm(recon - (a + f.ridge_used * np.eye(2))) / np.linalg.norm(a) <= 1e-8
    assert np.all(np.diag(f.lower) > 0)


def test_cholesky_roundtrip_random_psd():
    rng = np.random.default_rng(21)
    h = rng.normal(size=(20, 6))
    a = h.T @ h
    f = cholesky(a)
    err = np.linalg.norm(f.lower @ f.lower.T - (a + f.ridge_used * np.eye(6)))
    assert err / np.linalg.norm(a) <= 1e-8


def test_cholesky_failure_names_matrix():
    with pytest.raises(NumericalError, match="3x3"):
        cholesky(-np.eye(3))


def test_cholesky_rejects_nonsquare():
    with pytest.raises(ValidationError):
        cholesky(np.ones((2, 3)))


def test_solve_identity_returns_rhs():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = solve_lower_triangular(CholeskyFactor.identity(2), b)
    assert np.allclose(out, b)


def test_solve_hand_case():
    f = CholeskyFactor(np.array([[2.0, 0.0], [1.0, 1.0]]), 0.0)
    out = solve_lower_triangular(f, np.array([[2.0], [3.0]]))
    assert np.allclose(out, [[1.0], [2.0]])


def test_solve_random_pd_residual():
    rng = np.random.default_rng(31)
    h = rng.normal(size=(30, 5))
    f = cholesky(h.T @ h)
    b = rng.normal(size=(5, 4))
    x = solve_lower_triangular(f, b)
    assert np.max(np.abs(f.lower @ x - b)) / np.max(np.abs(b)) < 1e-10


def test_solve_rejects_mismatch():
    with pytest.raises(ValidationError):
        solve_lower_triangular(CholeskyFactor.identity(2), np.ones((3, 1)))

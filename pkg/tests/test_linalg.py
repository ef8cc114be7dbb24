import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mingle.linalg import (
    SvdResult,
    covariance,
    orthonormalize_augment,
    project_orthogonal_complement,
    svd,
    svd_of_product,
    truncated_svd,
)


def jacobi_eigvals(s, sweeps=100):
    """Classical two-sided Jacobi on a symmetric matrix (independent oracle)."""
    a = s.copy()
    n = a.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(a**2) - np.sum(np.diag(a) ** 2))
        if off < 1e-14 * max(np.linalg.norm(a), 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta else 1.0
                c = 1 / np.sqrt(t * t + 1)
                sn = t * c
                j = np.eye(n)
                j[p, p] = j[q, q] = c
                j[p, q], j[q, p] = sn, -sn
                a = j.T @ a @ j
    return np.sort(np.diag(a))[::-1]


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
shapes = st.tuples(st.integers(1, 9), st.integers(1, 9))


def test_svd_matches_two_sided_jacobi_oracle(rng):
    for m, n in [(6, 4), (4, 6), (5, 5), (8, 3)]:
        a = rng.standard_normal((m, n))
        res = svd(a)
        eig = jacobi_eigvals(a.T @ a if m >= n else a @ a.T)
        np.testing.assert_allclose(res.sigma**2, eig[: min(m, n)], rtol=1e-10, atol=1e-12)


def test_svd_matches_lapack(rng):
    a = rng.standard_normal((32, 32))
    np.testing.assert_allclose(svd(a).sigma, np.linalg.svd(a, compute_uv=False), rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, shapes, elements=finite))
def test_svd_properties(a):
    res = svd(a)
    k = min(a.shape)
    assert res.u.shape == (a.shape[0], k) and res.v.shape == (a.shape[1], k)
    assert np.all(np.diff(res.sigma) <= 1e-12 * max(1.0, res.sigma[0]))
    assert np.all(res.sigma >= 0)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(res.v.T @ res.v, np.eye(k), atol=1e-10)
    scale = max(np.linalg.norm(a), 1.0)
    assert np.linalg.norm(res.reconstruct() - a) <= 1e-10 * scale


def test_rank_deficient_and_zero():
    a = np.outer(np.arange(1.0, 6.0), np.ones(4))
    res = svd(a)
    assert res.rank() == 1
    np.testing.assert_allclose(res.reconstruct(), a, atol=1e-12)
    z = svd(np.zeros((3, 4)))
    assert z.rank() == 0 and np.all(z.sigma == 0)
    np.testing.assert_allclose(z.u.T @ z.u, np.eye(3), atol=1e-12)


def test_svd_rejects_bad_input():
    with pytest.raises(ValueError):
        svd(np.ones(3))
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))


def test_svd_does_not_mutate(rng):
    a = rng.standard_normal((4, 3))
    before = a.copy()
    svd(a)
    np.testing.assert_array_equal(a, before)


def test_eckart_young_tail_sum(rng):
    for _ in range(20):
        m, n = rng.integers(2, 10, size=2)
        a = rng.standard_normal((m, n))
        full = svd(a)
        for r in range(1, min(m, n) + 1):
            t = truncated_svd(a, r)
            err = a - t.reconstruct()
            assert abs(np.sum(err**2) - np.sum(full.sigma[r:] ** 2)) < 1e-9
            spectral = full.sigma[r] if r < min(m, n) else 0.0
            assert abs(np.linalg.norm(err, 2) - spectral) < 1e-9


def test_truncated_rank_bounds(rng):
    a = rng.standard_normal((3, 5))
    with pytest.raises(ValueError):
        truncated_svd(a, 0)
    with pytest.raises(ValueError):
        truncated_svd(a, 4)
    assert truncated_svd(a, 3).u.shape == (3, 3)


def test_augment_orthonormal_and_drops_dependent(rng):
    q = orthonormalize_augment(None, rng.standard_normal((6, 2)))
    assert q.shape == (6, 2)
    more = np.column_stack([q[:, 0] + q[:, 1], rng.standard_normal(6)])
    q2 = orthonormalize_augment(q, more)
    assert q2.shape == (6, 3)
    np.testing.assert_allclose(q2.T @ q2, np.eye(3), atol=1e-12)
    np.testing.assert_array_equal(q2[:, :2], q)
    with pytest.raises(ValueError):
        orthonormalize_augment(q, np.ones((5, 1)))


def test_covariance():
    h = np.array([[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_allclose(covariance(h), [[0.5, 0.0], [0.0, 2.0]])
    with pytest.raises(ValueError):
        covariance(np.empty((0, 3)))


def _random_prev(rng, m, n, rank):
    return svd(rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n)))


def test_projection_annihilates_idempotent_symmetric(rng):
    for _ in range(20):
        m, n = rng.integers(2, 9, size=2)
        prev = _random_prev(rng, m, n, rng.integers(1, min(m, n) + 1))
        k = prev.rank()
        x, y = rng.standard_normal((m, n)), rng.standard_normal((m, n))
        px = project_orthogonal_complement(x, prev)
        for p in range(k):
            d = np.outer(prev.u[:, p], prev.v[:, p])
            assert abs(np.sum(px * d)) < 1e-10
            assert np.max(np.abs(project_orthogonal_complement(d, prev))) < 1e-10
        np.testing.assert_allclose(project_orthogonal_complement(px, prev), px, atol=1e-10)
        py = project_orthogonal_complement(y, prev)
        assert abs(np.sum(px * y) - np.sum(x * py)) < 1e-10


def test_projection_zero_prev_is_identity(rng):
    x = rng.standard_normal((4, 5))
    np.testing.assert_array_equal(project_orthogonal_complement(x, svd(np.zeros((4, 5)))), x)


def test_projection_keeps_off_diagonal_terms():
    prev = SvdResult(np.eye(3)[:, :2], np.array([2.0, 1.0]), np.eye(3)[:, :2])
    x = np.arange(9.0).reshape(3, 3)
    out = project_orthogonal_complement(x, prev)
    expect = x.copy()
    expect[0, 0] = expect[1, 1] = 0.0
    np.testing.assert_allclose(out, expect)


def test_projection_shape_mismatch(rng):
    with pytest.raises(ValueError):
        project_orthogonal_complement(np.ones((3, 3)), svd(np.ones((4, 3))))


def test_svd_of_product_matches_direct(rng):
    b, a = rng.standard_normal((7, 3)), rng.standard_normal((3, 6))
    res = svd_of_product(b, a)
    np.testing.assert_allclose(res.sigma[:3], svd(b @ a).sigma[:3], rtol=1e-10)
    np.testing.assert_allclose(res.reconstruct(), b @ a, atol=1e-10)
    wide = svd_of_product(rng.standard_normal((3, 5)), rng.standard_normal((5, 4)))
    assert wide.u.shape == (3, 3)

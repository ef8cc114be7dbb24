"""Dense linear algebra primitives.

Everything here works on float64 numpy arrays and never mutates its inputs.
The SVD is a one-sided (Hestenes) Jacobi iteration with round-robin pair
ordering so that each round rotates n/2 disjoint column pairs at once.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

_EPS = np.finfo(np.float64).eps


class SvdResult(NamedTuple):
    """Thin SVD ``a = u @ diag(sigma) @ v.T`` with ``sigma`` non-increasing."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T

    def rank(self, rtol: float | None = None) -> int:
        """Number of singular values above ``rtol * sigma_max``."""
        return int(np.count_nonzero(self.sigma > _rank_threshold(self, rtol)))


def _rank_threshold(res: SvdResult, rtol: float | None) -> float:
    if res.sigma.size == 0 or res.sigma[0] == 0.0:
        return np.inf
    if rtol is None:
        rtol = max(res.u.shape[0], res.v.shape[0]) * _EPS * 16
    return rtol * res.sigma[0]


def as_matrix(a, name: str = "a") -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle method; n is even here
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        left = np.array(players[:half])
        right = np.array(players[half:][::-1])
        rounds.append((left, right))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_columns(q: np.ndarray, count: int) -> np.ndarray:
    """Append ``count`` orthonormal columns orthogonal to ``q``'s columns."""
    m = q.shape[0]
    basis = q
    added = []
    for _ in range(count):
        resid = np.eye(m) - basis @ basis.T
        resid -= basis @ (basis.T @ resid)
        norms = np.linalg.norm(resid, axis=0)
        j = int(np.argmax(norms))
        col = resid[:, j] / norms[j]
        added.append(col)
        basis = np.column_stack([basis, col])
    if not added:
        return np.empty((m, 0))
    return np.column_stack(added)


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    # largest-magnitude entry of each left vector made positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u *= signs
    v *= signs


def svd(a, *, tol: float = 1e-15, max_sweeps: int = 60) -> SvdResult:
    """Thin SVD of ``a`` via one-sided Jacobi rotations.

    Returns ``q = min(m, n)`` triplets. Columns belonging to zero singular
    values are completed to an orthonormal set so that ``u.T @ u = I`` holds
    for every input.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        res = svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return SvdResult(res.v, res.sigma, res.u)
    if n == 0:
        return SvdResult(np.empty((m, 0)), np.empty(0), np.empty((0, 0)))

    n_pad = n + (n % 2)
    work = np.zeros((m, n_pad))
    work[:, :n] = a
    vmat = np.eye(n_pad)
    rounds = _round_robin(n_pad) if n_pad > 1 else []
    # columns whose squared norm is below this are numerically zero
    floor = (_EPS * np.linalg.norm(a)) ** 2

    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            up, uq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > floor) & (beta > floor)
            if not np.any(active):
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            up, uq = work[:, p], work[:, q]
            work[:, p] = c * up - s * uq
            work[:, q] = s * up + c * uq
            vp, vq = vmat[:, p], vmat[:, q]
            vmat[:, p] = c * vp - s * vq
            vmat[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise RuntimeError("Jacobi SVD did not converge")

    work, vmat = work[:, :n], vmat[:n, :n]
    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, work, vmat = sigma[order], work[:, order], vmat[:, order]

    cutoff = max(m, n) * _EPS * (sigma[0] if sigma[0] > 0 else 1.0)
    good = sigma > cutoff
    u = np.zeros((m, n))
    u[:, good] = work[:, good] / sigma[good]
    # one Gram-Schmidt pass tidies orthogonality of nearly-degenerate pairs
    if np.any(good):
        qg, rg = np.linalg.qr(u[:, good])
        u[:, good] = qg * np.sign(np.diag(rg))
    n_bad = int(np.count_nonzero(~good))
    if n_bad:
        sigma[~good] = 0.0
        u[:, ~good] = _complete_columns(u[:, good], n_bad)
    _fix_signs(u, vmat)
    return SvdResult(u, sigma, vmat)


def truncated_svd(a, r: int) -> SvdResult:
    """Top-``r`` singular triplets of ``a`` (best rank-r approximation)."""
    a = as_matrix(a)
    q = min(a.shape)
    if not 1 <= r <= q:
        raise ValueError(f"rank r={r} out of range [1, {q}] for shape {a.shape}")
    res = svd(a)
    return SvdResult(res.u[:, :r].copy(), res.sigma[:r].copy(), res.v[:, :r].copy())


def orthonormalize_augment(existing, new_cols, tol: float | None = None) -> np.ndarray:
    """Extend an orthonormal basis with the span of ``new_cols``.

    New columns are Gram-Schmidt orthogonalised (two passes) against the
    running basis and dropped when their residual norm falls below ``tol``.
    """
    new_cols = as_matrix(new_cols, "new_cols")
    d = new_cols.shape[0]
    if existing is None or np.size(existing) == 0:
        basis = np.empty((d, 0))
    else:
        basis = as_matrix(existing, "existing")
        if basis.shape[0] != d:
            raise ValueError(
                f"row mismatch: existing has {basis.shape[0]} rows, new_cols has {d}"
            )
    if tol is None:
        tol = 1e-8 * d
    cols = [basis[:, j] for j in range(basis.shape[1])]
    for j in range(new_cols.shape[1]):
        w = new_cols[:, j].copy()
        for _ in range(2):
            if cols:
                b = np.column_stack(cols)
                w -= b @ (b.T @ w)
        norm = np.linalg.norm(w)
        if norm < tol:
            continue
        cols.append(w / norm)
    if not cols:
        return np.empty((d, 0))
    return np.column_stack(cols)


def covariance(samples) -> np.ndarray:
    """Uncentered second-moment matrix ``(1/N) sum h h^T``."""
    h = np.array(samples, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError("covariance needs at least one sample")
    return h.T @ h / h.shape[0]


def project_orthogonal_complement(delta, prev: SvdResult, rtol: float | None = None) -> np.ndarray:
    """Remove the diagonal coefficients ``<delta, u_p v_p^T>`` of ``prev``.

    Only directions with a non-zero singular value count as previously
    learned, so a zero ``prev`` leaves ``delta`` untouched. Off-diagonal
    cross terms and everything outside ``span(u) x span(v)`` are kept.
    """
    delta = as_matrix(delta, "delta")
    if prev.u.shape[0] != delta.shape[0] or prev.v.shape[0] != delta.shape[1]:
        raise ValueError(
            f"shape mismatch: delta {delta.shape} vs basis "
            f"({prev.u.shape[0]}, {prev.v.shape[0]})"
        )
    k = prev.rank(rtol)
    if k == 0:
        return delta.copy()
    u, v = prev.u[:, :k], prev.v[:, :k]
    diag = np.einsum("ip,ij,jp->p", u, delta, v)
    return delta - (u * diag) @ v.T


def svd_of_product(b, a) -> SvdResult:
    """Thin SVD of ``b @ a`` without forming the product.

    QR-reduces both factors so the Jacobi iteration only runs on the small
    ``r x r`` core, where ``r`` is the inner dimension.
    """
    b = as_matrix(b, "b")
    a = as_matrix(a, "a")
    if b.shape[1] != a.shape[0]:
        raise ValueError(f"inner dimensions differ: {b.shape} @ {a.shape}")
    if b.shape[1] > min(b.shape[0], a.shape[1]):
        return svd(b @ a)
    qb, rb = np.linalg.qr(b)
    qa, ra = np.linalg.qr(a.T)
    core = svd(rb @ ra.T)
    u, v = qb @ core.u, qa @ core.v
    _fix_signs(u, v)
    return SvdResult(u, core.sigma, v)

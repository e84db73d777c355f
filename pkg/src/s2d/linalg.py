"""Dense float64 matrix helpers and a one-sided Jacobi SVD.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
``as_matrix`` is the single entry point that enforces this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

JACOBI_TOL = 1e-12
MAX_SWEEPS = 100


class SVDConvergenceError(RuntimeError):
    """Raised when Jacobi sweeps fail to orthogonalise the columns."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.array(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"{name}: expected a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: contains non-finite entries")
    return m


@dataclass(frozen=True)
class SVDFactors:
    """Thin SVD ``w = u @ diag(sigma) @ v.T`` with ``sigma`` descending."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank_bound(self) -> int:
        return self.sigma.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.v.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not in ``keep`` with an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if keep[j]]
    fill = []
    for e in range(m):
        if len(basis) + len(fill) == k:
            break
        cand = np.zeros(m)
        cand[e] = 1.0
        for _ in range(2):
            for b in basis + fill:
                cand -= (b @ cand) * b
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            fill.append(cand / norm)
    out = u.copy()
    it = iter(fill)
    for j in range(k):
        if not keep[j]:
            out[:, j] = next(it)
    return out


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0


@numba.njit(cache=True)
def _jacobi_sweeps(rows, vt, tol, max_sweeps, floor):
    """Cyclic one-sided Jacobi over the rows of ``rows``; returns sweeps used or -1.

    Pairs involving a row whose squared norm is below ``floor`` are skipped:
    such rows are rounding noise and would otherwise rotate forever.
    """
    n, m = rows.shape
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    a = rows[p, i]
                    b = rows[q, i]
                    alpha += a * a
                    beta += b * b
                    gamma += a * b
                if alpha <= floor or beta <= floor or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sign = 1.0 if zeta >= 0.0 else -1.0
                t = sign / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    a = rows[p, i]
                    b = rows[q, i]
                    rows[p, i] = c * a - s * b
                    rows[q, i] = s * a + c * b
                for i in range(n):
                    a = vt[p, i]
                    b = vt[q, i]
                    vt[p, i] = c * a - s * b
                    vt[q, i] = s * a + c * b
        if not rotated:
            return sweep
    return -1


def _jacobi_tall(a: np.ndarray, label: str):
    """Orthogonalise the columns of a tall matrix; returns (columns, V).

    Columns are stored as rows of a C-ordered array for contiguous access.
    """
    rows = np.ascontiguousarray(a.T)
    vt = np.eye(rows.shape[0])
    floor = (np.finfo(np.float64).eps * np.linalg.norm(a)) ** 2
    if _jacobi_sweeps(rows, vt, JACOBI_TOL, MAX_SWEEPS, floor) < 0:
        raise SVDConvergenceError(
            f"Jacobi SVD of {label} (shape {a.shape}) did not converge in {MAX_SWEEPS} sweeps"
        )
    return rows.T, vt.T


def svd(w, name: str = "matrix") -> SVDFactors:
    """Thin SVD by one-sided Jacobi rotations.

    Signs are normalised so the largest-magnitude entry of every left singular
    vector is positive. Raises ``SVDConvergenceError`` naming ``name`` if the
    sweep budget is exhausted.
    """
    w = as_matrix(w, name)
    m, n = w.shape
    transposed = m < n
    a = w.T if transposed else w
    cols, right = _jacobi_tall(a, name)
    sigma = np.linalg.norm(cols, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    cols = cols[:, order]
    right = right[:, order]

    tiny = sigma[0] * max(a.shape) * np.finfo(np.float64).eps if sigma[0] > 0 else 0.0
    keep = sigma > tiny
    left = np.zeros_like(cols)
    left[:, keep] = cols[:, keep] / sigma[keep]
    sigma = np.where(keep, sigma, 0.0)
    if not keep.all():
        left = _complete_basis(left, keep)

    if transposed:
        u, v = right, left
    else:
        u, v = left, right
    u = np.ascontiguousarray(u)
    v = np.ascontiguousarray(v)
    _fix_signs(u, v)
    return SVDFactors(u=u, sigma=sigma, v=v)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def spectral_norm(w, name: str = "matrix") -> float:
    return float(svd(w, name).sigma[0])


def truncated_reconstruct(f: SVDFactors, k: int, power: float = 1.0) -> np.ndarray:
    """Sum of the top ``k`` rank-one terms with singular values raised to ``power``."""
    if not 1 <= k <= f.rank_bound:
        raise ValueError(f"k={k} outside [1, {f.rank_bound}]")
    if power < 1:
        raise ValueError(f"power must be >= 1, got {power}")
    return (f.u[:, :k] * f.sigma[:k] ** power) @ f.v[:, :k].T

"""Dense linear-algebra kernel for small matrices.

Everything here is deterministic: fixed sign conventions for singular
vectors and eigenvectors make downstream derivative comparisons
reproducible across runs. Sizes are tiny (at most 15x18 and 10x10), so
all paths are dense and double precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConvergenceFailure(RuntimeError):
    """An iterative LAPACK kernel (SVD / eigensolver) failed to converge."""


def check_finite(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Return ``a`` as a float array, raising ValueError on NaN/Inf."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SvdResult:
    """Full SVD ``a = u @ diag(sigma) @ v.T`` with sigma non-increasing."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        m, n = self.u.shape[0], self.v.shape[0]
        s = np.zeros((m, n))
        k = len(self.sigma)
        s[:k, :k] = np.diag(self.sigma)
        return self.u @ s @ self.v.T


def _fix_column_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Largest-magnitude entry of each left singular vector made positive
    # (ties break to the lowest index); the paired right vector flips too.
    u = u.copy()
    v = v.copy()
    k = min(u.shape[1], v.shape[1])
    for j in range(u.shape[1]):
        if u[np.argmax(np.abs(u[:, j])), j] < 0:
            u[:, j] = -u[:, j]
            if j < k:
                v[:, j] = -v[:, j]
    for j in range(k, v.shape[1]):
        if v[np.argmax(np.abs(v[:, j])), j] < 0:
            v[:, j] = -v[:, j]
    return u, v


def svd(m: np.ndarray) -> SvdResult:
    """Full SVD with a deterministic sign convention.

    Raises ConvergenceFailure if the underlying iteration breaks down.
    """
    m = check_finite(m)
    try:
        u, sigma, vt = np.linalg.svd(m, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"SVD did not converge: {exc}") from exc
    u, v = _fix_column_signs(u, vt.T)
    return SvdResult(u=u, sigma=sigma, v=v)


def default_rank_tol(m: np.ndarray, sigma_max: float) -> float:
    return max(m.shape) * sigma_max * np.finfo(float).eps


def pseudoinverse(m: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Reciprocals of singular values at or below ``tol`` are zeroed;
    ``tol`` defaults to max(rows, cols) * sigma_max * machine epsilon.
    """
    m = check_finite(m)
    res = svd(m)
    if tol is None:
        tol = default_rank_tol(m, res.sigma[0] if res.sigma.size else 0.0)
    elif tol < 0:
        raise ValueError("tol must be non-negative")
    inv_sigma = np.where(res.sigma > tol, 1.0 / np.where(res.sigma > 0, res.sigma, 1.0), 0.0)
    k = len(res.sigma)
    return res.v[:, :k] @ np.diag(inv_sigma) @ res.u[:, :k].T


def numerical_rank(m: np.ndarray, tol: float | None = None) -> int:
    """Number of singular values above ``tol`` (same default as pseudoinverse)."""
    m = check_finite(m)
    sigma = svd(m).sigma
    if tol is None:
        tol = default_rank_tol(m, sigma[0] if sigma.size else 0.0)
    elif tol < 0:
        raise ValueError("tol must be non-negative")
    return int(np.count_nonzero(sigma > tol))


def real_eigenpairs(
    m: np.ndarray, imag_tol: float = 1e-8
) -> list[tuple[float, np.ndarray]]:
    """Real eigenpairs of a square matrix, sorted by eigenvalue.

    Eigenvalues with |imaginary part| >= ``imag_tol`` are dropped.
    Eigenvectors are unit length, with the first entry of magnitude
    above 1e-12 made positive.
    """
    m = check_finite(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("real_eigenpairs requires a square matrix")
    try:
        vals, vecs = np.linalg.eig(m)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"eigendecomposition did not converge: {exc}") from exc
    pairs = []
    for k in range(len(vals)):
        if abs(vals[k].imag) >= imag_tol:
            continue
        vec = np.real(vecs[:, k])
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            continue
        vec = vec / norm
        nz = np.nonzero(np.abs(vec) > 1e-12)[0]
        if nz.size and vec[nz[0]] < 0:
            vec = -vec
        pairs.append((float(vals[k].real), vec))
    pairs.sort(key=lambda p: p[0])
    return pairs


def solve_linear(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense linear solve, surfacing singularity as ConvergenceFailure."""
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"linear solve failed: {exc}") from exc

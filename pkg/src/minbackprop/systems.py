"""Concrete constraint systems and losses for each geometric problem.

Conventions used throughout:

* 3x3 model matrices are flattened row-major, so vec(M)[3*i + j] = M[i, j].
* Image points are stored inhomogeneous-canonical: a stored pair
  (px, py) means the homogeneous point (px, py, 1).
* Depth / absolute-pose parameters pack as a = [A1; A2; A3; d1; d2; d3]
  (three 3D points followed by three homogeneous viewing directions).
* Five-match epipolar parameters pack as w = [q1x, q1y, q1tx, q1ty, ...]
  (four numbers per correspondence, first image then second).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics
from .ift import ConstraintDerivatives, ConstraintSystem, ObjectiveDerivatives, RankDeficient

# ---------------------------------------------------------------------------
# absolute pose from three points (depth unknowns)


def pack_p3p_params(points: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Stack three 3D points and three viewing directions into a in R^18."""
    points = np.asarray(points, dtype=float).reshape(3, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(3, 3)
    return np.concatenate([points.ravel(), dirs.ravel()])


def unpack_p3p_params(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    return a[:9].reshape(3, 3), a[9:].reshape(3, 3)


def _p3p_residual(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    pts, dirs = unpack_p3p_params(a)
    out = np.empty(3)
    for k in range(3):
        i, j = k, (k + 1) % 3
        diff_pt = pts[i] - pts[j]
        diff_ray = x[i] * dirs[i] - x[j] * dirs[j]
        out[k] = diff_pt @ diff_pt - diff_ray @ diff_ray
    return out


def _p3p_jac_x(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    _, dirs = unpack_p3p_params(a)
    jx = np.zeros((3, 3))
    for k in range(3):
        i, j = k, (k + 1) % 3
        r = x[i] * dirs[i] - x[j] * dirs[j]
        jx[k, i] = -2.0 * dirs[i] @ r
        jx[k, j] = 2.0 * dirs[j] @ r
    return jx


def _p3p_jac_a(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    pts, dirs = unpack_p3p_params(a)
    ja = np.zeros((3, 18))
    for k in range(3):
        i, j = k, (k + 1) % 3
        diff_pt = pts[i] - pts[j]
        r = x[i] * dirs[i] - x[j] * dirs[j]
        ja[k, 3 * i:3 * i + 3] = 2.0 * diff_pt
        ja[k, 3 * j:3 * j + 3] = -2.0 * diff_pt
        ja[k, 9 + 3 * i:9 + 3 * i + 3] = -2.0 * x[i] * r
        ja[k, 9 + 3 * j:9 + 3 * j + 3] = 2.0 * x[j] * r
    return ja


def p3p_system() -> ConstraintSystem:
    """Three squared-distance equations linking depths to scene geometry.

    Unknowns are the three depths x; parameters are the 18 packed scene
    numbers. Jacobians are closed form.
    """
    return ConstraintSystem(
        n_x=3, n_a=18, n_eq=3,
        residual=_p3p_residual, jac_x=_p3p_jac_x, jac_a=_p3p_jac_a,
    )


# ---------------------------------------------------------------------------
# essential matrix from five matches


def pack_matches(q: np.ndarray, qt: np.ndarray) -> np.ndarray:
    """Interleave n matches into [q1x, q1y, qt1x, qt1y, ...]."""
    q = np.asarray(q, dtype=float)
    qt = np.asarray(qt, dtype=float)
    return np.column_stack([q[:, 0], q[:, 1], qt[:, 0], qt[:, 1]]).ravel()


def unpack_matches(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of pack_matches; returns homogeneous (n, 3) arrays, z = 1."""
    w = np.asarray(w, dtype=float).reshape(-1, 4)
    n = w.shape[0]
    q = np.column_stack([w[:, 0], w[:, 1], np.ones(n)])
    qt = np.column_stack([w[:, 2], w[:, 3], np.ones(n)])
    return q, qt


def cubic_trace_term(e: np.ndarray) -> np.ndarray:
    """2 E E^T E - trace(E E^T) E, the rank/scale constraint of an essential matrix."""
    eet = e @ e.T
    return 2.0 * eet @ e - np.trace(eet) * e


def cubic_trace_differential(e: np.ndarray, de: np.ndarray) -> np.ndarray:
    """Directional derivative of ``cubic_trace_term`` at e along de."""
    return (
        2.0 * (de @ e.T @ e + e @ de.T @ e + e @ e.T @ de)
        - 2.0 * np.trace(de @ e.T) * e
        - np.trace(e @ e.T) * de
    )


def cubic_trace_jacobian(e: np.ndarray) -> np.ndarray:
    """9x9 Jacobian of the flattened trace term w.r.t. vec(E)."""
    eye = np.eye(3)
    eet = e @ e.T
    ete = e.T @ e
    jac = 2.0 * (
        np.einsum("ac,db->abcd", eye, ete)
        + np.einsum("ad,cb->abcd", e, e)
        + np.einsum("bd,ac->abcd", eye, eet)
        - np.einsum("ab,cd->abcd", e, e)
    ) - np.trace(eet) * np.einsum("ac,bd->abcd", eye, eye)
    return jac.reshape(9, 9)


def _essential_residual(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    e = x.reshape(3, 3)
    q, qt = unpack_matches(w)
    epi = np.einsum("ni,ij,nj->n", qt, e, q)
    norm_row = np.sum(e * e) - 1.0
    return np.concatenate([epi, [norm_row], cubic_trace_term(e).ravel()])


def _essential_jac_x(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    e = x.reshape(3, 3)
    q, qt = unpack_matches(w)
    jac = np.zeros((15, 9))
    jac[:5] = np.einsum("ni,nj->nij", qt, q).reshape(5, 9)
    jac[5] = 2.0 * x
    jac[6:] = cubic_trace_jacobian(e)
    return jac


def _essential_jac_a(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    e = x.reshape(3, 3)
    q, qt = unpack_matches(w)
    jac = np.zeros((15, 20))
    eq = q @ e.T  # row i = E q_i
    et_qt = qt @ e  # row i = E^T qt_i
    for i in range(5):
        jac[i, 4 * i + 0] = et_qt[i, 0]
        jac[i, 4 * i + 1] = et_qt[i, 1]
        jac[i, 4 * i + 2] = eq[i, 0]
        jac[i, 4 * i + 3] = eq[i, 1]
    return jac


def essential_system() -> ConstraintSystem:
    """Fifteen equations pinning an essential matrix to five matches.

    Rows: five epipolar products, the unit-Frobenius-norm row, and the
    nine entries of the cubic trace term. Unknowns are vec(E); the 20
    parameters are the packed match coordinates.
    """
    return ConstraintSystem(
        n_x=9, n_a=20, n_eq=15,
        residual=_essential_residual, jac_x=_essential_jac_x, jac_a=_essential_jac_a,
    )


def reduce_essential_jacobian(
    sys_jx: np.ndarray,
    rng: np.random.Generator,
    max_retries: int = 5,
) -> tuple[np.ndarray, np.ndarray]:
    """Square 9x9 Jacobian from the 15x9 essential-system Jacobian.

    Keeps the five epipolar rows and the norm row, and replaces the nine
    trace rows by three random linear combinations of them (coefficients
    uniform in [-1, 1]). Retries with fresh coefficients until the result
    has full numerical rank, raising RankDeficient after ``max_retries``.
    """
    sys_jx = np.asarray(sys_jx, dtype=float)
    if sys_jx.shape != (15, 9):
        raise ValueError("expected the 15x9 essential-system Jacobian")
    for _ in range(max_retries):
        coeffs = rng.uniform(-1.0, 1.0, size=(3, 9))
        reduced = np.vstack([sys_jx[:6], coeffs @ sys_jx[6:]])
        if numerics.numerical_rank(reduced) == 9:
            return reduced, coeffs
    raise RankDeficient(
        f"no full-rank 9x9 reduction found in {max_retries} attempts"
    )


def reduce_rows(matrix: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Apply the same 6-keep / 3-combine reduction to a 15-row matrix."""
    matrix = np.asarray(matrix, dtype=float)
    return np.vstack([matrix[:6], coeffs @ matrix[6:]])


# ---------------------------------------------------------------------------
# upper-level losses


@dataclass(frozen=True)
class UpperLoss:
    """Scalar training loss on a model matrix, with its gradient."""

    tag: str
    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]


ARCCOS_CLAMP = 1e-7


def rotation_geodesic_loss(r_true: np.ndarray) -> UpperLoss:
    """Angle of the residual rotation against ``r_true``.

    The arccos argument is clamped to [-1 + eps, 1 - eps] with
    eps = 1e-7 so the gradient stays finite at zero and pi.
    """
    r_true = np.asarray(r_true, dtype=float)

    def value(r: np.ndarray) -> float:
        u = (np.trace(r @ r_true.T) - 1.0) / 2.0
        return float(np.arccos(np.clip(u, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)))

    def grad(r: np.ndarray) -> np.ndarray:
        u = (np.trace(r @ r_true.T) - 1.0) / 2.0
        u = np.clip(u, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)
        return -r_true / (2.0 * np.sqrt(1.0 - u * u))

    return UpperLoss(tag="rotation-geodesic", value=value, grad=grad)


def frobenius_to_gt_loss(m_true: np.ndarray) -> UpperLoss:
    """Squared Frobenius distance to a ground-truth matrix, sign-folded.

    Model matrices are only defined up to sign, so the nearer of +/-
    ``m_true`` is used; the gradient follows the chosen branch.
    """
    m_true = np.asarray(m_true, dtype=float)

    def fold(m: np.ndarray) -> float:
        return 1.0 if np.sum(m * m_true) >= 0 else -1.0

    def value(m: np.ndarray) -> float:
        d = m - fold(m) * m_true
        return float(np.sum(d * d))

    def grad(m: np.ndarray) -> np.ndarray:
        return 2.0 * (m - fold(m) * m_true)

    return UpperLoss(tag="frobenius-to-gt", value=value, grad=grad)


LINE_NORM_EPS = 1e-12


class DegenerateLine(RuntimeError):
    """All epipolar-line normal components underflowed the guard."""


def epipolar_upper_loss(
    e: np.ndarray, q: np.ndarray, qt: np.ndarray, inliers: np.ndarray
) -> tuple[float, np.ndarray]:
    """Symmetric epipolar distance over an inlier set, with gradient.

    q and qt are (n, 3) homogeneous points (z = 1); ``inliers`` indexes
    the rows to average over. Squared epipolar products are weighted by
    the inverse squared norms of the line normals in both images, each
    denominator guarded by 1e-12.
    """
    e = np.asarray(e, dtype=float)
    inliers = np.asarray(inliers, dtype=int)
    if inliers.size == 0:
        raise ValueError("inlier set is empty")
    qi = np.asarray(q, dtype=float)[inliers]
    qti = np.asarray(qt, dtype=float)[inliers]

    lines2 = qi @ e.T          # row i = E q_i, line in image 2
    lines1 = qti @ e           # row i = E^T qt_i, line in image 1
    d1 = lines1[:, 0] ** 2 + lines1[:, 1] ** 2
    d2 = lines2[:, 0] ** 2 + lines2[:, 1] ** 2
    if np.all(np.maximum(d1, d2) < LINE_NORM_EPS):
        raise DegenerateLine("all epipolar-line norms underflow the guard")
    d1 = d1 + LINE_NORM_EPS
    d2 = d2 + LINE_NORM_EPS
    r = np.einsum("ni,ij,nj->n", qti, e, qi)
    weights = 1.0 / d1 + 1.0 / d2
    n = inliers.size
    value = float(np.sum(weights * r * r) / n)

    grad = np.zeros((3, 3))
    trunc1 = lines1.copy()
    trunc1[:, 2] = 0.0
    trunc2 = lines2.copy()
    trunc2[:, 2] = 0.0
    for i in range(n):
        grad += 2.0 * weights[i] * r[i] * np.outer(qti[i], qi[i])
        grad -= (r[i] ** 2 / d1[i] ** 2) * 2.0 * np.outer(qti[i], trunc1[i])
        grad -= (r[i] ** 2 / d2[i] ** 2) * 2.0 * np.outer(trunc2[i], qi[i])
    return value, grad / n


def symmetric_epipolar_upper_loss(
    q: np.ndarray, qt: np.ndarray, inliers: np.ndarray
) -> UpperLoss:
    """``epipolar_upper_loss`` bound to a fixed match set."""
    return UpperLoss(
        tag="symmetric-epipolar",
        value=lambda e: epipolar_upper_loss(e, q, qt, inliers)[0],
        grad=lambda e: epipolar_upper_loss(e, q, qt, inliers)[1],
    )


# ---------------------------------------------------------------------------
# registration: weighted point alignment over rotations

_SYM_INDEX = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def registration_losses(
    p: np.ndarray, q: np.ndarray, r_true: np.ndarray | None = None
) -> tuple[ObjectiveDerivatives, ConstraintDerivatives, UpperLoss | None]:
    """Weighted alignment objective, orthogonality constraints, geodesic loss.

    The objective is f(w, R) = (1/n) sum_i w_i ||R p_i - q_i||^2 over
    y = vec(R) with parameters w. The constraint set is the six upper
    triangle entries of R^T R - I (symmetric multiplier parameterization
    keeps the KKT system square). The upper loss is omitted when
    ``r_true`` is None.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = p.shape[0]

    def value(y: np.ndarray, w: np.ndarray) -> float:
        r = y.reshape(3, 3)
        res = p @ r.T - q
        return float(np.sum(w * np.sum(res * res, axis=1)) / n)

    def grad_y(y: np.ndarray, w: np.ndarray) -> np.ndarray:
        r = y.reshape(3, 3)
        res = p @ r.T - q
        return (2.0 / n) * np.einsum("i,ia,ib->ab", w, res, p).ravel()

    def hess_yy(y: np.ndarray, w: np.ndarray) -> np.ndarray:
        gram = (2.0 / n) * np.einsum("i,ia,ib->ab", w, p, p)
        return np.kron(np.eye(3), gram)

    def hess_yw(y: np.ndarray, w: np.ndarray) -> np.ndarray:
        r = y.reshape(3, 3)
        res = p @ r.T - q
        return (2.0 / n) * np.einsum("ia,ib->abi", res, p).reshape(9, n)

    f = ObjectiveDerivatives(n_y=9, n_w=n, value=value, grad_y=grad_y,
                             hess_yy=hess_yy, hess_yw=hess_yw)

    def h_value(y: np.ndarray) -> np.ndarray:
        r = y.reshape(3, 3)
        g = r.T @ r - np.eye(3)
        return np.array([g[a, b] for a, b in _SYM_INDEX])

    def h_jac(y: np.ndarray) -> np.ndarray:
        r = y.reshape(3, 3)
        rows = []
        for a, b in _SYM_INDEX:
            g = np.zeros((3, 3))
            g[:, a] += r[:, b]
            g[:, b] += r[:, a]
            rows.append(g.ravel())
        return np.array(rows)

    def h_hess(y: np.ndarray) -> np.ndarray:
        out = np.zeros((6, 9, 9))
        for k, (a, b) in enumerate(_SYM_INDEX):
            s = np.zeros((3, 3))
            s[a, b] += 1.0
            s[b, a] += 1.0
            out[k] = np.kron(np.eye(3), s)
        return out

    h = ConstraintDerivatives(n_con=6, value=h_value, jac=h_jac, hess=h_hess)
    upper = rotation_geodesic_loss(r_true) if r_true is not None else None
    return f, h, upper


# ---------------------------------------------------------------------------
# fundamental matrix: weighted algebraic epipolar objective


def cofactor_matrix(m: np.ndarray) -> np.ndarray:
    """Cofactor matrix of a 3x3 matrix; also the gradient of det."""
    return np.array([
        np.cross(m[1], m[2]),
        np.cross(m[2], m[0]),
        np.cross(m[0], m[1]),
    ])


def _cofactor_bilinear(m: np.ndarray, d: np.ndarray) -> np.ndarray:
    # Directional derivative of the (quadratic) cofactor map.
    return cofactor_matrix(m + d) - cofactor_matrix(m) - cofactor_matrix(d)


def fundamental_losses(
    p: np.ndarray, pt: np.ndarray, f_true: np.ndarray | None = None
) -> tuple[ObjectiveDerivatives, ConstraintDerivatives, UpperLoss | None]:
    """Weighted algebraic epipolar objective with {det F, ||F||^2 - 1}.

    p and pt are (n, 3) homogeneous matches (z = 1). The objective is
    f(w, F) = (1/n) sum_i w_i (pt_i^T F p_i)^2 over y = vec(F); the two
    constraints carry two multipliers, so the KKT system is 11x11.
    """
    p = np.asarray(p, dtype=float)
    pt = np.asarray(pt, dtype=float)
    n = p.shape[0]
    design = np.einsum("ni,nj->nij", pt, p).reshape(n, 9)

    def value(y: np.ndarray, w: np.ndarray) -> float:
        r = design @ y
        return float(np.sum(w * r * r) / n)

    def grad_y(y: np.ndarray, w: np.ndarray) -> np.ndarray:
        r = design @ y
        return (2.0 / n) * design.T @ (w * r)

    def hess_yy(y: np.ndarray, w: np.ndarray) -> np.ndarray:
        return (2.0 / n) * design.T @ (w[:, None] * design)

    def hess_yw(y: np.ndarray, w: np.ndarray) -> np.ndarray:
        r = design @ y
        return (2.0 / n) * design.T * r[None, :]

    f = ObjectiveDerivatives(n_y=9, n_w=n, value=value, grad_y=grad_y,
                             hess_yy=hess_yy, hess_yw=hess_yw)

    def h_value(y: np.ndarray) -> np.ndarray:
        m = y.reshape(3, 3)
        return np.array([np.linalg.det(m), y @ y - 1.0])

    def h_jac(y: np.ndarray) -> np.ndarray:
        m = y.reshape(3, 3)
        return np.vstack([cofactor_matrix(m).ravel(), 2.0 * y])

    def h_hess(y: np.ndarray) -> np.ndarray:
        m = y.reshape(3, 3)
        out = np.zeros((2, 9, 9))
        for k in range(9):
            d = np.zeros(9)
            d[k] = 1.0
            out[0, :, k] = _cofactor_bilinear(m, d.reshape(3, 3)).ravel()
        out[1] = 2.0 * np.eye(9)
        return out

    h = ConstraintDerivatives(n_con=2, value=h_value, jac=h_jac, hess=h_hess)
    upper = frobenius_to_gt_loss(f_true) if f_true is not None else None
    return f, h, upper

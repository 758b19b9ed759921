"""Forward minimal-problem solvers.

Every solver returns models that satisfy their defining polynomial
system to well below 1e-6 (roots are Newton/Gauss-Newton polished), so
the implicit-differentiation engine can take them as exact roots.
Model matrices are normalized to unit Frobenius norm with the
largest-magnitude entry positive.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import product

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import numerics, systems


class DegenerateConfiguration(RuntimeError):
    """Input geometry does not determine the model (collinear, rank-deficient...)."""


class NoRealSolution(RuntimeError):
    """The minimal solver found no real candidate."""


class EmptyCandidates(ValueError):
    """Selection requested from an empty candidate set."""


def fix_sign(m: np.ndarray) -> np.ndarray:
    """Flip sign so the largest-magnitude entry is positive (ties: lowest index)."""
    flat = np.abs(m).ravel()
    return -m if m.ravel()[np.argmax(flat)] < 0 else m.copy()


def folded_distance(m: np.ndarray, ref: np.ndarray) -> float:
    """Frobenius distance between sign-ambiguous matrices."""
    return float(min(np.linalg.norm(m - ref), np.linalg.norm(m + ref)))


def fold_to(m: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Return +/- m, whichever is closer to ref."""
    return m if np.linalg.norm(m - ref) <= np.linalg.norm(m + ref) else -m


# ---------------------------------------------------------------------------
# problem instances


@dataclass(frozen=True)
class P3pInstance:
    """Three 3D points (rows of ``points``) and homogeneous viewing directions."""

    points: np.ndarray
    dirs: np.ndarray

    def __post_init__(self):
        points = numerics.check_finite(self.points, "points").reshape(3, 3)
        dirs = numerics.check_finite(self.dirs, "dirs").reshape(3, 3)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "dirs", dirs)
        span = np.cross(points[1] - points[0], points[2] - points[0])
        scale = max(1.0, float(np.max(np.abs(points))))
        if np.linalg.norm(span) <= 1e-12 * scale * scale:
            raise DegenerateConfiguration("3D points are collinear")
        if np.any(np.abs(dirs[:, 2]) < 1e-12):
            raise DegenerateConfiguration("image direction has zero third coordinate")

    def params(self) -> np.ndarray:
        return systems.pack_p3p_params(self.points, self.dirs)

    @classmethod
    def from_params(cls, a: np.ndarray) -> "P3pInstance":
        points, dirs = systems.unpack_p3p_params(a)
        return cls(points=points, dirs=dirs)

    @classmethod
    def from_depths(cls, depths: np.ndarray, dirs: np.ndarray) -> "P3pInstance":
        """Scene whose exact depth solution is ``depths`` (points = depth * dir)."""
        dirs = np.asarray(dirs, dtype=float).reshape(3, 3)
        depths = np.asarray(depths, dtype=float).reshape(3)
        return cls(points=depths[:, None] * dirs, dirs=dirs)


@dataclass(frozen=True)
class RegistrationInstance:
    """Weighted 3D point correspondences p_i <-> q_i with a reference rotation."""

    p: np.ndarray
    q: np.ndarray
    w: np.ndarray
    r_true: np.ndarray

    def __post_init__(self):
        p = numerics.check_finite(self.p, "p")
        q = numerics.check_finite(self.q, "q")
        w = numerics.check_finite(self.w, "w")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "r_true", numerics.check_finite(self.r_true, "r_true"))
        n = p.shape[0]
        if not (p.shape == q.shape == (n, 3) and w.shape == (n,) and n >= 3):
            raise ValueError("need n >= 3 matched 3D points with one weight each")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")

    @property
    def n(self) -> int:
        return self.p.shape[0]


def _canonical_homogeneous(pts: np.ndarray, name: str) -> np.ndarray:
    pts = numerics.check_finite(pts, name)
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise ValueError(f"{name} must be (n, 2) or (n, 3)")
    if pts.shape[1] == 2:
        return np.column_stack([pts, np.ones(len(pts))])
    if not np.allclose(pts[:, 2], 1.0, rtol=0, atol=1e-12):
        raise ValueError(f"{name} must be stored with third coordinate exactly 1")
    return pts


@dataclass(frozen=True)
class EpipolarInstance:
    """Two-view correspondences in canonical homogeneous form (z = 1)."""

    q: np.ndarray
    qt: np.ndarray
    weights: np.ndarray | None = None
    sample: np.ndarray | None = None
    e_gt: np.ndarray | None = None
    f_true: np.ndarray | None = None
    inliers: np.ndarray | None = None

    def __post_init__(self):
        q = _canonical_homogeneous(self.q, "q")
        qt = _canonical_homogeneous(self.qt, "qt")
        if q.shape != qt.shape:
            raise ValueError("match arrays must have equal shapes")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qt", qt)
        if self.weights is not None:
            w = numerics.check_finite(self.weights, "weights")
            if w.shape != (q.shape[0],):
                raise ValueError("one weight per match required")
            object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def minimal_sample(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.arange(5) if self.sample is None else np.asarray(self.sample)
        return self.q[idx], self.qt[idx]


@dataclass(frozen=True)
class ModelCandidateSet:
    """Finite solution set of a minimal solver, optionally with a selection."""

    candidates: tuple[np.ndarray, ...]
    selected_index: int | None = None
    selection_distance: float | None = None

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def selected(self) -> np.ndarray:
        if self.selected_index is None:
            raise EmptyCandidates("no selection has been made")
        return self.candidates[self.selected_index]


def select_closest(cands: ModelCandidateSet, gt: np.ndarray) -> ModelCandidateSet:
    """Pick the sign-folded closest candidate to a unit-norm ground truth.

    Ties break to the lowest index.
    """
    if len(cands) == 0:
        raise EmptyCandidates("candidate list is empty")
    gt = np.asarray(gt, dtype=float)
    if abs(np.linalg.norm(gt) - 1.0) > 1e-8:
        raise ValueError("ground-truth model must be normalized to unit Frobenius norm")
    dists = np.array([folded_distance(m, gt) for m in cands.candidates])
    idx = int(np.argmin(dists))
    return replace(cands, selected_index=idx, selection_distance=float(dists[idx]))


# ---------------------------------------------------------------------------
# absolute pose: depths of three points


def _newton_polish_p3p(x: np.ndarray, a: np.ndarray, tol: float) -> np.ndarray | None:
    # Iterate to numerical convergence (no improvement), then accept if
    # the residual meets the contract; the extra iterations reduce root
    # noise to the machine floor, which downstream finite differences see.
    sys3 = systems.p3p_system()
    best_x = None
    best = np.inf
    for _ in range(20):
        r = sys3.residual(x, a)
        res = float(np.max(np.abs(r)))
        if res < best:
            best = res
            best_x = x.copy()
        elif best_x is not None:
            break
        if res == 0.0:
            break
        jx = sys3.jac_x(x, a)
        try:
            x = x - np.linalg.solve(jx, r)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(x)):
            break
    return best_x if best <= tol else None


def solve_p3p(inst: P3pInstance, positive_only: bool = False) -> list[np.ndarray]:
    """All real depth triples solving the three-point pose system.

    By default returns every real root (both signs included; downstream
    differentiation needs roots, not physically feasible poses), each
    polished so the residuals are below 1e-8, deduplicated and sorted.
    ``positive_only`` keeps only all-positive depth triples.
    """
    pts, dirs = inst.points, inst.dirs
    norms = np.linalg.norm(dirs, axis=1)
    rays = dirs / norms[:, None]
    a2 = float(np.sum((pts[1] - pts[2]) ** 2))  # opposite ray 1
    b2 = float(np.sum((pts[0] - pts[2]) ** 2))  # opposite ray 2
    c2 = float(np.sum((pts[0] - pts[1]) ** 2))  # opposite ray 3
    if min(a2, b2, c2) <= 0.0:
        raise DegenerateConfiguration("coincident 3D points")
    cos_a = float(rays[1] @ rays[2])
    cos_b = float(rays[0] @ rays[2])
    cos_g = float(rays[0] @ rays[1])

    # Two quadratics in u (= s2/s1) with coefficients polynomial in v (= s3/s1);
    # eliminating u by the resultant leaves a quartic in v.
    p2 = np.array([b2])
    p1 = np.array([-2.0 * b2 * cos_g])
    p0 = np.array([b2 - c2, 2.0 * c2 * cos_b, -c2])
    q2 = np.array([b2])
    q1 = np.array([0.0, -2.0 * b2 * cos_a])
    q0 = np.array([-a2, 2.0 * a2 * cos_b, b2 - a2])

    lead = npoly.polysub(npoly.polymul(p2, q0), npoly.polymul(p0, q2))
    quartic = npoly.polysub(
        npoly.polymul(lead, lead),
        npoly.polymul(
            npoly.polysub(npoly.polymul(p1, q0), npoly.polymul(p0, q1)),
            npoly.polysub(npoly.polymul(p2, q1), npoly.polymul(p1, q2)),
        ),
    )
    scale = float(np.max(np.abs(quartic)))
    if not np.isfinite(scale) or scale <= 1e-14 * max(a2, b2, c2) ** 2:
        raise DegenerateConfiguration("pose quartic degenerates")
    quartic = npoly.polytrim(quartic / scale, tol=1e-14)
    if len(quartic) < 2:
        raise DegenerateConfiguration("pose quartic degenerates")
    vroots = npoly.polyroots(quartic)

    h_tol = 1e-8
    sys_a = inst.params()
    roots: list[np.ndarray] = []
    for v in vroots:
        if abs(v.imag) > 1e-6 * (1.0 + abs(v.real)):
            continue
        v = float(v.real)
        # u from g1, a plain quadratic: u^2 - 2 cos_g u + p0(v)/b2 = 0
        disc = cos_g * cos_g - npoly.polyval(v, p0) / b2
        if disc < -1e-9:
            continue
        disc = max(disc, 0.0)
        denom = 1.0 + v * v - 2.0 * v * cos_b
        if denom <= 1e-14:
            continue
        s1 = np.sqrt(b2 / denom)
        for u in (cos_g + np.sqrt(disc), cos_g - np.sqrt(disc)):
            for sign in (1.0, -1.0):
                s = sign * s1
                x0 = np.array([s / norms[0], u * s / norms[1], v * s / norms[2]])
                x = _newton_polish_p3p(x0, sys_a, h_tol)
                if x is None:
                    continue
                if not any(
                    np.max(np.abs(x - r)) <= 1e-6 * (1.0 + np.max(np.abs(r)))
                    for r in roots
                ):
                    roots.append(x)
    if positive_only:
        roots = [r for r in roots if np.all(r > 0)]
    roots.sort(key=lambda r: tuple(r))
    return roots


# ---------------------------------------------------------------------------
# weighted rotation alignment


def solve_kabsch(inst: RegistrationInstance) -> np.ndarray:
    """Rotation minimizing the weighted alignment error, via SVD.

    Uses the orientation-corrected SVD of the weighted cross-covariance
    sum_i w_i p_i q_i^T.
    """
    cov = np.einsum("i,ia,ib->ab", inst.w, inst.p, inst.q)
    if numerics.numerical_rank(cov, tol=1e-12 * max(1.0, float(np.max(np.abs(cov))))) < 2:
        raise DegenerateConfiguration("weighted cross-covariance has rank < 2")
    res = numerics.svd(cov)
    u, v = res.u, res.v
    d = np.sign(np.linalg.det(v @ u.T))
    return v @ np.diag([1.0, 1.0, d]) @ u.T


# ---------------------------------------------------------------------------
# fundamental matrix: weighted 8-point


def conditioning_transform(points: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin, mean radius to sqrt(2).

    Depends on the match coordinates only (never on weights), so chained
    derivatives with respect to weights pass through it as a constant.
    """
    xy = points[:, :2]
    centroid = xy.mean(axis=0)
    mean_dist = float(np.mean(np.linalg.norm(xy - centroid, axis=1)))
    if mean_dist < 1e-12:
        raise DegenerateConfiguration("coincident image points")
    s = np.sqrt(2.0) / mean_dist
    return np.array([
        [s, 0.0, -s * centroid[0]],
        [0.0, s, -s * centroid[1]],
        [0.0, 0.0, 1.0],
    ])


def normalized_problem(inst: EpipolarInstance) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Conditioned matches and their transforms: (qn, qtn, t1, t2)."""
    t1 = conditioning_transform(inst.q)
    t2 = conditioning_transform(inst.qt)
    return inst.q @ t1.T, inst.qt @ t2.T, t1, t2


def _eight_point_conditioned(qn: np.ndarray, qtn: np.ndarray, w: np.ndarray) -> np.ndarray:
    design = np.sqrt(w)[:, None] * np.einsum("ni,nj->nij", qtn, qn).reshape(len(w), 9)
    if numerics.numerical_rank(design) < 8:
        raise DegenerateConfiguration("weighted design matrix has rank < 8")
    res = numerics.svd(design)
    f0 = res.v[:, 8].reshape(3, 3)
    fr = numerics.svd(f0)
    sig = fr.sigma.copy()
    sig[2] = 0.0
    f2 = fr.u @ np.diag(sig) @ fr.v.T
    return fix_sign(f2 / np.linalg.norm(f2))


def solve_fundamental_8pt(inst: EpipolarInstance) -> np.ndarray:
    """Weighted 8-point estimate, projected to rank 2 and normalized.

    Matches are conditioned to zero-mean unit-ish scale first. In the
    conditioned frame, rows of the 9-column design matrix are scaled by
    sqrt(w_i), the smallest right singular vector is reshaped, its
    smallest singular value zeroed, and the result mapped back to the
    input frame and renormalized with a deterministic sign.
    """
    if inst.n < 8:
        raise ValueError("need at least 8 matches")
    w = inst.weights if inst.weights is not None else np.ones(inst.n)
    qn, qtn, t1, t2 = normalized_problem(inst)
    fn = _eight_point_conditioned(qn, qtn, w)
    f_raw = t2.T @ fn @ t1
    return fix_sign(f_raw / np.linalg.norm(f_raw))


# ---------------------------------------------------------------------------
# essential matrix: five-point minimal solver

_DEG1 = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_MONO2 = [
    (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1),
    (0, 0, 2), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0),
]
_MONO3 = [
    (3, 0, 0), (2, 1, 0), (2, 0, 1), (1, 2, 0), (1, 1, 1),
    (1, 0, 2), (0, 3, 0), (0, 2, 1), (0, 1, 2), (0, 0, 3),
] + _MONO2


def _mul_table(left, right, out):
    index = {e: k for k, e in enumerate(out)}
    table = np.zeros((len(out), len(left), len(right)))
    for (i, ei), (j, ej) in product(enumerate(left), enumerate(right)):
        table[index[tuple(np.add(ei, ej))], i, j] = 1.0
    return table


_MUL11 = _mul_table(_DEG1, _DEG1, _MONO2)  # deg1 x deg1 -> deg2
_MUL21 = _mul_table(_MONO2, _DEG1, _MONO3)  # deg2 x deg1 -> deg3


def _fixed_basis_mixes() -> list[np.ndarray]:
    # Generic orthogonal changes of nullspace coordinates. The first is
    # applied always so special geometries (e.g. pure translation) do not
    # land a solution at infinity of the monomial chart; the rest are
    # retries when the leading elimination block degenerates.
    gen = np.random.default_rng(271828182845)
    return [np.linalg.qr(gen.normal(size=(4, 4)))[0] for _ in range(4)]


_BASIS_MIXES = _fixed_basis_mixes()


def _constraint_rows(basis: np.ndarray) -> np.ndarray:
    """10x20 coefficient matrix of det(E) and the trace term over the nullspace.

    ``basis`` is (4, 3, 3): E(x, y, z) = x B0 + y B1 + z B2 + B3, so each
    entry of E is a degree-1 polynomial and the ten cubic constraints
    expand over the 20 monomials of degree <= 3.
    """
    e = basis.reshape(4, 9).T.reshape(3, 3, 4)  # e[a, b] = coeffs of E[a, b]

    def mul11(a, b):
        return np.einsum("kij,i,j->k", _MUL11, a, b)

    def mul21(a, b):
        return np.einsum("kij,i,j->k", _MUL21, a, b)

    # Gram entries P[a, c] = sum_b E[a, b] E[c, b], each degree 2.
    gram = np.einsum("kij,abi,cbj->ack", _MUL11, e, e)
    trace2 = gram[0, 0] + gram[1, 1] + gram[2, 2]

    rows = np.empty((10, 20))
    minors = [
        mul11(e[1, 1], e[2, 2]) - mul11(e[1, 2], e[2, 1]),
        mul11(e[1, 0], e[2, 2]) - mul11(e[1, 2], e[2, 0]),
        mul11(e[1, 0], e[2, 1]) - mul11(e[1, 1], e[2, 0]),
    ]
    rows[0] = mul21(minors[0], e[0, 0]) - mul21(minors[1], e[0, 1]) + mul21(minors[2], e[0, 2])
    rows[1:] = (
        2.0 * np.einsum("mij,aki,kbj->abm", _MUL21, gram, e)
        - np.einsum("mij,i,abj->abm", _MUL21, trace2, e)
    ).reshape(9, 20)
    return rows


def _polish_essential(vec_e: np.ndarray, w: np.ndarray) -> np.ndarray | None:
    # Gauss-Newton to numerical convergence; root noise sets the floor of
    # downstream finite differences, so do not stop at a loose tolerance.
    sys_e = systems.essential_system()
    best = np.inf
    best_x = vec_e
    for _ in range(10):
        r = sys_e.residual(vec_e, w)
        res = float(np.max(np.abs(r)))
        if res < best:
            best = res
            best_x = vec_e.copy()
        elif best < 1e-10:
            break
        if res == 0.0:
            break
        jx = sys_e.jac_x(vec_e, w)
        step, *_ = np.linalg.lstsq(jx, r, rcond=None)
        vec_e = vec_e - step
        if not np.all(np.isfinite(vec_e)):
            break
    e = best_x.reshape(3, 3)
    norm = np.linalg.norm(e)
    if norm < 1e-8:
        return None
    e = fix_sign(e / norm)
    if np.max(np.abs(sys_e.residual(e.ravel(), w))) > 1e-6:
        return None
    return e


def solve_essential_5pt(q: np.ndarray, qt: np.ndarray) -> ModelCandidateSet:
    """Up to ten real essential matrices fitting five matches exactly.

    Nullspace of the 5x9 epipolar design is expanded through the cubic
    determinant and trace constraints into a 10x20 coefficient matrix;
    Gauss-Jordan reduction yields a 10x10 action matrix whose real
    eigenvectors encode the candidates. Candidates are Gauss-Newton
    polished on the full 15-equation system and kept only if every
    residual is below 1e-6.
    """
    q = _canonical_homogeneous(np.asarray(q, dtype=float), "q")
    qt = _canonical_homogeneous(np.asarray(qt, dtype=float), "qt")
    if q.shape[0] != 5 or qt.shape[0] != 5:
        raise ValueError("exactly five matches required")
    design = np.einsum("ni,nj->nij", qt, q).reshape(5, 9)
    dec = numerics.svd(design)
    if np.count_nonzero(dec.sigma > numerics.default_rank_tol(design, dec.sigma[0])) < 5:
        raise DegenerateConfiguration("5x9 design matrix is rank deficient")
    nullspace = dec.v[:, 5:].T.reshape(4, 9)

    w = systems.pack_matches(q, qt)
    solved = False
    candidates: list[np.ndarray] = []
    for mix in _BASIS_MIXES:
        basis = (mix @ nullspace).reshape(4, 3, 3)
        rows = _constraint_rows(basis)
        lead_sigma = np.linalg.svd(rows[:, :10], compute_uv=False)
        if lead_sigma[-1] <= 1e-12 * lead_sigma[0]:
            continue  # elimination block degenerates in this chart; remix
        reduced = np.linalg.solve(rows[:, :10], rows[:, 10:])

        action = np.zeros((10, 10))
        action[:6] = -reduced[:6]
        action[6, 0] = 1.0  # x * x = x^2
        action[7, 1] = 1.0  # x * y = xy
        action[8, 2] = 1.0  # x * z = xz
        action[9, 6] = 1.0  # x * 1 = x
        try:
            vals, vecs = np.linalg.eig(action)
        except np.linalg.LinAlgError as exc:
            raise numerics.ConvergenceFailure(
                f"action-matrix eigensolver failed: {exc}"
            ) from exc

        solved = True
        order = np.argsort(vals.real, kind="stable")
        for k in order:
            if abs(vals[k].imag) > 1e-6 * (1.0 + abs(vals[k].real)):
                continue
            vec = np.real(vecs[:, k])
            if abs(vec[9]) < 1e-12 * np.linalg.norm(vec):
                continue
            xyz = vec[6:9] / vec[9]
            e = np.tensordot(np.append(xyz, 1.0), basis, axes=1)
            norm = np.linalg.norm(e)
            if norm < 1e-10:
                continue
            e = _polish_essential((e / norm).ravel(), w)
            if e is None:
                continue
            if all(folded_distance(e, c) > 1e-6 for c in candidates):
                candidates.append(e)
        break
    if not solved:
        raise DegenerateConfiguration("constraint reduction failed in every chart")
    if not candidates:
        raise NoRealSolution("no real essential matrix for this sample")
    candidates.sort(key=lambda m: tuple(m.ravel()))
    return ModelCandidateSet(candidates=tuple(candidates[:10]))

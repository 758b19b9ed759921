"""Interchangeable backward passes producing dJ/dw for each problem.

Four routes are implemented:

* ift-direct        -- implicit differentiation of the defining
                       polynomial system (absolute pose, essential);
* kkt-ift           -- implicit differentiation of the stationarity +
                       feasibility system of the inner optimization
                       (registration, fundamental);
* svd-closed-form   -- explicit derivatives of the SVD-based forward
                       computations (registration, fundamental);
* finite-difference -- central differences re-running the forward
                       solver with solution tracking (every problem;
                       this is the reference oracle).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import numerics, systems
from .ift import NotARoot, RankDeficient, build_kkt, ift_jacobian, recover_multipliers
from .solvers import (
    EpipolarInstance,
    P3pInstance,
    RegistrationInstance,
    fold_to,
    solve_essential_5pt,
    solve_fundamental_8pt,
    solve_kabsch,
    solve_p3p,
)


class DegenerateSpectrum(RuntimeError):
    """Coinciding singular values break the closed-form SVD derivative."""


class TrackingFailure(RuntimeError):
    """The finite-difference oracle lost its root between perturbations."""


#: backward methods applicable to each problem (finite-difference works
#: everywhere and doubles as the oracle).
APPLICABLE_METHODS = {
    "p3p": ("ift-direct",),
    "registration": ("kkt-ift", "svd-closed-form"),
    "fundamental": ("kkt-ift", "svd-closed-form"),
    "essential": ("ift-direct",),
}


@dataclass(frozen=True)
class GradientReport:
    """dJ/dw plus bookkeeping for stability and timing studies."""

    dJdw: np.ndarray
    wall_time: float
    rank_failures: int = 0
    fallback_used: bool = False


# ---------------------------------------------------------------------------
# absolute pose


def p3p_solution_jacobian(x: np.ndarray, inst: P3pInstance) -> np.ndarray:
    """dx/da (3x18) of a depth root via the defining system."""
    sol = ift_jacobian(systems.p3p_system(), x, inst.params())
    if sol.rank_deficient:
        raise RankDeficient("pose system Jacobian is singular at this root")
    return sol.dxda


def backward_p3p(x: np.ndarray, inst: P3pInstance, dj_dx: np.ndarray) -> GradientReport:
    """Chain an upper gradient in the depths through to the 18 scene parameters."""
    start = time.perf_counter()
    dxda = p3p_solution_jacobian(x, inst)
    djda = np.asarray(dj_dx, dtype=float) @ dxda
    return GradientReport(dJdw=djda, wall_time=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# registration


def registration_kkt_jacobian(r: np.ndarray, inst: RegistrationInstance) -> np.ndarray:
    """dR/dw (9 x n) by implicit differentiation of the 15x15 KKT system."""
    f, h, _ = systems.registration_losses(inst.p, inst.q)
    kkt = build_kkt(f, h)
    y = np.asarray(r, dtype=float).ravel()
    lam, _ = recover_multipliers(kkt, y, inst.w)
    sol = ift_jacobian(kkt.base, np.concatenate([y, lam]), inst.w)
    if sol.rank_deficient:
        raise RankDeficient("KKT Jacobian is singular at this optimum")
    return sol.dxda[:9]


def backward_registration_kkt(
    r: np.ndarray, inst: RegistrationInstance, dj_dr: np.ndarray
) -> GradientReport:
    start = time.perf_counter()
    drdw = registration_kkt_jacobian(r, inst)
    djdw = np.asarray(dj_dr, dtype=float).ravel() @ drdw
    return GradientReport(dJdw=djdw, wall_time=time.perf_counter() - start)


SPECTRUM_GAP = 1e-8


def _svd_rotations(
    sigma: np.ndarray, a: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Differential of an SVD: A = U^T dM V gives dU = U Wu, dV = V Wv.

    Requires distinct singular values; the coupling denominators are
    sigma_j^2 - sigma_i^2.
    """
    k = len(sigma)
    wu = np.zeros((k, k))
    wv = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            denom = sigma[j] ** 2 - sigma[i] ** 2
            wu[i, j] = (sigma[j] * a[i, j] + sigma[i] * a[j, i]) / denom
            wv[i, j] = (sigma[i] * a[i, j] + sigma[j] * a[j, i]) / denom
            wu[j, i] = -wu[i, j]
            wv[j, i] = -wv[i, j]
    return wu, wv, np.diag(np.diag(a))


def _require_distinct(sigma: np.ndarray) -> None:
    gaps = np.abs(np.subtract.outer(sigma, sigma))
    np.fill_diagonal(gaps, np.inf)
    if np.min(gaps) <= SPECTRUM_GAP:
        raise DegenerateSpectrum(
            f"singular values coincide within {SPECTRUM_GAP:.0e}: {sigma}"
        )


def registration_svd_jacobian(inst: RegistrationInstance) -> np.ndarray:
    """dR/dw (9 x n) through the closed-form derivative of the SVD forward."""
    cov = np.einsum("i,ia,ib->ab", inst.w, inst.p, inst.q)
    dec = numerics.svd(cov)
    _require_distinct(dec.sigma)
    u, v, sigma = dec.u, dec.v, dec.sigma
    d = np.diag([1.0, 1.0, np.sign(np.linalg.det(v @ u.T))])
    out = np.empty((9, inst.n))
    for i in range(inst.n):
        dcov = np.outer(inst.p[i], inst.q[i])
        a = u.T @ dcov @ v
        wu, wv, _ = _svd_rotations(sigma, a)
        dr = v @ (wv @ d - d @ wu) @ u.T
        out[:, i] = dr.ravel()
    return out


def backward_registration_svd(
    r: np.ndarray, inst: RegistrationInstance, dj_dr: np.ndarray
) -> GradientReport:
    start = time.perf_counter()
    drdw = registration_svd_jacobian(inst)
    djdw = np.asarray(dj_dr, dtype=float).ravel() @ drdw
    return GradientReport(dJdw=djdw, wall_time=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# fundamental matrix


def _polish_kkt_root(kkt, x0: np.ndarray, w: np.ndarray, tol: float = 1e-10,
                     max_iter: int = 60) -> np.ndarray:
    """Newton-refine an approximate KKT point onto the exact root.

    Backtracks (halving the step) whenever a full Newton step would
    increase the residual, which keeps the iteration inside the basin.
    """
    x = np.asarray(x0, dtype=float).copy()
    res = np.asarray(kkt.base.residual(x, w), dtype=float)
    best = np.max(np.abs(res))
    for _ in range(max_iter):
        if best < tol:
            return x
        try:
            step = np.linalg.solve(kkt.base.jac_x(x, w), res)
        except np.linalg.LinAlgError as exc:
            raise RankDeficient(f"KKT Newton step is singular: {exc}") from exc
        scale = 1.0
        for _ in range(25):
            trial = x - scale * step
            trial_res = np.asarray(kkt.base.residual(trial, w), dtype=float)
            trial_norm = np.max(np.abs(trial_res))
            if np.isfinite(trial_norm) and trial_norm < best:
                x, res, best = trial, trial_res, trial_norm
                break
            scale *= 0.5
        else:
            raise NotARoot("KKT refinement stalled before reaching the root")
    raise NotARoot("KKT refinement did not reach the root tolerance")


def _chain_from_conditioned(
    dfn_dw: np.ndarray,
    fn: np.ndarray,
    t1: np.ndarray,
    t2: np.ndarray,
    f_mat: np.ndarray,
) -> np.ndarray:
    """Map d(conditioned F)/dw back to the raw frame and renormalize.

    The conditioning transforms are weight-independent, so they pass
    through the derivative as constants; the final unit normalization
    and the sign of the forward output are re-applied.
    """
    g = t2.T @ fn @ t1
    g_norm = np.linalg.norm(g)
    sign = 1.0 if np.sum(g * f_mat) >= 0 else -1.0
    out = np.empty_like(dfn_dw)
    for i in range(dfn_dw.shape[1]):
        dg = t2.T @ dfn_dw[:, i].reshape(3, 3) @ t1
        dn = dg / g_norm - g * (np.sum(g * dg) / g_norm**3)
        out[:, i] = sign * dn.ravel()
    return out


def _conditioned_estimate(
    f_mat: np.ndarray, t1: np.ndarray, t2: np.ndarray
) -> np.ndarray:
    g = np.linalg.inv(t2).T @ f_mat @ np.linalg.inv(t1)
    return g / np.linalg.norm(g)


def fundamental_kkt_jacobian(f_mat: np.ndarray, inst: EpipolarInstance) -> np.ndarray:
    """dF/dw (9 x n) via the 11x11 KKT system of the constrained fit.

    The system is posed on conditioned matches. The rank-2-projected
    forward estimate is not an exact constrained minimizer away from
    consistent data, so (F, lambda) is first Newton-refined onto the
    KKT root; the implicit derivative is taken there. What is
    differentiated is therefore the constrained optimum, not the
    projection.
    """
    f_mat = np.asarray(f_mat, dtype=float)
    from .solvers import normalized_problem

    qn, qtn, t1, t2 = normalized_problem(inst)
    fn = _conditioned_estimate(f_mat, t1, t2)
    f, h, _ = systems.fundamental_losses(qn, qtn)
    y = fn.ravel()
    feas = h.value(y)
    if np.max(np.abs(feas)) > 1e-6:
        raise NotARoot(f"constraints violated at the forward estimate: {feas}")
    kkt = build_kkt(f, h)
    lam, _ = recover_multipliers(kkt, y, inst.weights)
    start = np.concatenate([y, lam])
    try:
        x_root = _polish_kkt_root(kkt, start, inst.weights)
    except NotARoot:
        # Refinement can stall when the estimate sits far from the exact
        # optimum; the least-squares stationary point still gives a usable
        # first-order derivative there.
        x_root = start
    sol = ift_jacobian(kkt.base, x_root, inst.weights, residual_tol=None)
    if sol.rank_deficient:
        raise RankDeficient("KKT Jacobian is singular at this estimate")
    fn_root = x_root[:9].reshape(3, 3)
    return _chain_from_conditioned(sol.dxda[:9], fn_root, t1, t2, f_mat)


def backward_fundamental_kkt(
    f_mat: np.ndarray, inst: EpipolarInstance, dj_df: np.ndarray
) -> GradientReport:
    start = time.perf_counter()
    dfdw = fundamental_kkt_jacobian(f_mat, inst)
    djdw = np.asarray(dj_df, dtype=float).ravel() @ dfdw
    return GradientReport(dJdw=djdw, wall_time=time.perf_counter() - start)


def _svd_chain_conditioned(
    qn: np.ndarray, qtn: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Conditioned 8-point estimate and its weight Jacobian, closed form.

    Differentiates, in order: the smallest eigenvector of the weighted
    normal matrix, the rank-2 projection, and the renormalization. The
    projection is written as G - sigma_3 u_3 v_3^T, which is smooth as
    long as sigma_3 stays simple; near-consistent data makes sigma_1
    and sigma_2 nearly equal, and that pair never enters.
    """
    n = len(w)
    rows = np.einsum("ni,nj->nij", qtn, qn).reshape(n, 9)
    normal = rows.T @ (w[:, None] * rows)
    vals, vecs = np.linalg.eigh(normal)
    if vals[1] - vals[0] <= SPECTRUM_GAP:
        raise DegenerateSpectrum("smallest eigenvalue of the normal matrix is not simple")
    v0 = vecs[:, 0]

    g = v0.reshape(3, 3)
    dec = numerics.svd(g)
    u, v, sigma = dec.u, dec.v, dec.sigma
    if sigma[1] - sigma[2] <= SPECTRUM_GAP:
        raise DegenerateSpectrum("smallest singular value of the estimate is not simple")
    u3, v3, s3 = u[:, 2], v[:, 2], sigma[2]
    p = g - s3 * np.outer(u3, v3)
    p_norm = np.linalg.norm(p)

    out = np.empty((9, n))
    for i in range(n):
        dnormal = np.outer(rows[i], rows[i])
        coeff = (vecs[:, 1:].T @ dnormal @ v0) / (vals[0] - vals[1:])
        dv0 = vecs[:, 1:] @ coeff
        dg = dv0.reshape(3, 3)
        a = u.T @ dg @ v
        ds3 = a[2, 2]
        du3 = np.zeros(3)
        dv3 = np.zeros(3)
        for k in range(2):
            denom = s3 * s3 - sigma[k] ** 2
            du3 += (s3 * a[k, 2] + sigma[k] * a[2, k]) / denom * u[:, k]
            dv3 += (sigma[k] * a[k, 2] + s3 * a[2, k]) / denom * v[:, k]
        dp = dg - ds3 * np.outer(u3, v3) - s3 * (np.outer(du3, v3) + np.outer(u3, dv3))
        dn = dp / p_norm - p * (np.sum(p * dp) / p_norm**3)
        out[:, i] = dn.ravel()
    return p / p_norm, out


def fundamental_svd_jacobian(f_mat: np.ndarray, inst: EpipolarInstance) -> np.ndarray:
    """dF/dw (9 x n) through the full SVD-based forward chain."""
    from .solvers import normalized_problem

    f_mat = np.asarray(f_mat, dtype=float)
    w = inst.weights if inst.weights is not None else np.ones(inst.n)
    qn, qtn, t1, t2 = normalized_problem(inst)
    fn, dfn_dw = _svd_chain_conditioned(qn, qtn, w)
    return _chain_from_conditioned(dfn_dw, fn, t1, t2, f_mat)


def backward_fundamental_svd(
    f_mat: np.ndarray, inst: EpipolarInstance, dj_df: np.ndarray
) -> GradientReport:
    start = time.perf_counter()
    dfdw = fundamental_svd_jacobian(f_mat, inst)
    djdw = np.asarray(dj_df, dtype=float).ravel() @ dfdw
    return GradientReport(dJdw=djdw, wall_time=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# essential matrix


def essential_solution_jacobian(
    e: np.ndarray,
    q: np.ndarray,
    qt: np.ndarray,
    rng: np.random.Generator,
    max_retries: int = 5,
) -> np.ndarray:
    """dE/dw (9 x 20) by inverting the reduced 9x9 system Jacobian.

    Raises NotARoot if e does not satisfy the system and RankDeficient
    if no full-rank reduction is found within ``max_retries``.
    """
    sys_e = systems.essential_system()
    w = systems.pack_matches(np.atleast_2d(q), np.atleast_2d(qt))
    x = np.asarray(e, dtype=float).ravel()
    res = sys_e.residual(x, w)
    if np.max(np.abs(res)) >= 1e-6:
        raise NotARoot(f"essential system residual {np.max(np.abs(res)):.2e} too large")
    jx = sys_e.jac_x(x, w)
    reduced_jx, coeffs = systems.reduce_essential_jacobian(jx, rng, max_retries)
    reduced_ja = systems.reduce_rows(sys_e.jac_a(x, w), coeffs)
    return -numerics.solve_linear(reduced_jx, reduced_ja)


def backward_essential(
    e: np.ndarray,
    q: np.ndarray,
    qt: np.ndarray,
    dj_de: np.ndarray,
    rng: np.random.Generator,
    max_retries: int = 5,
    fallback_jacobian: np.ndarray | None = None,
) -> GradientReport:
    """dJ/dw for a five-match sample.

    On a rank-deficient reduction (after retries) the gradient falls
    back to ``fallback_jacobian`` when one is supplied (e.g. borrowed
    from another batch member) and to zero otherwise, with
    ``fallback_used`` set either way.
    """
    start = time.perf_counter()
    rank_failures = 0
    fallback_used = False
    try:
        dedw = essential_solution_jacobian(e, q, qt, rng, max_retries)
    except RankDeficient:
        rank_failures = 1
        fallback_used = True
        dedw = fallback_jacobian if fallback_jacobian is not None else np.zeros((9, 20))
    djdw = np.asarray(dj_de, dtype=float).ravel() @ dedw
    return GradientReport(
        dJdw=djdw,
        wall_time=time.perf_counter() - start,
        rank_failures=rank_failures,
        fallback_used=fallback_used,
    )


# ---------------------------------------------------------------------------
# finite-difference oracle


def _fd_steps(params: np.ndarray, delta: float | None) -> np.ndarray:
    if delta is not None:
        return np.full(params.shape, delta)
    return np.maximum(1e-6 * np.abs(params), 1e-8)


def fd_oracle(
    problem: str,
    instance,
    x0: np.ndarray | None = None,
    delta: float | None = None,
    refine: bool = False,
) -> np.ndarray:
    """Central-difference Jacobian of the tracked solution w.r.t. parameters.

    Re-runs the forward solver at each perturbed parameter vector and
    tracks the solution by nearest-candidate matching with sign folding.
    Raises TrackingFailure when a perturbed solution lands farther from
    the base solution than 10 * (||jacobian|| + 1) * step, which signals
    a root swap. ``refine`` adds a half-step pass and Richardson
    extrapolation, cancelling the leading truncation term (useful near
    ill-conditioned roots where the solution map has strong curvature).
    """
    if problem == "p3p":
        if x0 is None:
            raise ValueError("p3p tracking needs the base root x0")
        params = instance.params()
        base = np.asarray(x0, dtype=float)

        def resolve(a: np.ndarray) -> np.ndarray:
            roots = solve_p3p(P3pInstance.from_params(a))
            if not roots:
                raise TrackingFailure("no real root at perturbed parameters")
            dists = [np.linalg.norm(r - base) for r in roots]
            return roots[int(np.argmin(dists))]

    elif problem == "registration":
        params = instance.w
        base = solve_kabsch(instance).ravel() if x0 is None else np.asarray(x0).ravel()

        def resolve(w: np.ndarray) -> np.ndarray:
            return solve_kabsch(replace(instance, w=w)).ravel()

    elif problem == "fundamental":
        params = instance.weights
        base = (
            solve_fundamental_8pt(instance) if x0 is None else np.asarray(x0)
        ).ravel()

        def resolve(w: np.ndarray) -> np.ndarray:
            f = solve_fundamental_8pt(replace(instance, weights=w))
            return fold_to(f, base.reshape(3, 3)).ravel()

    elif problem == "essential":
        q, qt = instance.minimal_sample()
        params = systems.pack_matches(q, qt)
        if x0 is None:
            raise ValueError("essential tracking needs the base model x0")
        base = np.asarray(x0, dtype=float).ravel()

        def resolve(w: np.ndarray) -> np.ndarray:
            qs, qts = systems.unpack_matches(w)
            cands = solve_essential_5pt(qs[:, :2], qts[:, :2])
            folded = [fold_to(c, base.reshape(3, 3)).ravel() for c in cands.candidates]
            dists = [np.linalg.norm(c - base) for c in folded]
            return folded[int(np.argmin(dists))]

    else:
        raise ValueError(f"unknown problem {problem!r}")

    params = np.asarray(params, dtype=float)
    steps = _fd_steps(params, delta)
    jac = np.empty((base.size, params.size))
    drift = np.empty(params.size)

    def probe(m: int, step: float) -> tuple[np.ndarray, float]:
        bump = np.zeros_like(params)
        bump[m] = step
        plus = resolve(params + bump)
        minus = resolve(params - bump)
        col = (plus - minus) / (2.0 * step)
        moved = max(np.linalg.norm(plus - base), np.linalg.norm(minus - base))
        return col, moved

    for m in range(params.size):
        jac[:, m], drift[m] = probe(m, steps[m])
    half_jac = np.empty_like(jac) if refine else None
    half_drift = np.full(params.size, np.nan)
    if refine:
        for m in range(params.size):
            half_jac[:, m], half_drift[m] = probe(m, steps[m] / 2.0)
    # A swapped root inflates its own column, so the first-pass limit uses
    # the median column slope; columns over it are then re-probed at half
    # the step. A genuine derivative halves its drift, a swap does not.
    slope = float(np.median(np.linalg.norm(jac, axis=0)))
    limit = 10.0 * (slope + 1.0) * steps
    for m in np.nonzero(drift > limit)[0]:
        moved = half_drift[m]
        if np.isnan(moved):
            _, moved = probe(int(m), steps[m] / 2.0)
        if moved > 0.75 * drift[m]:
            raise TrackingFailure(
                f"solution jumped by {drift[m]:.2e} for parameter {m} "
                f"(step {steps[m]:.1e}); root swap suspected"
            )
    if refine:
        jac = (4.0 * half_jac - jac) / 3.0
    return jac


# ---------------------------------------------------------------------------
# uniform dispatch used by experiments


def run_backward(
    method: str,
    problem: str,
    model: np.ndarray,
    instance,
    upper_grad: np.ndarray,
    rng: np.random.Generator | None = None,
) -> GradientReport:
    """Evaluate one backward method; ``upper_grad`` is dJ/d(model)."""
    if method == "finite-difference":
        start = time.perf_counter()
        x0 = np.asarray(model, dtype=float).ravel()
        jac = fd_oracle(problem, instance, x0=x0)
        djdw = np.asarray(upper_grad, dtype=float).ravel() @ jac
        return GradientReport(dJdw=djdw, wall_time=time.perf_counter() - start)
    if problem == "p3p" and method == "ift-direct":
        return backward_p3p(model, instance, upper_grad)
    if problem == "registration" and method == "kkt-ift":
        return backward_registration_kkt(model, instance, upper_grad)
    if problem == "registration" and method == "svd-closed-form":
        return backward_registration_svd(model, instance, upper_grad)
    if problem == "fundamental" and method == "kkt-ift":
        return backward_fundamental_kkt(model, instance, upper_grad)
    if problem == "fundamental" and method == "svd-closed-form":
        return backward_fundamental_svd(model, instance, upper_grad)
    if problem == "essential" and method == "ift-direct":
        if rng is None:
            rng = np.random.default_rng(0)
        q, qt = instance.minimal_sample()
        return backward_essential(model, q, qt, upper_grad, rng)
    raise ValueError(f"method {method!r} does not apply to problem {problem!r}")

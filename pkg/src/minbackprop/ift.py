"""Implicit-function-theorem engine.

Given a polynomial (or smooth) constraint system h(x, a) = 0 and a root
x at parameters a, the solution Jacobian is

    dx/da = -(dh/dx)^+ (dh/da)

evaluated at (x, a). The same machinery differentiates constrained
minimizers: ``build_kkt`` turns a smooth objective plus equality
constraints into an augmented system over (y, lambda) whose root is the
KKT point, and ``ift_jacobian`` on that system yields dy/dw.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics


class NotARoot(ValueError):
    """The supplied point does not satisfy the system residual tolerance."""


class RankDeficient(RuntimeError):
    """A Jacobian that must be invertible lost rank."""


class DimensionMismatch(ValueError):
    """Inconsistent shapes between objective, constraints, and unknowns."""


@dataclass(frozen=True)
class ConstraintSystem:
    """Evaluatable system h(x, a) with analytic Jacobians.

    residual(x, a) returns the K residuals; jac_x and jac_a return the
    K x N and K x M Jacobians. All three must be mutually consistent
    (see ``self_check_system``).
    """

    n_x: int
    n_a: int
    n_eq: int
    residual: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_a: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SolutionJacobian:
    """dx/da at a root, with conditioning metadata.

    ``rank_deficient`` is a reported condition rather than an error:
    fallback policy belongs to callers.
    """

    dxda: np.ndarray
    rank_jx: int
    sigma_min: float
    method: str  # "square-inverse" or "pseudoinverse"
    rank_deficient: bool


def ift_jacobian(
    system: ConstraintSystem,
    x: np.ndarray,
    a: np.ndarray,
    rank_tol: float | None = None,
    residual_tol: float | None = 1e-6,
) -> SolutionJacobian:
    """Solution Jacobian dx/da at a root x of h(., a).

    Uses a direct inverse when the system is square and full rank, the
    pseudoinverse otherwise. ``residual_tol=None`` skips the root check
    (used when differentiating at an approximate stationary point).
    """
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    if x.shape != (system.n_x,) or a.shape != (system.n_a,):
        raise DimensionMismatch(
            f"expected x of shape ({system.n_x},) and a of shape ({system.n_a},)"
        )
    if residual_tol is not None:
        res = np.asarray(system.residual(x, a), dtype=float)
        if not np.all(np.isfinite(res)) or np.max(np.abs(res)) >= residual_tol:
            raise NotARoot(
                f"residual inf-norm {np.max(np.abs(res)):.3e} exceeds {residual_tol:.1e}"
            )
    jx = numerics.check_finite(system.jac_x(x, a), "jac_x")
    ja = numerics.check_finite(system.jac_a(x, a), "jac_a")
    if jx.shape != (system.n_eq, system.n_x) or ja.shape != (system.n_eq, system.n_a):
        raise DimensionMismatch("Jacobian shapes disagree with system dimensions")

    sigma = numerics.svd(jx).sigma
    if rank_tol is None:
        rank_tol = numerics.default_rank_tol(jx, sigma[0] if sigma.size else 0.0)
    rank = int(np.count_nonzero(sigma > rank_tol))
    sigma_min = float(sigma[min(jx.shape) - 1]) if sigma.size else 0.0
    full_rank = rank == system.n_x

    if jx.shape[0] == jx.shape[1] and full_rank:
        dxda = -numerics.solve_linear(jx, ja)
        method = "square-inverse"
    else:
        dxda = -numerics.pseudoinverse(jx, rank_tol) @ ja
        method = "pseudoinverse"
    return SolutionJacobian(
        dxda=dxda,
        rank_jx=rank,
        sigma_min=sigma_min,
        method=method,
        rank_deficient=not full_rank,
    )


@dataclass(frozen=True)
class ObjectiveDerivatives:
    """Smooth objective f(y, w) with the derivatives the KKT system needs."""

    n_y: int
    n_w: int
    value: Callable[[np.ndarray, np.ndarray], float]
    grad_y: Callable[[np.ndarray, np.ndarray], np.ndarray]
    hess_yy: Callable[[np.ndarray, np.ndarray], np.ndarray]
    hess_yw: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ConstraintDerivatives:
    """Equality constraints h(y) = 0 with first and second derivatives.

    hess(y) has shape (n_con, n_y, n_y): one Hessian per scalar constraint.
    """

    n_con: int
    value: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]


NO_CONSTRAINTS = ConstraintDerivatives(
    n_con=0,
    value=lambda y: np.zeros(0),
    jac=lambda y: np.zeros((0, len(np.atleast_1d(y)))),
    hess=lambda y: np.zeros((0, len(np.atleast_1d(y)), len(np.atleast_1d(y)))),
)


@dataclass(frozen=True)
class KktSystem:
    """Stationarity + feasibility equations of a constrained minimum.

    ``base`` is a ConstraintSystem over the augmented unknowns
    (y, lambda) with the objective parameters w as system parameters.
    """

    base: ConstraintSystem
    n_y: int
    n_lambda: int
    f: ObjectiveDerivatives
    h: ConstraintDerivatives


def build_kkt(f: ObjectiveDerivatives, h: ConstraintDerivatives | None = None) -> KktSystem:
    """Augmented system for min_y f(y, w) s.t. h(y) = 0.

    Unknowns are (y, lambda); rows are the n_y stationarity equations
    dL/dy = df/dy + lambda^T dh/dy followed by the n_con feasibility
    equations h(y) = 0.
    """
    if h is None:
        h = NO_CONSTRAINTS
    n_y, n_w, n_l = f.n_y, f.n_w, h.n_con

    def split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return x[:n_y], x[n_y:]

    def residual(x: np.ndarray, w: np.ndarray) -> np.ndarray:
        y, lam = split(x)
        g = np.asarray(f.grad_y(y, w), dtype=float)
        if g.shape != (n_y,):
            raise DimensionMismatch("grad_y shape disagrees with n_y")
        stat = g
        if n_l:
            hj = np.asarray(h.jac(y), dtype=float)
            if hj.shape != (n_l, n_y):
                raise DimensionMismatch("constraint Jacobian shape disagrees")
            stat = g + hj.T @ lam
        return np.concatenate([stat, np.asarray(h.value(y), dtype=float)])

    def jac_x(x: np.ndarray, w: np.ndarray) -> np.ndarray:
        y, lam = split(x)
        top_left = np.asarray(f.hess_yy(y, w), dtype=float)
        if top_left.shape != (n_y, n_y):
            raise DimensionMismatch("hess_yy shape disagrees with n_y")
        out = np.zeros((n_y + n_l, n_y + n_l))
        if n_l:
            hj = np.asarray(h.jac(y), dtype=float)
            hh = np.asarray(h.hess(y), dtype=float)
            top_left = top_left + np.tensordot(lam, hh, axes=1)
            out[:n_y, n_y:] = hj.T
            out[n_y:, :n_y] = hj
        out[:n_y, :n_y] = top_left
        return out

    def jac_a(x: np.ndarray, w: np.ndarray) -> np.ndarray:
        y, _ = split(x)
        mixed = np.asarray(f.hess_yw(y, w), dtype=float)
        if mixed.shape != (n_y, n_w):
            raise DimensionMismatch("hess_yw shape disagrees with (n_y, n_w)")
        out = np.zeros((n_y + n_l, n_w))
        out[:n_y] = mixed
        return out

    base = ConstraintSystem(
        n_x=n_y + n_l, n_a=n_w, n_eq=n_y + n_l,
        residual=residual, jac_x=jac_x, jac_a=jac_a,
    )
    return KktSystem(base=base, n_y=n_y, n_lambda=n_l, f=f, h=h)


def recover_multipliers(
    kkt: KktSystem, y: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, float]:
    """Least-squares multipliers at a constrained minimizer.

    Solves (dh/dy)^T lambda = -(df/dy)^T and returns (lambda, residual
    norm of the stationarity equation). Raises RankDeficient when the
    constraint Jacobian loses rank at y.
    """
    y = np.asarray(y, dtype=float)
    g = np.asarray(kkt.f.grad_y(y, w), dtype=float)
    if kkt.n_lambda == 0:
        return np.zeros(0), float(np.linalg.norm(g))
    hj = np.asarray(kkt.h.jac(y), dtype=float)
    if numerics.numerical_rank(hj) < kkt.n_lambda:
        raise RankDeficient("constraint Jacobian is rank deficient at y")
    lam, *_ = np.linalg.lstsq(hj.T, -g, rcond=None)
    residual = float(np.linalg.norm(hj.T @ lam + g))
    return lam, residual


@dataclass(frozen=True)
class SelfCheckReport:
    err_jac_x: float
    err_jac_a: float

    @property
    def max_error(self) -> float:
        return max(self.err_jac_x, self.err_jac_a)


def _fd_jacobian(fn, v: np.ndarray, step: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    cols = []
    for i in range(v.size):
        dv = np.zeros_like(v)
        dv[i] = step
        cols.append((np.asarray(fn(v + dv)) - np.asarray(fn(v - dv))) / (2 * step))
    return np.stack(cols, axis=-1)


def self_check_system(
    system: ConstraintSystem, x: np.ndarray, a: np.ndarray, step: float = 1e-6
) -> SelfCheckReport:
    """Compare analytic Jacobians against central finite differences.

    Error measure is max over entries of |analytic - fd| / (1 + |fd|).
    """
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    fd_x = _fd_jacobian(lambda v: system.residual(v, a), x, step)
    fd_a = _fd_jacobian(lambda v: system.residual(x, v), a, step)
    jx = np.asarray(system.jac_x(x, a), dtype=float)
    ja = np.asarray(system.jac_a(x, a), dtype=float)
    err_x = float(np.max(np.abs(jx - fd_x) / (1.0 + np.abs(fd_x))))
    err_a = float(np.max(np.abs(ja - fd_a) / (1.0 + np.abs(fd_a))))
    return SelfCheckReport(err_jac_x=err_x, err_jac_a=err_a)

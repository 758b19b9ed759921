"""Seeded synthetic scenes: rotations, registration toys, two-view geometry.

Every generator is a pure function of its config (and in particular of
the seed), so experiments are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .solvers import (
    DegenerateConfiguration,
    EpipolarInstance,
    RegistrationInstance,
    fix_sign,
)


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for synthetic two-view / registration scenes.

    ``focal``/``principal_point`` switch the projections to pixel
    coordinates (and the ground-truth model to a fundamental matrix for
    those pixels); with ``focal=None`` points stay in normalized
    (calibrated) coordinates.
    """

    n_points: int = 15
    noise_sigma: float = 0.0
    n_outliers: int = 1
    depth_range: tuple[float, float] = (4.0, 8.0)
    seed: int = 0
    focal: float | None = None
    principal_point: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.n_outliers >= self.n_points:
            raise ValueError("n_outliers must be smaller than n_points")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.depth_range[0] <= 0 or self.depth_range[1] < self.depth_range[0]:
            raise ValueError("depth_range must be positive and ordered")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation drawn uniformly over SO(3) via a random unit quaternion."""
    quat = rng.normal(size=4)
    quat = quat / np.linalg.norm(quat)
    w, x, y, z = quat
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def skew(t: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(t) @ v == cross(t, v)."""
    return np.array([
        [0.0, -t[2], t[1]],
        [t[2], 0.0, -t[0]],
        [-t[1], t[0], 0.0],
    ])


def make_registration_toy(
    seed: int = 0,
    n_points: int = 4,
    corruption: float | None = None,
) -> RegistrationInstance:
    """Identity-motion point cloud with one corrupted correspondence.

    ``n_points`` random 3D points, q_i = p_i (reference rotation is the
    identity), then q_1 is displaced by a deterministic offset whose
    magnitude is comparable to the cloud extent (override or disable via
    ``corruption``). Weights start uniform at 1/n.
    """
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    q = p.copy()
    extent = float(np.max(np.linalg.norm(p - p.mean(axis=0), axis=1)))
    if corruption is None:
        corruption = extent
    if corruption != 0.0:
        direction = np.array([1.0, -0.5, 0.75])
        q[0] = q[0] + corruption * direction / np.linalg.norm(direction)
    w = np.full(n_points, 1.0 / n_points)
    return RegistrationInstance(p=p, q=q, w=w, r_true=np.eye(3))


def make_two_view(config: SceneConfig) -> EpipolarInstance:
    """Random relative pose, projected correspondences, noise, outliers.

    The second camera sees X' = R X + t with ||t|| = 1. Gaussian noise of
    ``noise_sigma`` is added to the projected (canonical z = 1) points of
    both views; ``n_outliers`` matches have their second-view point
    resampled uniformly inside the bounding box of the clean projections.
    Ground truth is E = skew(t) R, unit normalized; with canonical
    (identity) intrinsics this is also the ground-truth fundamental
    matrix.
    """
    rng = config.rng()
    rot = random_rotation(rng)
    t = rng.normal(size=3)
    norm = np.linalg.norm(t)
    if norm < 1e-12:
        raise DegenerateConfiguration("degenerate translation draw")
    t = t / norm

    n = config.n_points
    lo, hi = config.depth_range
    depth = rng.uniform(lo, hi, size=n)
    lateral = rng.uniform(-0.5, 0.5, size=(n, 2)) * depth[:, None]
    x_world = np.column_stack([lateral, depth])
    x_second = x_world @ rot.T + t
    if np.any(np.abs(x_second[:, 2]) < 1e-9):
        raise DegenerateConfiguration("point projects to infinity in second view")

    q = x_world[:, :2] / x_world[:, 2:3]
    qt = x_second[:, :2] / x_second[:, 2:3]
    e_gt = skew(t) @ rot
    e_gt = fix_sign(e_gt / np.linalg.norm(e_gt))
    if config.focal is not None:
        cx, cy = config.principal_point
        intr = np.array([[config.focal, 0.0, cx], [0.0, config.focal, cy], [0.0, 0.0, 1.0]])
        q = q * config.focal + np.array([cx, cy])
        qt = qt * config.focal + np.array([cx, cy])
        intr_inv = np.linalg.inv(intr)
        f_true = intr_inv.T @ e_gt @ intr_inv
        f_true = fix_sign(f_true / np.linalg.norm(f_true))
    else:
        f_true = e_gt
    if config.noise_sigma > 0:
        q = q + rng.normal(scale=config.noise_sigma, size=q.shape)
        qt = qt + rng.normal(scale=config.noise_sigma, size=qt.shape)

    inliers = np.arange(n)
    if config.n_outliers > 0:
        low, high = qt.min(axis=0), qt.max(axis=0)
        span = np.maximum(high - low, 1e-3)
        outlier_idx = rng.choice(n, size=config.n_outliers, replace=False)
        qt[outlier_idx] = low + rng.uniform(size=(config.n_outliers, 2)) * span
        inliers = np.setdiff1d(inliers, outlier_idx)

    return EpipolarInstance(
        q=q,
        qt=qt,
        weights=np.full(n, 1.0 / n),
        e_gt=e_gt,
        f_true=f_true,
        inliers=inliers,
    )


def make_minimal_sample(seed: int) -> EpipolarInstance:
    """Noiseless five-match sample with its ground-truth essential matrix."""
    config = SceneConfig(n_points=5, noise_sigma=0.0, n_outliers=0, seed=seed)
    return make_two_view(config)

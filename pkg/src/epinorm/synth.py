"""Synthetic two-view scenes with known fundamental matrix.

Every other module is checked against these scenes: noise-free
correspondences satisfy the ground truth epipolar constraint to machine
precision, noisy ones carry labelled Gaussian pixel noise and outliers.
"""

from dataclasses import dataclass, replace

import numpy as np

from .core import CorrespondenceSet, canonical_fmat
from .errors import FrustumEmpty, TooFewPoints, ZeroBaseline

MOTIONS = ("forward", "sideways", "general")


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 200
    depth_range: tuple = (4.0, 40.0)
    focal: float = 800.0
    principal_point: tuple | None = None
    image_size: tuple = (1200, 800)
    motion: str = "forward"
    magnitude: float = 1.0
    noise_sigma_px: float = 1.0
    outlier_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        zmin, zmax = self.depth_range
        if not 0 < zmin < zmax:
            raise ValueError(f"bad depth range {self.depth_range}")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not 0 <= self.outlier_frac < 1:
            raise ValueError("outlier_frac must lie in [0, 1)")
        if self.noise_sigma_px < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if self.n_points < 1:
            raise ValueError("n_points must be positive")

    @property
    def K(self):
        w, h = self.image_size
        cx, cy = self.principal_point if self.principal_point is not None else (w / 2, h / 2)
        return np.array([[self.focal, 0.0, cx], [0.0, self.focal, cy], [0.0, 0.0, 1.0]])


def skew(t):
    return np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])


def rotation(axis, angle):
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    Kx = skew(axis)
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * Kx @ Kx


def gt_fundamental(K1, K2, R, t):
    """Fundamental matrix of cameras ``K1 [I | 0]`` and ``K2 [R | t]``."""
    t = np.asarray(t, dtype=float)
    R = np.asarray(R, dtype=float)
    if np.linalg.norm(t) == 0:
        raise ZeroBaseline("translation must be nonzero")
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
        raise ValueError("R must be a proper rotation")
    F = np.linalg.inv(K2).T @ skew(t) @ R @ np.linalg.inv(K1)
    return canonical_fmat(F)


def sample_motion(cfg, rng):
    """Relative pose ``(R, t)`` for the configured motion preset."""
    m = cfg.magnitude
    if cfg.motion == "forward":
        # dominant forward translation, slight drift and yaw, as a driving car
        t = np.array([rng.normal(0, 0.05), rng.normal(0, 0.02), 1.0])
        R = rotation([0.0, 1.0, 0.0], rng.normal(0, np.deg2rad(1.0)))
    elif cfg.motion == "sideways":
        t = np.array([1.0, rng.normal(0, 0.05), rng.normal(0, 0.05)])
        R = rotation([0.0, 1.0, 0.0], rng.normal(0, np.deg2rad(2.0)))
    else:
        t = rng.normal(size=3)
        R = rotation(rng.normal(size=3), rng.uniform(0, np.deg2rad(30.0)))
    return R, m * t / np.linalg.norm(t)


def _project(K, X):
    x = X @ K.T
    return x[:, :2] / x[:, 2:3]


def generate_pair(cfg):
    """Noisy correspondences of a random scene, with ground truth F and inlier labels."""
    rng = np.random.default_rng(cfg.seed)
    K = cfg.K
    w, h = cfg.image_size
    R, t = sample_motion(cfg, rng)
    zmin, zmax = cfg.depth_range

    keep1, keep2 = [], []
    attempts = 0
    limit = 100 * cfg.n_points
    while sum(len(k) for k in keep1) < cfg.n_points and attempts < limit:
        m = min(cfg.n_points * 2, limit - attempts)
        attempts += m
        # volume-uniform depth within the frustum: density proportional to z^2
        z = np.cbrt(zmin**3 + rng.uniform(size=m) * (zmax**3 - zmin**3))
        px = rng.uniform([0.0, 0.0], [w, h], size=(m, 2))
        X = np.linalg.solve(K, np.column_stack([px, np.ones(m)]).T).T * z[:, None]
        X2 = X @ R.T + t
        ok = X2[:, 2] > 1e-6
        p2 = np.full((m, 2), -1.0)
        p2[ok] = _project(K, X2[ok])
        ok &= (p2[:, 0] >= 0) & (p2[:, 0] <= w) & (p2[:, 1] >= 0) & (p2[:, 1] <= h)
        keep1.append(px[ok])
        keep2.append(p2[ok])
    x1 = np.concatenate(keep1)[: cfg.n_points]
    x2 = np.concatenate(keep2)[: cfg.n_points]
    if len(x1) < cfg.n_points:
        raise FrustumEmpty(f"only {len(x1)} of {cfg.n_points} points visible in both views")

    n = cfg.n_points
    x1 = x1 + rng.normal(0, 1, size=(n, 2)) * cfg.noise_sigma_px
    x2 = x2 + rng.normal(0, 1, size=(n, 2)) * cfg.noise_sigma_px
    labels = np.ones(n, dtype=bool)
    n_out = int(np.floor(cfg.outlier_frac * n))
    if n_out:
        idx = rng.choice(n, n_out, replace=False)
        x2[idx] = rng.uniform([0.0, 0.0], [w, h], size=(n_out, 2))
        labels[idx] = False
    return CorrespondenceSet(x1, x2, gt_fundamental(K, K, R, t), labels)


def draw_sample8(pair, seed, inliers_only=True, n=8):
    """Uniform random ``n``-subset (in random order) of a correspondence set."""
    rng = np.random.default_rng(seed)
    if inliers_only and pair.labels is not None:
        eligible = np.flatnonzero(pair.labels)
    else:
        eligible = np.arange(len(pair))
    if len(eligible) < n:
        raise TooFewPoints(f"{len(eligible)} eligible correspondences, need {n}")
    idx = rng.choice(eligible, n, replace=False)
    return pair.x1[idx], pair.x2[idx]


def make_samples(cfg, n_samples, per_pair=10, seed=0):
    """Draw ``n_samples`` inlier 8-point samples from a stream of random scenes.

    Returns a list of ``(x1, x2, F_gt)`` triples; scene ``k`` uses seed
    ``(seed, k)`` so datasets are reproducible and disjoint across seeds.
    """
    out = []
    k = 0
    while len(out) < n_samples:
        scene_seed = np.random.SeedSequence([seed, k]).generate_state(1)[0]
        pair = generate_pair(replace(cfg, seed=int(scene_seed)))
        for j in range(min(per_pair, n_samples - len(out))):
            x1, x2 = draw_sample8(pair, seed=[int(scene_seed), j])
            out.append((x1, x2, pair.F))
        k += 1
    return out

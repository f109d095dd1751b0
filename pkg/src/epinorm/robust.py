"""RANSAC around any normalization strategy, plus inlier and F1 metrics."""

from dataclasses import dataclass

import numpy as np

from . import core
from .autodiff import pipeline
from .errors import NoConsensus, TooFewPoints
from .net import forward, forward_batch, hartley_batch
from .normalization import build_T, build_T_batch, hartley_params
from .search import SearchConfig, canonical_order, optimize_batch, optimize_sample

STRATEGIES = ("hartley", "learned", "optimized")


@dataclass(frozen=True)
class RansacConfig:
    iters: int = 2000
    inlier_thresh_px: float = 1.0
    seed: int = 0
    strategy: str = "hartley"
    weights: object = None
    search: SearchConfig = SearchConfig()
    adaptive: bool = False
    confidence: float = 0.999
    chunk: int = 250

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be at least 1")
        if self.inlier_thresh_px <= 0:
            raise ValueError("inlier threshold must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.strategy == "learned" and self.weights is None:
            raise ValueError("learned strategy needs network weights")


@dataclass
class RansacResult:
    F: np.ndarray
    inlier_mask: np.ndarray
    n_inliers: int
    iterations_used: int
    subset: np.ndarray
    subset_loss: float


def sym_epipolar_matrix(F, x1, x2):
    """Symmetric epipolar distances of every point under every F: ``(H, N)``; NaN at epipoles."""
    u = core.to_homogeneous(x1)
    up = core.to_homogeneous(x2)
    Fu = np.einsum("hij,nj->hni", F, u)
    Ftup = np.einsum("hji,nj->hni", F, up)
    e = np.abs(np.einsum("ni,hni->hn", up, Fu))
    n1 = np.hypot(Fu[..., 0], Fu[..., 1])
    n2 = np.hypot(Ftup[..., 0], Ftup[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        d = e * (1.0 / n2 + 1.0 / n1)
    d[(n1 < core.EPIPOLE_EPS) | (n2 < core.EPIPOLE_EPS)] = np.nan
    return d


def _hypothesis_params(x1, x2, cfg):
    """Normalization parameters ``(H, 5)`` per view, plus a validity mask."""
    H = len(x1)
    if cfg.strategy == "hartley":
        return hartley_batch(x1), hartley_batch(x2), np.ones(H, dtype=bool)
    if cfg.strategy == "learned":
        p1, p2 = forward_batch(cfg.weights, x1, x2)
        return p1, p2, np.ones(H, dtype=bool)
    res = optimize_batch(list(zip(x1, x2)), cfg.search)
    ok = np.array([r is not None for r in res])
    p1 = np.zeros((H, 5))
    p2 = np.zeros((H, 5))
    p1[:, :2] = p2[:, :2] = 1.0
    for i, r in enumerate(res):
        if r is not None:
            # the optimizer sorts each sample internally; parameters are order-free
            p1[i], p2[i] = r.p1.as_array(), r.p2.as_array()
    return p1, p2, ok


def _hypotheses(x1, x2, cfg):
    p1, p2, ok = _hypothesis_params(x1, x2, cfg)
    T1, T2 = build_T_batch(p1), build_T_batch(p2)
    # skip degenerate subsets, same rule as the DLT solver
    y1 = np.einsum("hij,hnj->hni", T1[:, :2, :2], x1) + T1[:, None, :2, 2]
    y2 = np.einsum("hij,hnj->hni", T2[:, :2, :2], x2) + T2[:, None, :2, 2]
    sv = np.linalg.svd(core.build_design_matrix(y1, y2), compute_uv=False)
    ok &= sv[:, 7] >= core.DEGENERATE_RTOL * sv[:, 0]
    with np.errstate(all="ignore"):
        loss, F = pipeline(T1, T2, x1, x2)
    ok &= np.all(np.isfinite(F.reshape(len(F), -1)), axis=1)
    return F, np.where(ok, loss, np.inf), ok


def _required_iters(inlier_ratio, confidence, n=8):
    w = inlier_ratio**n
    if w <= 0:
        return np.inf
    if w >= 1:
        return 1
    return np.log(1 - confidence) / np.log(1 - w)


def ransac_fmat(x1, x2, cfg=RansacConfig()):
    """Fixed-budget RANSAC; returns the F refit on the best consensus set.

    Subsets are drawn over the correspondences in canonical (sorted) order,
    so shuffling the input reproduces the same hypotheses and inlier set.
    """
    x1, x2 = core.check_sample(x1, x2)
    N = len(x1)
    if N < 8:
        raise TooFewPoints(f"{N} correspondences, need 8")
    order = canonical_order(x1, x2)
    s1, s2 = x1[order], x2[order]
    rng = np.random.default_rng(cfg.seed)
    subsets = np.argsort(rng.random((cfg.iters, N)), axis=1)[:, :8]

    best = (-1, np.inf, -1)  # (count, mean inlier residual, hypothesis index)
    best_mask = best_F = best_loss = None
    used = 0
    for start in range(0, cfg.iters, cfg.chunk):
        idx = subsets[start : start + cfg.chunk]
        F, loss, ok = _hypotheses(s1[idx], s2[idx], cfg)
        d = sym_epipolar_matrix(F, s1, s2)
        inl = (d < cfg.inlier_thresh_px) & ok[:, None]
        counts = inl.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mres = np.where(inl, d, 0.0).sum(axis=1) / counts
        for h in np.flatnonzero(ok):
            key = (counts[h], mres[h])
            if key[0] > best[0] or (key[0] == best[0] and key[1] < best[1]):
                best = (key[0], key[1], start + h)
                best_mask, best_F, best_loss = inl[h].copy(), F[h], loss[h]
        used = min(start + cfg.chunk, cfg.iters)
        if cfg.adaptive and best[0] > 0 and used >= _required_iters(best[0] / N, cfg.confidence):
            break
    if best[0] < 8:
        raise NoConsensus(f"best hypothesis has {max(best[0], 0)} inliers")

    F = _refit(s1[best_mask], s2[best_mask], cfg)
    mask = np.zeros(N, dtype=bool)
    mask[order[best_mask]] = True
    subset = np.sort(order[subsets[best[2]]])
    return RansacResult(F, mask, int(best[0]), used, subset, float(best_loss))


def _refit(x1, x2, cfg):
    """Eight-point-style DLT on all inliers with the configured normalization."""
    if cfg.strategy == "hartley":
        p1, p2 = hartley_params(x1), hartley_params(x2)
    elif cfg.strategy == "learned":
        p1, p2 = forward(cfg.weights, x1, x2)
    else:
        r = optimize_sample(x1, x2, cfg.search)
        p1, p2 = r.p1, r.p2
    F, _ = core.eight_point(x1, x2, build_T(p1), build_T(p2))
    return F


def inlier_pct(F, x1, x2, thresh=1.0):
    """Percentage of correspondences with symmetric epipolar distance below ``thresh``."""
    x1, x2 = core.check_sample(x1, x2)
    if len(x1) == 0:
        raise ValueError("need at least one correspondence")
    d = sym_epipolar_matrix(np.asarray(F, float)[None], x1, x2)[0]
    return 100.0 * np.count_nonzero(d < thresh) / len(x1)


def epiline_distance(F, x1, x2):
    """Perpendicular distance of each second-view point to its epipolar line ``F u``."""
    u = core.to_homogeneous(x1)
    up = core.to_homogeneous(x2)
    Fu = u @ np.asarray(F, float).T
    n = np.hypot(Fu[:, 0], Fu[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(np.sum(up * Fu, axis=1)) / n
    return np.where(n < core.EPIPOLE_EPS, np.inf, d)


def f1_epiline(F, x1, x2, F_gt, thresh=1.0):
    """Percentage of correspondences within ``thresh`` px of both the estimated and true epipolar lines."""
    x1, x2 = core.check_sample(x1, x2)
    if len(x1) == 0:
        raise ValueError("need at least one correspondence")
    ok = (epiline_distance(F, x1, x2) < thresh) & (epiline_distance(F_gt, x1, x2) < thresh)
    return 100.0 * np.count_nonzero(ok) / len(x1)

import numpy as np
import pytest

from epinorm import core, net, synth
from epinorm.errors import NoConsensus, TooFewPoints
from epinorm.robust import (
    RansacConfig,
    _hypotheses,
    epiline_distance,
    f1_epiline,
    inlier_pct,
    ransac_fmat,
    sym_epipolar_matrix,
)
from epinorm.search import SearchConfig


def _pair(sigma=0.5, outliers=0.3, n=150, seed=0):
    return synth.generate_pair(synth.SceneConfig(n_points=n, noise_sigma_px=sigma, outlier_frac=outliers, seed=seed))


def test_noise_free_all_inliers():
    p = _pair(sigma=0.0, outliers=0.0, n=60)
    r = ransac_fmat(p.x1, p.x2, RansacConfig(iters=50))
    assert r.n_inliers == 60 and r.inlier_mask.all()
    assert core.fmat_distance(r.F, p.F) < 1e-8


def test_outliers_recall_and_precision():
    p = _pair(seed=3)
    r = ransac_fmat(p.x1, p.x2, RansacConfig(iters=500, inlier_thresh_px=4.0))
    recall = np.mean(r.inlier_mask[p.labels])
    false_in = np.mean(r.inlier_mask[~p.labels])
    assert recall >= 0.9
    assert false_in <= 0.1


def test_shuffle_same_inliers(rng):
    p = _pair(seed=4)
    cfg = RansacConfig(iters=300, inlier_thresh_px=4.0)
    a = ransac_fmat(p.x1, p.x2, cfg)
    perm = rng.permutation(len(p))
    b = ransac_fmat(p.x1[perm], p.x2[perm], cfg)
    assert np.array_equal(a.inlier_mask[perm], b.inlier_mask)
    assert core.fmat_distance(a.F, b.F) < 1e-8
    c = ransac_fmat(p.x1, p.x2, cfg)
    assert np.array_equal(a.F, c.F) and np.array_equal(a.subset, c.subset)


def test_adaptive_stops_early():
    p = _pair(sigma=0.3, outliers=0.1, seed=5)
    r = ransac_fmat(p.x1, p.x2, RansacConfig(iters=2000, inlier_thresh_px=4.0, adaptive=True))
    assert r.iterations_used < 2000


def test_optimized_hypothesis_not_worse(rng):
    p = _pair(sigma=1.0, outliers=0.0, seed=6)
    idx = np.stack([rng.choice(len(p), 8, replace=False) for _ in range(10)])
    x1, x2 = p.x1[idx], p.x2[idx]
    _, lh, okh = _hypotheses(x1, x2, RansacConfig())
    _, lo, oko = _hypotheses(x1, x2, RansacConfig(strategy="optimized", search=SearchConfig(max_iters=100)))
    ok = okh & oko
    assert ok.sum() >= 8
    assert np.all(lo[ok] <= lh[ok] + 1e-9)


def test_learned_zero_heads_matches_hartley():
    p = _pair(seed=7)
    a = ransac_fmat(p.x1, p.x2, RansacConfig(iters=250, inlier_thresh_px=4.0))
    b = ransac_fmat(p.x1, p.x2, RansacConfig(iters=250, inlier_thresh_px=4.0, strategy="learned", weights=net.init_weights()))
    assert np.array_equal(a.inlier_mask, b.inlier_mask)
    assert core.fmat_distance(a.F, b.F) < 1e-8


def test_config_errors():
    with pytest.raises(ValueError):
        RansacConfig(strategy="learned")
    with pytest.raises(ValueError):
        RansacConfig(strategy="magic")
    with pytest.raises(ValueError):
        RansacConfig(iters=0)


def test_too_few_and_no_consensus(rng):
    p = _pair(n=7, outliers=0.0)
    with pytest.raises(TooFewPoints):
        ransac_fmat(p.x1, p.x2)
    x1 = rng.uniform(0, 1000, (40, 2))
    x2 = rng.uniform(0, 1000, (40, 2))
    with pytest.raises(NoConsensus):
        ransac_fmat(x1, x2, RansacConfig(iters=50, inlier_thresh_px=1e-6))


def test_sym_matrix_matches_residual():
    p = _pair(outliers=0.0, n=30)
    d = sym_epipolar_matrix(p.F[None], p.x1, p.x2)[0]
    assert np.allclose(d, core.residual(p.F, p.x1, p.x2), rtol=1e-12)


def test_inlier_pct_monotone():
    p = _pair(sigma=1.0, seed=8)
    vals = [inlier_pct(p.F, p.x1, p.x2, t) for t in (0.1, 0.5, 1.0, 2.0, 10.0)]
    assert vals == sorted(vals)
    assert inlier_pct(p.F, p.x1, p.x2, 1e9) == 100.0
    with pytest.raises(ValueError):
        inlier_pct(p.F, np.zeros((0, 2)), np.zeros((0, 2)))


def test_f1(rng):
    clean = _pair(sigma=0.0, outliers=0.0, n=100)
    assert f1_epiline(clean.F, clean.x1, clean.x2, clean.F) == 100.0
    G = rng.normal(size=(3, 3))
    assert f1_epiline(G, clean.x1, clean.x2, clean.F) < 10.0
    scores = []
    for s in (0.2, 1.0, 3.0):
        p = _pair(sigma=s, outliers=0.0, n=200)
        scores.append(f1_epiline(p.F, p.x1, p.x2, p.F))
    assert scores[0] > scores[1] > scores[2]


def test_epiline_distance_oracle():
    p = _pair(sigma=1.0, outliers=0.0, n=20)
    d = epiline_distance(p.F, p.x1, p.x2)
    for i in range(5):
        a, b, c = p.F @ np.r_[p.x1[i], 1.0]
        x, y = p.x2[i]
        assert d[i] == pytest.approx(abs(a * x + b * y + c) / np.hypot(a, b), rel=1e-12)

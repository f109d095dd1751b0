"""Conditioning and comparison metrics for normalization strategies."""

from dataclasses import dataclass

import numpy as np

from . import core
from .autodiff import gradcheck
from .errors import LengthMismatch, RankDeficient
from .normalization import NormParams, apply_T, build_T, hartley_params

RHO_CAP = 1e12


@dataclass(frozen=True)
class CondReport:
    """Condition number of a design matrix.

    ``d`` holds the 9 eigenvalues of ``A^T A`` in descending order and
    ``kappa = sqrt(d[0] / d[7])``, i.e. sigma_1 / sigma_8 of ``A``.
    """

    kappa: float
    d: np.ndarray


def condition_number(A):
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("design matrix must be finite")
    s = np.linalg.svd(A, compute_uv=False)
    sv = np.zeros(9)
    sv[: s.size] = s[:9]
    if sv[0] == 0 or sv[7] < 1e-14 * sv[0]:
        raise RankDeficient("design matrix has rank below 8")
    return CondReport(float(sv[0] / sv[7]), sv**2)


def normalized_kappa(x1, x2, p1, p2):
    """Condition number of the design matrix after normalizing each view."""
    A = core.build_design_matrix(apply_T(build_T(p1), x1), apply_T(build_T(p2), x2))
    return condition_number(A).kappa


def random_params(rng, ref):
    """A random member of the 5-parameter family around the reference parameters ``ref``."""
    return NormParams(
        ref.alpha1 * float(np.exp(rng.normal(0, 1.0))),
        ref.alpha2 * float(np.exp(rng.normal(0, 1.0))),
        float(rng.uniform(-np.pi, np.pi)),
        ref.o1 + float(rng.normal(0, 1.0)) / ref.alpha1,
        ref.o2 + float(rng.normal(0, 1.0)) / ref.alpha2,
    )


def prop1_harness(x1, x2, trials=1000, seed=0, extra=()):
    """Smallest condition number reached over random normalization pairs.

    Always includes the identity and Hartley pairs plus any ``extra``
    ``(p1, p2)`` pairs (e.g. optimizer output).  Trial ``i`` draws from its
    own generator spawned from ``seed``, so splitting the trials across
    workers reproduces the sequential result.
    """
    x1, x2 = core.check_sample(x1, x2)
    h1, h2 = hartley_params(x1), hartley_params(x2)
    ident = NormParams(1.0, 1.0)
    pairs = [(ident, ident), (h1, h2), *extra]
    for child in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(child)
        pairs.append((random_params(rng, h1), random_params(rng, h2)))
    return min(normalized_kappa(x1, x2, p1, p2) for p1, p2 in pairs)


def better_rate(losses_ours, losses_base):
    """Percentage of samples where ``ours`` is strictly below ``base``."""
    a = np.asarray(losses_ours, dtype=float)
    b = np.asarray(losses_base, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("need at least one pair")
    return 100.0 * np.count_nonzero(a < b) / a.size


def rho_series(rhos, window=100):
    """Windowed mean of ``rho = r2 / r3`` values, infinities capped at ``RHO_CAP``.

    A trailing partial window is averaged on its own; a window larger than
    the input yields one value.
    """
    r = np.minimum(np.asarray(rhos, dtype=float), RHO_CAP)
    if r.size == 0:
        raise ValueError("need at least one value")
    if window < 1:
        raise ValueError("window must be positive")
    return [float(r[i : i + window].mean()) for i in range(0, r.size, window)]


def sample_rho(x1, x2, p1, p2):
    """rho of the pre-enforcement matrix when estimating with the given normalizations."""
    _, report = core.eight_point(x1, x2, build_T(p1), build_T(p2))
    return report.rho


def gradcheck_draw(rng, ref):
    """Random parameters for gradient checks: scales within ~e^{+-1}, any angle, offsets within ~50 px."""
    return NormParams(
        ref.alpha1 * float(np.exp(rng.normal(0, 0.5))),
        ref.alpha2 * float(np.exp(rng.normal(0, 0.5))),
        float(rng.uniform(-np.pi, np.pi)),
        ref.o1 + float(rng.normal(0, 50.0)),
        ref.o2 + float(rng.normal(0, 50.0)),
    )


def gradcheck_sweep(samples, seed=0, optimize_offsets=True, tol=1e-4):
    """One :func:`gradcheck` per sample at random parameters; returns the reports."""
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        x1, x2 = s[0], s[1]
        p1 = gradcheck_draw(rng, hartley_params(x1))
        p2 = gradcheck_draw(rng, hartley_params(x2))
        out.append(gradcheck(p1, p2, x1, x2, optimize_offsets=optimize_offsets, tol=tol))
    return out

"""Normalized eight-point algorithm: design matrix, DLT, rank-2 enforcement, residuals.

Conventions used throughout the package:

* ``x1`` holds pixel points of the first view (``u``), ``x2`` of the second
  view (``u'``); both are ``(N, 2)`` arrays, or ``(N, 3)`` when homogeneous.
* The epipolar constraint reads ``x2_h @ F @ x1_h == 0``.
* ``vec`` stacks columns.  Row ``i`` of the design matrix is
  ``vec(u_i u'_i^T)`` and the unknown is ``f = vec(F^T)``, which is
  ``F.ravel()`` in numpy's row-major order.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSample, EpipoleAtPoint, SingularTransform, ZeroMatrix

DEGENERATE_RTOL = 1e-9
EPIPOLE_EPS = 1e-15


@dataclass
class CorrespondenceSet:
    """Matched points of two views, with optional ground truth F and inlier labels."""

    x1: np.ndarray
    x2: np.ndarray
    F: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.x1, self.x2 = check_sample(self.x1, self.x2)
        if self.F is not None:
            self.F = np.asarray(self.F, dtype=float).reshape(3, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)
            if self.labels.shape != (len(self.x1),):
                raise ValueError("labels must have one entry per correspondence")

    def __len__(self):
        return len(self.x1)

    def subset(self, idx):
        labels = None if self.labels is None else self.labels[idx]
        return CorrespondenceSet(self.x1[idx], self.x2[idx], self.F, labels)


@dataclass(frozen=True)
class Rank2Report:
    """Singular values of the matrix before rank-2 enforcement."""

    r1: float
    r2: float
    r3: float

    @property
    def rho(self):
        return np.inf if self.r3 == 0.0 else self.r2 / self.r3


def to_homogeneous(p):
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("points must be finite")
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


def _homog(p):
    p = np.asarray(p, dtype=float)
    if p.shape[-1] == 3:
        return p
    if p.shape[-1] != 2:
        raise ValueError(f"points must have 2 or 3 columns, got shape {p.shape}")
    return to_homogeneous(p)


def check_sample(x1, x2, n=None):
    """Validate a correspondence array pair and return them as float arrays.

    ``n`` pins the number of correspondences (8 for a minimal sample).
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.ndim != 2 or x1.shape[1] != 2 or x1.shape != x2.shape:
        raise ValueError(f"expected matching (N, 2) arrays, got {x1.shape} and {x2.shape}")
    if n is not None and x1.shape[0] != n:
        raise ValueError(f"expected {n} correspondences, got {x1.shape[0]}")
    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x2))):
        raise ValueError("correspondences must be finite")
    return x1, x2


def vec(X):
    """Column-stacking vectorization."""
    return np.asarray(X).ravel(order="F")


def mat9(f):
    """Inverse of :func:`vec` for 3x3 matrices."""
    return np.asarray(f).reshape((3, 3), order="F")


def build_design_matrix(x1, x2):
    """Stack ``vec(u_i u'_i^T)`` for every correspondence into an ``(N, 9)`` matrix."""
    u = _homog(x1)
    up = _homog(x2)
    # vec(u u'^T)[3k + j] = u'_k u_j
    return (up[..., :, None] * u[..., None, :]).reshape(u.shape[:-1] + (9,))


def pin_sign(v, axis=-1):
    """Flip ``v`` so that its entry of largest magnitude is positive."""
    v = np.asarray(v, dtype=float)
    idx = np.argmax(np.abs(v), axis=axis)
    piv = np.take_along_axis(v, np.expand_dims(idx, axis), axis=axis)
    return np.where(piv < 0, -v, v)


def dlt_solve(A):
    """Null vector of the design matrix.

    Returns the unit right singular vector for the smallest singular value
    (sign pinned) and the 9 singular values in descending order, padded with
    zeros when ``A`` has fewer than 9 rows.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("design matrix must be finite")
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    sv = np.zeros(9)
    sv[: s.size] = s
    if sv[0] == 0.0 or sv[7] < DEGENERATE_RTOL * sv[0]:
        raise DegenerateSample(f"design matrix rank < 8 (sv[7]/sv[0] = {sv[7] / max(sv[0], 1e-300):.3g})")
    return pin_sign(vt[-1]), sv


def canonical_fmat(F):
    """Scale to unit Frobenius norm and make the largest-magnitude entry positive."""
    F = np.asarray(F, dtype=float)
    n = np.linalg.norm(F)
    if n < 1e-15:
        raise ZeroMatrix("cannot normalize a zero matrix")
    return pin_sign((F / n).ravel()).reshape(3, 3)


def enforce_rank2(Fhat):
    """Closest rank-2 matrix in Frobenius norm, returned canonical, plus its report."""
    Fhat = np.asarray(Fhat, dtype=float)
    if not np.all(np.isfinite(Fhat)):
        raise ValueError("matrix must be finite")
    if np.linalg.norm(Fhat) < 1e-15:
        raise ZeroMatrix("cannot enforce rank 2 on a zero matrix")
    U, r, Vt = np.linalg.svd(Fhat)
    F = (U[:, :2] * r[:2]) @ Vt[:2]
    return canonical_fmat(F), Rank2Report(float(r[0]), float(r[1]), float(r[2]))


def denormalize(Fn, T1, T2):
    """Map a fundamental matrix from normalized coordinates back to pixels: ``T2^T Fn T1``."""
    T1 = np.asarray(T1, dtype=float)
    T2 = np.asarray(T2, dtype=float)
    if abs(np.linalg.det(T1)) < 1e-12 or abs(np.linalg.det(T2)) < 1e-12:
        raise SingularTransform("normalization matrix is singular")
    return canonical_fmat(T2.T @ Fn @ T1)


def eight_point(x1, x2, T1=None, T2=None):
    """Normalized eight-point estimate (also accepts N > 8 for least squares).

    ``T1``/``T2`` are the normalization matrices of the first and second
    view; ``None`` means no normalization. Returns ``(F, Rank2Report)``.
    """
    u = _homog(x1)
    up = _homog(x2)
    if T1 is not None:
        u = u @ np.asarray(T1, dtype=float).T
    if T2 is not None:
        up = up @ np.asarray(T2, dtype=float).T
    f, _ = dlt_solve(build_design_matrix(u, up))
    Fn, report = enforce_rank2(f.reshape(3, 3))
    if T1 is None and T2 is None:
        return Fn, report
    return denormalize(Fn, np.eye(3) if T1 is None else T1, np.eye(3) if T2 is None else T2), report


RESIDUAL_KINDS = ("algebraic", "sampson", "sym_epipolar")


def residual(F, x1, x2, kind="sym_epipolar"):
    """Per-correspondence residuals of ``F`` (pixels for ``sym_epipolar``)."""
    if kind not in RESIDUAL_KINDS:
        raise ValueError(f"unknown residual kind {kind!r}")
    F = np.asarray(F, dtype=float)
    u = _homog(x1)
    up = _homog(x2)
    alg = np.abs(np.sum(up * (u @ F.T), axis=-1))
    if kind == "algebraic":
        return alg
    l2 = u @ F.T  # F u, line in the second image
    l1 = up @ F  # F^T u', line in the first image
    n2 = np.hypot(l2[..., 0], l2[..., 1])
    n1 = np.hypot(l1[..., 0], l1[..., 1])
    if np.any(n1 < EPIPOLE_EPS) or np.any(n2 < EPIPOLE_EPS):
        raise EpipoleAtPoint("correspondence lies on an epipole")
    if kind == "sampson":
        return alg**2 / (n1**2 + n2**2)
    return alg * (1.0 / n1 + 1.0 / n2)


def sample_loss(F, x1, x2):
    """Mean symmetric epipolar distance over the correspondences."""
    r = residual(F, x1, x2, "sym_epipolar")
    if r.size == 0:
        raise ValueError("need at least one correspondence")
    return float(np.mean(r))


def fmat_distance(F1, F2):
    """Frobenius distance between unit-norm matrices, minimized over sign."""
    a = np.asarray(F1, dtype=float)
    b = np.asarray(F2, dtype=float)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))

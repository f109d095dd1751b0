"""Five-parameter normalization family and Hartley's isotropic special case.

A normalization matrix is built as ``diag(a1, a2, 1) @ rot(theta) @ shift(-o1, -o2)``:
translate the offset to the origin, rotate, then scale each axis.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CoincidentPoints

SCALE_MIN = 1e-6
SCALE_MAX = 1e6


def wrap_angle(theta):
    """Map an angle into (-pi, pi]."""
    t = np.mod(np.asarray(theta, dtype=float) + np.pi, 2 * np.pi) - np.pi
    t = np.where(t == -np.pi, np.pi, t)
    return float(t) if np.ndim(t) == 0 else t


@dataclass(frozen=True)
class NormParams:
    alpha1: float
    alpha2: float
    theta: float = 0.0
    o1: float = 0.0
    o2: float = 0.0

    def __post_init__(self):
        vals = (self.alpha1, self.alpha2, self.theta, self.o1, self.o2)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite normalization parameters {vals}")
        for a in (self.alpha1, self.alpha2):
            if not SCALE_MIN <= a <= SCALE_MAX:
                raise ValueError(f"scale {a} outside [{SCALE_MIN}, {SCALE_MAX}]")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self):
        return np.array([self.alpha1, self.alpha2, self.theta, self.o1, self.o2])

    @classmethod
    def from_array(cls, a, clip=False):
        a = np.asarray(a, dtype=float)
        a1, a2 = a[0], a[1]
        if clip:
            a1, a2 = np.clip([a1, a2], SCALE_MIN, SCALE_MAX)
        return cls(float(a1), float(a2), float(a[2]), float(a[3]), float(a[4]))


def hartley_params(points):
    """Centroid offset and isotropic scale giving mean distance sqrt(2) from the origin."""
    p = np.asarray(points, dtype=float)[:, :2]
    if p.shape[0] < 2:
        raise ValueError("need at least two points")
    o = p.mean(axis=0)
    d = np.mean(np.hypot(p[:, 0] - o[0], p[:, 1] - o[1]))
    if d < 1e-12:
        raise CoincidentPoints("all points coincide")
    s = np.sqrt(2.0) / d
    return NormParams(s, s, 0.0, float(o[0]), float(o[1]))


def build_T(p):
    """3x3 normalization matrix for ``p`` (a :class:`NormParams`)."""
    c, s = np.cos(p.theta), np.sin(p.theta)
    S = np.diag([p.alpha1, p.alpha2, 1.0])
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    Tr = np.array([[1.0, 0.0, -p.o1], [0.0, 1.0, -p.o2], [0.0, 0.0, 1.0]])
    return S @ R @ Tr


def build_T_batch(params):
    """Vectorized :func:`build_T` for an ``(..., 5)`` parameter array."""
    params = np.asarray(params, dtype=float)
    a1, a2, th, o1, o2 = np.moveaxis(params, -1, 0)
    c, s = np.cos(th), np.sin(th)
    T = np.zeros(params.shape[:-1] + (3, 3))
    T[..., 0, 0] = a1 * c
    T[..., 0, 1] = -a1 * s
    T[..., 0, 2] = -a1 * (c * o1 - s * o2)
    T[..., 1, 0] = a2 * s
    T[..., 1, 1] = a2 * c
    T[..., 1, 2] = -a2 * (s * o1 + c * o2)
    T[..., 2, 2] = 1.0
    return T


def decompose_T(T):
    """Recover :class:`NormParams` from a matrix of the family."""
    T = np.asarray(T, dtype=float)
    M = T[:2, :2]
    a1 = float(np.hypot(*M[0]))
    a2 = float(np.hypot(*M[1]))
    theta = float(np.arctan2(M[1, 0], M[1, 1]))
    o = -np.linalg.solve(M, T[:2, 2])
    return NormParams(a1, a2, theta, float(o[0]), float(o[1]))


def apply_T(T, pts):
    """Transform points; returns the same layout as given ((N, 2) or homogeneous (N, 3))."""
    pts = np.asarray(pts, dtype=float)
    T = np.asarray(T, dtype=float)
    if pts.shape[-1] == 2:
        return pts @ T[:2, :2].T + T[:2, 2]
    out = pts @ T.T
    return out / out[..., 2:3]

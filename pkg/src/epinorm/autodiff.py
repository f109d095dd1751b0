"""Reverse-mode differentiation over numpy arrays, with SVD-derived kernels.

The tape records only what the estimation pipeline and the normalizer
network need: broadcasting arithmetic, matrix products, a handful of
elementwise functions, reductions, reshapes, plus two SVD kernels (the
null vector of a design matrix and the closest rank-2 projection).  All
ops accept leading batch dimensions, so one tape can carry a whole
minibatch.

Example::

    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    y = x * x
    (gx,) = tape.backward(y, wrt=[x])     # -> [6.0]
"""

from dataclasses import dataclass, field

import numpy as np

from . import core
from .errors import EvalFailed, IllConditionedGradient
from .normalization import NormParams, apply_T, build_T, build_T_batch

GAP_RTOL = 1e-10


class Node:
    __slots__ = ("tape", "idx", "value")
    __array_priority__ = 100.0

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __pow__(self, p):
        return power(self, p)

    def __repr__(self):
        return f"Node(idx={self.idx}, shape={self.value.shape})"


class Tape:
    """Append-only record of primitive operations.

    Nodes are appended in evaluation order, so the reverse of append order
    is a valid topological order for the backward sweep.
    """

    def __init__(self):
        self.values = []
        self.parents = []
        self.vjps = []
        # batch mask of samples whose SVD gaps are below GAP_RTOL
        self.ill = None

    def __len__(self):
        return len(self.values)

    def leaf(self, value):
        return self._record(np.asarray(value, dtype=float), (), None)

    def _record(self, value, parents, vjp):
        node = Node(self, len(self.values), value)
        self.values.append(value)
        self.parents.append(parents)
        self.vjps.append(vjp)
        return node

    def flag(self, mask):
        mask = np.asarray(mask, dtype=bool)
        self.ill = mask if self.ill is None else (self.ill | mask)

    def backward(self, out, seed=None, wrt=None):
        """Accumulate d(out . seed)/d(node) for every node; return gradients of ``wrt``.

        ``seed`` defaults to ones, which for a batch of independent losses
        yields per-sample gradients.
        """
        grads = [None] * (out.idx + 1)
        grads[out.idx] = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=float)
        for i in range(out.idx, -1, -1):
            g = grads[i]
            if g is None or self.vjps[i] is None:
                continue
            for p, gp in zip(self.parents[i], self.vjps[i](g)):
                if p is None or gp is None:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
        if wrt is None:
            return grads
        return [np.zeros_like(n.value) if n.idx > out.idx or grads[n.idx] is None else grads[n.idx] for n in wrt]


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _v(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def _i(x):
    return x.idx if isinstance(x, Node) else None


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _op(value, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape._record(value, tuple(_i(x) for x in inputs), vjp)


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    av, bv = _v(a), _v(b)
    return _op(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _v(a), _v(b)
    return _op(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = _v(a), _v(b)
    return _op(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = _v(a), _v(b)
    out = av / bv
    return _op(out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    return _op(-_v(a), (a,), lambda g: (-g,))


def power(a, p):
    av = _v(a)
    return _op(av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def matmul(a, b):
    av, bv = _v(a), _v(b)

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _op(av @ bv, (a, b), vjp)


# ---------------------------------------------------------------- elementwise


def exp(a):
    out = np.exp(_v(a))
    return _op(out, (a,), lambda g: (g * out,))


def log(a):
    av = _v(a)
    return _op(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(_v(a))
    return _op(out, (a,), lambda g: (0.5 * g / out,))


def absolute(a):
    av = _v(a)
    return _op(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def sin(a):
    av = _v(a)
    return _op(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = _v(a)
    return _op(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def relu(a):
    av = _v(a)
    return _op(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def clip(a, lo, hi):
    av = _v(a)
    inside = (av >= lo) & (av <= hi)
    return _op(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions and shapes


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    av = _v(a)
    return _op(av.sum(axis=axis, keepdims=keepdims), (a,), lambda g: (_expand(g, av.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False):
    av = _v(a)
    n = av.size if axis is None else np.prod([av.shape[ax] for ax in np.atleast_1d(axis)])
    return _op(av.mean(axis=axis, keepdims=keepdims), (a,), lambda g: (_expand(g, av.shape, axis, keepdims) / n,))


def amax(a, axis, keepdims=False):
    av = _v(a)
    out = av.max(axis=axis, keepdims=True)
    mask = av == out
    mask = mask / mask.sum(axis=axis, keepdims=True)
    val = out if keepdims else np.squeeze(out, axis)
    return _op(val, (a,), lambda g: (mask * _expand(g, av.shape, axis, keepdims),))


def reshape(a, shape):
    av = _v(a)
    return _op(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def swapaxes(a, ax1=-1, ax2=-2):
    return _op(np.swapaxes(_v(a), ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, key):
    av = _v(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, key, g)
        return (out,)

    return _op(av[key], (a,), vjp)


def stack(xs, axis=0):
    vals = [_v(x) for x in xs]
    shapes = [v.shape for v in vals]
    vals = np.broadcast_arrays(*vals)

    def vjp(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(_unbroadcast(p, s) for p, s in zip(parts, shapes))

    return _op(np.stack(vals, axis=axis), tuple(xs), vjp)


def concatenate(xs, axis=-1):
    vals = [_v(x) for x in xs]
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _op(np.concatenate(vals, axis=axis), tuple(xs), vjp)


# ---------------------------------------------------------------- SVD kernels


def _null_vector_vjp(A, s2, Vt, v, g):
    """Gradient of ``g . v`` w.r.t. ``A`` where ``v`` spans the smallest right singular direction.

    First-order perturbation of an eigenvector of ``A^T A``:
    ``dv = sum_k v_k (v_k^T dM v) / (lam_min - lam_k)`` with ``dM = dA^T A + A^T dA``.
    """
    others = Vt[..., :8, :]
    c = np.einsum("...kj,...j->...k", others, g) / (s2[..., 8:9] - s2[..., :8])
    w = np.einsum("...k,...kj->...j", c, others)
    Av = np.einsum("...ij,...j->...i", A, v)
    Aw = np.einsum("...ij,...j->...i", A, w)
    return Av[..., :, None] * w[..., None, :] + Aw[..., :, None] * v[..., None, :]


def _svd_null(A):
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    s2 = np.zeros(A.shape[:-2] + (9,))
    s2[..., : s.shape[-1]] = s**2
    raw = Vt[..., 8, :]
    v = core.pin_sign(raw)
    # keep Vt consistent with the pinned sign
    Vt = Vt.copy()
    Vt[..., 8, :] = v
    sv = np.sqrt(s2)
    ill = (sv[..., 7] - sv[..., 8]) < GAP_RTOL * sv[..., 0]
    return v, s2, Vt, ill


def null_vector(A):
    """Unit null vector of an ``(..., N, 9)`` design matrix (N >= 8), sign pinned.

    Samples whose gap between the two smallest singular values is below
    ``GAP_RTOL * sigma_1`` are flagged on the tape.
    """
    Av = _v(A)
    v, s2, Vt, ill = _svd_null(Av)
    tape = _tape_of(A)
    if tape is not None:
        tape.flag(ill)
    return _op(v, (A,), lambda g: (_null_vector_vjp(Av, s2, Vt, v, g),))


def _rank2_vjp(U, r, Vt, G):
    """Gradient through ``M -> M - r3 u3 v3^T`` (closest rank-2 matrix)."""
    V = np.swapaxes(Vt, -1, -2)
    u3 = U[..., :, 2]
    v3 = V[..., :, 2]
    r3 = r[..., 2]
    ubar = r3[..., None] * np.einsum("...ij,...j->...i", G, v3)
    vbar = r3[..., None] * np.einsum("...ji,...j->...i", G, u3)
    sbar = np.einsum("...i,...ij,...j->...", u3, G, v3)
    Ubar = np.zeros_like(U)
    Ubar[..., :, 2] = ubar
    Vbar = np.zeros_like(V)
    Vbar[..., :, 2] = vbar
    s2 = r**2
    diff = s2[..., None, :] - s2[..., :, None]
    eye = np.eye(3, dtype=bool)
    Fm = np.where(eye, 0.0, 1.0 / np.where(eye, 1.0, diff))
    UtUb = np.swapaxes(U, -1, -2) @ Ubar
    VtVb = np.swapaxes(V, -1, -2) @ Vbar
    J = Fm * (UtUb - np.swapaxes(UtUb, -1, -2))
    K = Fm * (VtVb - np.swapaxes(VtVb, -1, -2))
    S = r[..., None, :] * np.eye(3)
    inner = J @ S + sbar[..., None, None] * np.diag([0.0, 0.0, 1.0]) + S @ K
    return G - U @ inner @ Vt


def rank2_projection(M):
    """Closest rank-2 matrix to each ``(..., 3, 3)`` input (Frobenius norm)."""
    Mv = _v(M)
    U, r, Vt = np.linalg.svd(Mv)
    out = Mv - r[..., 2, None, None] * U[..., :, 2:3] * Vt[..., 2:3, :]
    tape = _tape_of(M)
    if tape is not None:
        tape.flag((r[..., 1] - r[..., 2]) < GAP_RTOL * r[..., 0])
    return _op(out, (M,), lambda g: (_rank2_vjp(U, r, Vt, g),))


def grad_null_vector(A, upstream):
    """d(upstream . v)/dA for the pinned null vector ``v`` of ``A``."""
    A = np.asarray(A, dtype=float)
    v, s2, Vt, ill = _svd_null(A)
    if np.any(ill):
        raise IllConditionedGradient("smallest singular values of the design matrix are not separated")
    return _null_vector_vjp(A, s2, Vt, v, np.asarray(upstream, dtype=float))


def grad_rank2_projection(Fhat, upstream):
    """d(<upstream, P(Fhat)>)/dFhat for the closest rank-2 projection ``P``."""
    Fhat = np.asarray(Fhat, dtype=float)
    U, r, Vt = np.linalg.svd(Fhat)
    if np.any((r[..., 1] - r[..., 2]) < GAP_RTOL * r[..., 0]):
        raise IllConditionedGradient("second and third singular values nearly tie")
    return _rank2_vjp(U, r, Vt, np.asarray(upstream, dtype=float))


# ---------------------------------------------------------------- pipeline


def norm_matrix(p):
    """Tape version of :func:`epinorm.normalization.build_T` for ``(..., 5)`` parameters."""
    a1, a2, th, o1, o2 = (p[..., k] for k in range(5))
    c, s = cos(th), sin(th)
    zero = np.zeros(_v(a1).shape)
    one = np.ones(_v(a1).shape)
    rows = [
        a1 * c, -(a1 * s), -(a1 * (c * o1 - s * o2)),
        a2 * s, a2 * c, -(a2 * (s * o1 + c * o2)),
        zero, zero, one,
    ]
    T = stack(rows, axis=-1)
    return reshape(T, _v(T).shape[:-1] + (3, 3))


def pipeline(T1, T2, x1, x2):
    """Normalize, solve, enforce rank 2, denormalize, score.

    ``T1``/``T2`` are ``(B, 3, 3)`` normalization matrices (nodes or arrays),
    ``x1``/``x2`` are ``(B, N, 2)`` pixel arrays.  Returns ``(loss, F)``
    where ``loss`` has shape ``(B,)`` (mean symmetric epipolar distance) and
    ``F`` is the unnormalized pixel-space fundamental matrix.
    """
    u = core.to_homogeneous(x1)
    up = core.to_homogeneous(x2)
    B, N = u.shape[:2]
    xh1 = matmul(u, swapaxes(T1))
    xh2 = matmul(up, swapaxes(T2))
    A = reshape(reshape(xh2, (B, N, 3, 1)) * reshape(xh1, (B, N, 1, 3)), (B, N, 9))
    f = null_vector(A)
    Fp = rank2_projection(reshape(f, (B, 3, 3)))
    F = matmul(matmul(swapaxes(T2), Fp), T1)
    l2 = matmul(u, swapaxes(F))
    l1 = matmul(up, F)
    alg = absolute(sum_(up * l2, axis=-1))
    n2 = sqrt(sum_(l2[..., :2] * l2[..., :2], axis=-1))
    n1 = sqrt(sum_(l1[..., :2] * l1[..., :2], axis=-1))
    d = alg * (1.0 / n1 + 1.0 / n2)
    return mean(d, axis=-1), F


def batch_loss(params1, params2, x1, x2):
    """Plain numpy loss for ``(B, 5)`` parameter arrays; NaN where the pipeline fails."""
    loss, _ = pipeline(build_T_batch(params1), build_T_batch(params2), np.asarray(x1, float), np.asarray(x2, float))
    return np.where(np.isfinite(loss), loss, np.nan)


def loss_and_grad_batch(params1, params2, x1, x2, fallback=True):
    """Per-sample loss and gradients for a batch.

    Returns ``(loss, g1, g2, ill, F)``; ``g1``/``g2`` are ``(B, 5)``.
    Samples flagged ill-conditioned get finite-difference gradients when
    ``fallback`` is set, otherwise NaN.
    """
    tape = Tape()
    p1 = tape.leaf(params1)
    p2 = tape.leaf(params2)
    loss, F = pipeline(norm_matrix(p1), norm_matrix(p2), np.asarray(x1, float), np.asarray(x2, float))
    g1, g2 = tape.backward(loss, wrt=[p1, p2])
    ill = np.zeros(len(loss), dtype=bool) if tape.ill is None else tape.ill.copy()
    ill |= ~(np.all(np.isfinite(g1), axis=-1) & np.all(np.isfinite(g2), axis=-1))
    lossv = loss.value.copy()
    for b in np.flatnonzero(ill):
        if not fallback:
            g1[b] = g2[b] = np.nan
            continue
        xb1, xb2 = x1[b], x2[b]
        both = np.concatenate([params1[b], params2[b]])
        g = finite_diff_gradient(lambda q: reference_loss(q[:5], q[5:], xb1, xb2), both)
        g1[b], g2[b] = g[:5], g[5:]
    return lossv, g1, g2, ill, F.value


@dataclass
class LossGrad:
    loss: float
    grad: np.ndarray
    F: np.ndarray
    ill_conditioned: bool = False


def _as5(p):
    return p.as_array() if isinstance(p, NormParams) else np.asarray(p, dtype=float)


def _T(p):
    return build_T(p if isinstance(p, NormParams) else NormParams.from_array(p, clip=True))


def reference_loss(p1, p2, x1, x2):
    """Loss through the plain (non-taped) eight-point route; the oracle's objective."""
    F, _ = core.eight_point(x1, x2, _T(p1), _T(p2))
    return core.sample_loss(F, x1, x2)


def loss_and_grad(p1, p2, x1, x2, optimize_offsets=False):
    """Loss of the full pipeline and its gradient w.r.t. both views' parameters.

    The gradient is ordered ``(a1, a2, theta[, o1, o2])`` of the first view,
    then the same for the second view.  When the analytic derivative is
    ill-conditioned the finite-difference oracle is used and the result is
    flagged.
    """
    x1, x2 = core.check_sample(x1, x2)
    if len(x1) < 8:
        raise ValueError("need at least 8 correspondences")
    # surface degenerate configurations the same way the plain route does
    core.dlt_solve(_normalized_design(p1, p2, x1, x2))
    loss, g1, g2, ill, F = loss_and_grad_batch(_as5(p1)[None], _as5(p2)[None], x1[None], x2[None])
    k = 5 if optimize_offsets else 3
    grad = np.concatenate([g1[0, :k], g2[0, :k]])
    return LossGrad(float(loss[0]), grad, core.canonical_fmat(F[0]), bool(ill[0]))


def _normalized_design(p1, p2, x1, x2):
    return core.build_design_matrix(apply_T(_T(p1), x1), apply_T(_T(p2), x2))


def finite_diff_gradient(fn, params, h=None):
    """Central differences with step ``1e-6 * max(1, |p|)`` per coordinate by default."""
    params = np.asarray(params, dtype=float)
    steps = 1e-6 * np.maximum(1.0, np.abs(params)) if h is None else np.broadcast_to(np.asarray(h, float), params.shape)
    g = np.zeros_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e.flat[i] = steps.flat[i]
        try:
            fp = float(fn(params + e))
            fm = float(fn(params - e))
        except Exception as exc:  # noqa: BLE001 - any probe failure invalidates the oracle
            raise EvalFailed(f"probe {i} failed: {exc}") from exc
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvalFailed(f"probe {i} returned a non-finite value")
        g.flat[i] = (fp - fm) / (2 * steps.flat[i])
    return g


def rel_err(a, n):
    a = np.asarray(a, dtype=float)
    n = np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


@dataclass
class GradCheckReport:
    """Analytic vs numeric gradient of one draw.

    ``flags`` names every reason the numeric reference is not trustworthy
    for this draw: ``"svd_gap"`` (analytic kernel ill-conditioned),
    ``"kink"`` (a probe flipped the sign of an epipolar residual, so the
    loss is not differentiable within the probe span), ``"oracle_noise"``
    (central differences at ``h`` and ``h/2`` disagree beyond tolerance) or
    ``"analytic_noise"`` (the analytic gradient of a reordered copy of the
    sample disagrees beyond tolerance, i.e. round-off dominates a component).
    """

    analytic: np.ndarray
    numeric: np.ndarray
    flags: tuple = ()
    per_param: np.ndarray = field(init=False)

    def __post_init__(self):
        self.per_param = rel_err(self.analytic, self.numeric)

    @property
    def max_rel_err(self):
        return float(self.per_param.max())

    @property
    def ill_conditioned(self):
        return bool(self.flags)


def param_scales(p):
    """Natural scale of each normalization parameter, used to size probe steps."""
    a = _as5(p)
    return np.array([abs(a[0]), abs(a[1]), 1.0, max(abs(a[3]), 1.0 / a[0]), max(abs(a[4]), 1.0 / a[1])])


def _loss_and_signs(q, x1, x2, Fref):
    F, _ = core.eight_point(x1, x2, _T(q[:5]), _T(q[5:]))
    if np.sum(F * Fref) < 0:
        F = -F
    u, up = core.to_homogeneous(x1), core.to_homogeneous(x2)
    return core.sample_loss(F, x1, x2), np.sign(np.sum(up * (u @ F.T), axis=-1))


def gradcheck(p1, p2, x1, x2, optimize_offsets=False, rel_step=1e-4, tol=1e-4):
    """Compare the analytic pipeline gradient with central differences of :func:`reference_loss`.

    Steps are ``rel_step`` times each parameter's natural scale (see
    :func:`param_scales`).
    """
    x1, x2 = core.check_sample(x1, x2)
    lg = loss_and_grad(p1, p2, x1, x2, optimize_offsets=optimize_offsets)
    k = 5 if optimize_offsets else 3
    full = np.concatenate([_as5(p1), _as5(p2)])
    sel = np.r_[0:k, 5 : 5 + k]
    h = rel_step * np.concatenate([param_scales(p1), param_scales(p2)])[sel]
    _, s0 = _loss_and_signs(full, x1, x2, lg.F)
    kink = False

    def fn(q):
        nonlocal kink
        b = full.copy()
        b[sel] = q
        loss, signs = _loss_and_signs(b, x1, x2, lg.F)
        kink = kink or bool(np.any(signs != s0))
        return loss

    num = finite_diff_gradient(fn, full[sel], h=h)
    half = finite_diff_gradient(fn, full[sel], h=h / 2)
    flags = []
    if lg.ill_conditioned:
        flags.append("svd_gap")
    if kink:
        flags.append("kink")
    # the h/2 estimate carries twice the round-off, so disagreement bounds the error at h
    if rel_err(num, half).max() > tol / 4:
        flags.append("oracle_noise")
    # reordering changes only the round-off, never a systematic error in the derivative
    n = len(x1)
    for perm in (np.arange(n)[::-1], np.random.default_rng(0).permutation(n)):
        g = loss_and_grad(p1, p2, x1[perm], x2[perm], optimize_offsets=optimize_offsets).grad
        if rel_err(lg.grad, g).max() > tol / 4:
            flags.append("analytic_noise")
            break
    return GradCheckReport(lg.grad, num, tuple(flags))


__all__ = [
    "Tape", "Node", "add", "sub", "mul", "div", "neg", "power", "matmul", "exp", "log", "sqrt",
    "absolute", "sin", "cos", "relu", "clip", "sum_", "mean", "amax", "reshape", "swapaxes",
    "getitem", "stack", "concatenate", "null_vector", "rank2_projection", "grad_null_vector",
    "grad_rank2_projection", "norm_matrix", "pipeline", "batch_loss", "loss_and_grad_batch",
    "loss_and_grad", "LossGrad", "reference_loss", "finite_diff_gradient", "rel_err",
    "GradCheckReport", "gradcheck"
]

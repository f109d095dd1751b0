"""Permutation-invariant normalizer network and its self-supervised training.

For each view the network sees the 8 correspondences as a point set (own
view first, other view second, each pre-centered and scaled by its mean
distance from the centroid), runs a shared per-point trunk of residual
blocks with context normalization, max-pools every stage into a global
feature, and regresses ``(dlog a1, dlog a2, theta)`` through a per-view
head.  Final scales are ``s_hartley * exp(dlog a)`` and the offset is the
centroid, so an all-zero head reproduces Hartley's normalization exactly.

Training needs no ground truth: the loss is the mean symmetric epipolar
distance of the fundamental matrix estimated with the predicted
normalizations.
"""

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import core
from .errors import (
    BadMagic,
    DegenerateSample,
    EmptyAfterPrefilter,
    NonFiniteLoss,
    ShapeMismatch,
    VersionMismatch,
)
from .normalization import SCALE_MAX, SCALE_MIN, NormParams

MAGIC = b"EPNW"
FORMAT_VERSION = 1
IN_DIM = 4
CN_EPS = 1e-5


@dataclass(frozen=True)
class NetConfig:
    trunk_width: int = 32
    n_resblocks: int = 4
    fc_width: int = 64

    def __post_init__(self):
        if self.trunk_width < 8 or self.fc_width < 8:
            raise ValueError("widths must be at least 8")
        if self.n_resblocks < 1:
            raise ValueError("need at least one residual block")

    def shapes(self):
        """Ordered parameter names and shapes."""
        W, F = self.trunk_width, self.fc_width
        out = [("in.w", (IN_DIM, W)), ("in.b", (W,))]
        for k in range(self.n_resblocks):
            out += [(f"res{k}.w1", (W, W)), (f"res{k}.b1", (W,)), (f"res{k}.w2", (W, W)), (f"res{k}.b2", (W,))]
        out += [("fc1.w", ((self.n_resblocks + 1) * W, F)), ("fc1.b", (F,)), ("fc2.w", (F, F)), ("fc2.b", (F,))]
        for v in (1, 2):
            out += [(f"head{v}.w", (F, 3)), (f"head{v}.b", (3,))]
        return out


@dataclass
class NetWeights:
    config: NetConfig
    params: OrderedDict = field(default_factory=OrderedDict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        expected = self.config.shapes()
        if [k for k, _ in expected] != list(self.params):
            raise ShapeMismatch("parameter names do not match the configuration")
        for name, shape in expected:
            arr = np.asarray(self.params[name], dtype=float)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            self.params[name] = arr

    def copy(self):
        return NetWeights(self.config, OrderedDict((k, v.copy()) for k, v in self.params.items()))

    def equals(self, other):
        return self.config == other.config and all(
            np.array_equal(a, b) and a.tobytes() == b.tobytes() for a, b in zip(self.params.values(), other.params.values())
        )


def init_weights(config=NetConfig(), seed=0):
    """He-initialized trunk, zero heads (Hartley-equivalent output)."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in config.shapes():
        if name.startswith("head") or name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
    return NetWeights(config, params)


# ---------------------------------------------------------------- forward


def hartley_batch(x):
    """Hartley parameters for ``(B, N, 2)`` point sets as a ``(B, 5)`` array."""
    o = x.mean(axis=-2)
    d = np.mean(np.hypot(x[..., 0] - o[..., None, 0], x[..., 1] - o[..., None, 1]), axis=-1)
    s = np.sqrt(2.0) / d
    return np.column_stack([s, s, np.zeros_like(s), o[:, 0], o[:, 1]])


def _centered(x):
    o = x.mean(axis=-2, keepdims=True)
    d = np.mean(np.linalg.norm(x - o, axis=-1), axis=-1)[..., None, None]
    return (x - o) / d


def _context_norm(h):
    mu = ad.mean(h, axis=-2, keepdims=True)
    c = h - mu
    var = ad.mean(c * c, axis=-2, keepdims=True)
    return c / ad.sqrt(var + CN_EPS)


def _network(P, x1, x2):
    """Head outputs ``(B, 3)`` for both views; ``P`` maps names to nodes or arrays."""
    c1, c2 = _centered(x1), _centered(x2)
    B = len(x1)
    X = np.concatenate([np.concatenate([c1, c2], -1), np.concatenate([c2, c1], -1)], axis=0)
    h = ad.relu(_context_norm(X @ P["in.w"] + P["in.b"]))
    pooled = [ad.amax(h, axis=-2)]
    k = 0
    while f"res{k}.w1" in P:
        y = ad.relu(_context_norm(h @ P[f"res{k}.w1"] + P[f"res{k}.b1"]))
        y = _context_norm(y @ P[f"res{k}.w2"] + P[f"res{k}.b2"])
        h = ad.relu(h + y)
        pooled.append(ad.amax(h, axis=-2))
        k += 1
    g = ad.concatenate(pooled, axis=-1)
    z = ad.relu(g @ P["fc1.w"] + P["fc1.b"])
    z = ad.relu(z @ P["fc2.w"] + P["fc2.b"])
    out1 = z[:B] @ P["head1.w"] + P["head1.b"]
    out2 = z[B:] @ P["head2.w"] + P["head2.b"]
    return out1, out2


def _to_params(out, hb):
    """Head output ``(B, 3)`` + Hartley ``(B, 5)`` -> normalization parameters ``(B, 5)``."""
    s = hb[:, 0:1]
    scales = ad.clip(ad.exp(out[:, 0:2]) * s, SCALE_MIN, SCALE_MAX)
    return ad.concatenate([scales, out[:, 2:3], hb[:, 3:5]], axis=-1)


def forward_batch(w, x1, x2):
    """Normalization parameters ``(B, 5)`` for both views of a batch of equal-size samples."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    o1, o2 = _network(w.params, x1, x2)
    return _to_params(o1, hartley_batch(x1)), _to_params(o2, hartley_batch(x2))


def head_outputs(w, x1, x2):
    """Raw ``(dlog a1, dlog a2, theta)`` per view for a single sample."""
    o1, o2 = _network(w.params, np.asarray(x1, float)[None], np.asarray(x2, float)[None])
    return o1[0], o2[0]


N_SUBSETS = 64


def _subset_heads(w, x1, x2, n_subsets, seed):
    """Mean head output over fixed random 8-subsets of the canonically sorted points."""
    from .search import canonical_order

    order = canonical_order(x1, x2)
    x1, x2 = x1[order], x2[order]
    rng = np.random.default_rng(seed)
    idx = np.argsort(rng.random((n_subsets, len(x1))), axis=1)[:, :8]
    o1, o2 = _network(w.params, x1[idx], x2[idx])
    return o1.mean(axis=0), o2.mean(axis=0)


def predict_batch(w, x1, x2, mode="subsets", n_subsets=N_SUBSETS, seed=0):
    """Parameters ``(B, 5)`` per view for ``(B, N, 2)`` samples, any N >= 8.

    With N > 8 the network is either run once over all points (``mode="pool"``)
    or, by default, averaged over ``n_subsets`` 8-point subsets, which keeps
    its inputs in the regime it was trained on.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if mode not in ("subsets", "pool"):
        raise ValueError("mode must be 'subsets' or 'pool'")
    if x1.shape[1] == 8 or mode == "pool":
        return forward_batch(w, x1, x2)
    heads = [_subset_heads(w, a, b, n_subsets, seed) for a, b in zip(x1, x2)]
    o1 = np.stack([h[0] for h in heads])
    o2 = np.stack([h[1] for h in heads])
    return _to_params(o1, hartley_batch(x1)), _to_params(o2, hartley_batch(x2))


def forward(w, x1, x2, mode="subsets", n_subsets=N_SUBSETS, seed=0):
    """Predicted :class:`NormParams` for the two views of one sample (N >= 8)."""
    x1, x2 = core.check_sample(x1, x2)
    if len(x1) < 8:
        raise ValueError("need at least 8 correspondences")
    p1, p2 = predict_batch(w, x1[None], x2[None], mode, n_subsets, seed)
    return NormParams.from_array(p1[0], clip=True), NormParams.from_array(p2[0], clip=True)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.8
    decay_every: int = 10
    batch: int = 16
    epochs: int = 30
    prefilter_px: float = 60.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.lr, self.decay, self.batch, self.epochs, self.prefilter_px, self.decay_every) <= 0:
            raise ValueError("training settings must be positive")

    def lr_at(self, epoch):
        """Learning rate of a 0-indexed epoch."""
        return self.lr * self.decay ** (epoch // self.decay_every)


def raw_eight_point_loss(x1, x2):
    """Loss of the unnormalized eight-point estimate (inf when degenerate)."""
    try:
        F, _ = core.eight_point(x1, x2)
        return core.sample_loss(F, x1, x2)
    except (DegenerateSample, core.EpipoleAtPoint):
        return np.inf


def prefilter(data, threshold_px=60.0):
    """Keep samples whose raw eight-point loss is within ``threshold_px``."""
    return [s for s in data if raw_eight_point_loss(s[0], s[1]) <= threshold_px]


def batch_objective(w, x1, x2, with_grad=True):
    """Mean pipeline loss of a batch and its gradient w.r.t. every network parameter.

    Returns ``(mean_loss, grads, per_sample_loss, n_fallback)`` where
    ``grads`` is an ordered dict matching ``w.params``.
    """
    tape = ad.Tape()
    nodes = OrderedDict((k, tape.leaf(v)) for k, v in w.params.items())
    o1, o2 = _network(nodes, x1, x2)
    p1 = _to_params(o1, hartley_batch(x1))
    p2 = _to_params(o2, hartley_batch(x2))
    with np.errstate(all="ignore"):
        loss, g1, g2, ill, _ = ad.loss_and_grad_batch(p1.value, p2.value, x1, x2)
    if not np.all(np.isfinite(loss)):
        bad = int(np.flatnonzero(~np.isfinite(loss))[0])
        raise NonFiniteLoss(f"batch sample {bad}: non-finite pipeline loss")
    if not with_grad:
        return float(loss.mean()), None, loss, int(ill.sum())
    if not (np.all(np.isfinite(g1)) and np.all(np.isfinite(g2))):
        raise NonFiniteLoss("non-finite gradient w.r.t. normalization parameters")
    n = len(loss)
    J = ad.sum_(p1 * (g1 / n)) + ad.sum_(p2 * (g2 / n))
    grads = tape.backward(J, wrt=list(nodes.values()))
    return float(loss.mean()), OrderedDict(zip(nodes, grads)), loss, int(ill.sum())


class Adamax:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.u = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        corr = lr / (1 - self.b1**self.t)
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.u[k] = np.maximum(self.b2 * self.u[k], np.abs(g))
            params[k] = params[k] - corr * self.m[k] / (self.u[k] + self.eps)


@dataclass
class TrainLog:
    epoch: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    mean_loss: list = field(default_factory=list)
    hartley_loss: float = float("nan")
    best_epoch: int = -1
    n_train: int = 0
    n_fallback: int = 0


def _stack(data):
    return np.stack([s[0] for s in data]), np.stack([s[1] for s in data])


def dataset_loss(w, x1, x2, chunk=512):
    """Per-sample pipeline loss of the network's normalization."""
    out = []
    for i in range(0, len(x1), chunk):
        p1, p2 = forward_batch(w, x1[i : i + chunk], x2[i : i + chunk])
        with np.errstate(all="ignore"):
            out.append(ad.batch_loss(p1, p2, x1[i : i + chunk], x2[i : i + chunk]))
    return np.concatenate(out)


def train(data, cfg=TrainConfig(), net=NetConfig(), weights=None, progress=None):
    """Self-supervised training on 8-point samples ``[(x1, x2, ...), ...]``.

    Returns ``(best_weights, TrainLog)``.  The untrained network (Hartley
    equivalent) counts as epoch ``-1`` when picking the best epoch, so the
    returned weights never have a higher training loss than Hartley.
    """
    data = [s for s in data if len(s[0]) == 8]
    if not data:
        raise ValueError("no 8-point samples to train on")
    kept = prefilter(data, cfg.prefilter_px)
    kept = [s for s in kept if _nondegenerate(s[0], s[1])]
    if not kept:
        raise EmptyAfterPrefilter(f"all {len(data)} samples exceed {cfg.prefilter_px} px")
    x1, x2 = _stack(kept)
    w = init_weights(net, cfg.seed) if weights is None else weights.copy()
    log = TrainLog(n_train=len(kept))
    best = w.copy()
    best_loss = float(np.mean(dataset_loss(w, x1, x2)))
    log.hartley_loss = best_loss
    opt = Adamax(w.params, cfg.beta1, cfg.beta2, cfg.eps)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(kept))
        total = 0.0
        for i in range(0, len(order), cfg.batch):
            idx = order[i : i + cfg.batch]
            loss, grads, per, nfb = batch_objective(w, x1[idx], x2[idx])
            log.n_fallback += nfb
            total += float(per.sum())
            opt.step(w.params, grads, lr)
        mean_loss = total / len(order)
        log.epoch.append(epoch)
        log.lr.append(lr)
        log.mean_loss.append(mean_loss)
        if mean_loss < best_loss:
            best_loss, best = mean_loss, w.copy()
            log.best_epoch = epoch
        if progress is not None:
            progress(epoch, lr, mean_loss)
    return best, log


def _nondegenerate(x1, x2):
    try:
        core.dlt_solve(core.build_design_matrix(*_hartley_normalized(x1, x2)))
        return True
    except DegenerateSample:
        return False


def _hartley_normalized(x1, x2):
    h = hartley_batch(np.stack([x1, x2]))
    return (x1 - h[0, 3:]) * h[0, 0], (x2 - h[1, 3:]) * h[1, 0]


@dataclass
class EvalResult:
    loss_net: np.ndarray
    loss_hartley: np.ndarray
    mean_dist1: np.ndarray
    mean_dist2: np.ndarray
    n_skipped: int

    @property
    def better_rate(self):
        from .diagnostics import better_rate

        return better_rate(self.loss_net, self.loss_hartley)


def evaluate(w, data):
    """Paired per-sample losses (network, Hartley) plus normalized mean origin distances.

    Samples of any size N >= 8 are accepted (see :func:`predict_batch`);
    degenerate ones are skipped.
    """
    if not data:
        raise ValueError("need at least one sample")
    ln, lh, d1, d2 = [], [], [], []
    skipped = 0
    groups = {}
    for s in data:
        x1, x2 = core.check_sample(s[0], s[1])
        if len(x1) < 8 or not _nondegenerate(x1, x2):
            skipped += 1
            continue
        groups.setdefault(len(x1), []).append((x1, x2))
    for n, items in sorted(groups.items()):
        X1, X2 = _stack(items)
        for i in range(0, len(X1), 512):
            a, b = X1[i : i + 512], X2[i : i + 512]
            p1, p2 = predict_batch(w, a, b)
            h1, h2 = hartley_batch(a), hartley_batch(b)
            with np.errstate(all="ignore"):
                ln.append(ad.batch_loss(p1, p2, a, b))
                lh.append(ad.batch_loss(h1, h2, a, b))
            d1.append(_mean_origin_distance(p1, a))
            d2.append(_mean_origin_distance(p2, b))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)  # noqa: E731
    return EvalResult(cat(ln), cat(lh), cat(d1), cat(d2), skipped)


def _mean_origin_distance(p, x):
    from .normalization import build_T_batch

    T = build_T_batch(p)
    y = np.einsum("bij,bnj->bni", T[:, :2, :2], x) + T[:, None, :2, 2]
    return np.linalg.norm(y, axis=-1).mean(axis=-1)


# ---------------------------------------------------------------- weights file


def _pack_config(c):
    return struct.pack("<4I", IN_DIM, c.trunk_width, c.n_resblocks, c.fc_width)


def save_weights(w, path):
    """Little-endian binary: magic, version, config, then named float64 row-major tensors."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(_pack_config(w.config))
    buf.write(struct.pack("<I", len(w.params)))
    for name, arr in w.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise ShapeMismatch("weights file is truncated")
    return b


def load_weights(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise BadMagic(f"{path} is not a weights file")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"weights format {version}, expected {FORMAT_VERSION}")
        in_dim, width, blocks, fc = struct.unpack("<4I", _read(fh, 16))
        if in_dim != IN_DIM:
            raise ShapeMismatch(f"input dimension {in_dim}, expected {IN_DIM}")
        config = NetConfig(width, blocks, fc)
        (count,) = struct.unpack("<I", _read(fh, 4))
        params = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read(fh, 4))
            name = _read(fh, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(_read(fh, 8 * n), dtype="<f8").reshape(shape).astype(float)
        if fh.read(1):
            raise ShapeMismatch("trailing bytes after the last tensor")
    return NetWeights(config, params, version)

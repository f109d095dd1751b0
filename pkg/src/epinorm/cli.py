"""Command-line front end: ``epinorm <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 degenerate data.
"""

import argparse
import sys
from dataclasses import replace

import numpy as np

from . import core, io, net, robust, synth
from .diagnostics import condition_number, gradcheck_sweep, normalized_kappa, rho_series, sample_rho
from .errors import (
    CoincidentPoints,
    DegenerateSample,
    EmptyAfterPrefilter,
    EpinormError,
    EpipoleAtPoint,
    NoConsensus,
    RankDeficient,
    TooFewPoints,
)
from .normalization import NormParams, build_T, hartley_params
from .search import SearchConfig, batch_better_rate, optimize_batch, optimize_sample

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_DEGENERATE = 0, 1, 2, 3
DEGENERATE = (DegenerateSample, CoincidentPoints, RankDeficient, EpipoleAtPoint, TooFewPoints, NoConsensus, EmptyAfterPrefilter)


def _out(path):
    return sys.stdout if path in (None, "-") else path


def load_samples(files, n_samples, seed=0):
    """Draw ``n_samples`` inlier 8-point samples spread evenly over the given files."""
    sets = [io.read_corr(f) for f in files]
    per = -(-n_samples // len(sets))
    out = []
    for i, cs in enumerate(sets):
        for j in range(per):
            if len(out) == n_samples:
                break
            x1, x2 = synth.draw_sample8(cs, seed=[seed, i, j])
            out.append((x1, x2, cs.F))
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(a):
    cfg = synth.SceneConfig(
        n_points=a.n, noise_sigma_px=a.sigma, outlier_frac=a.outliers, motion=a.motion, magnitude=a.magnitude, seed=a.seed
    )
    if a.pairs == 1:
        io.write_corr(a.out, synth.generate_pair(cfg))
        return EXIT_OK
    stem, dot, ext = a.out.rpartition(".")
    if not dot:
        stem, ext = a.out, "epn"
    for k in range(a.pairs):
        s = int(np.random.SeedSequence([a.seed, k]).generate_state(1)[0])
        io.write_corr(f"{stem}_{k:04d}.{ext}", synth.generate_pair(replace(cfg, seed=s)))
    return EXIT_OK


def _strategy_params(strategy, x1, x2, a):
    if strategy == "raw":
        return NormParams(1.0, 1.0), NormParams(1.0, 1.0)
    if strategy == "hartley":
        return hartley_params(x1), hartley_params(x2)
    if strategy == "learned":
        return net.forward(net.load_weights(a.weights), x1, x2)
    r = optimize_sample(x1, x2, SearchConfig(method=a.method, max_iters=a.iters, optimize_offsets=a.offsets))
    return r.p1, r.p2


def _kappa(x1, x2, p1=None, p2=None):
    try:
        if p1 is None:
            return condition_number(core.build_design_matrix(x1, x2)).kappa
        return normalized_kappa(x1, x2, p1, p2)
    except RankDeficient:
        return float("nan")


def cmd_estimate(a):
    cs = io.read_corr(a.input)
    x1, x2 = cs.x1, cs.x2
    if a.inliers_only and cs.labels is not None:
        x1, x2 = x1[cs.labels], x2[cs.labels]
    if len(x1) < 8:
        raise TooFewPoints(f"{len(x1)} correspondences, need 8")
    p1, p2 = _strategy_params(a.strategy, x1, x2, a)
    F, rep = core.eight_point(x1, x2, build_T(p1), build_T(p2))
    dist = core.fmat_distance(F, cs.F) if cs.F is not None else float("nan")
    for row in F:
        print(" ".join(format(v, ".17g") for v in row))
    row = (a.strategy, core.sample_loss(F, x1, x2), _kappa(x1, x2), _kappa(x1, x2, p1, p2), rep.rho, dist)
    io.write_csv(_out(a.out), "estimate", [row])
    return EXIT_OK


def cmd_train(a):
    data = load_samples(a.files, a.samples, a.seed)
    cfg = net.TrainConfig(lr=a.lr, batch=a.batch, epochs=a.epochs, prefilter_px=a.prefilter, seed=a.seed)
    ncfg = net.NetConfig(a.width, a.blocks, a.fc)
    w, log = net.train(data, cfg, ncfg)
    net.save_weights(w, a.out)
    rows = list(zip(log.epoch, log.lr, log.mean_loss))
    if a.log:
        io.write_csv(a.log, "train", rows)
    print(f"trained on {log.n_train} samples; hartley {log.hartley_loss:.6g}; best epoch {log.best_epoch}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(a):
    w = net.load_weights(a.weights)
    res = net.evaluate(w, load_samples(a.files, a.samples, a.seed))
    rows = [(i, h, n) for i, (h, n) in enumerate(zip(res.loss_hartley, res.loss_net))]
    io.write_csv(_out(a.out), "eval", rows)
    print(f"better_rate {res.better_rate:.4f} n {len(rows)} skipped {res.n_skipped}", file=sys.stderr)
    return EXIT_OK


def cmd_optimize(a):
    samples = [(s[0], s[1]) for s in load_samples(a.files, a.samples, a.seed)]
    cfg = SearchConfig(method=a.method, max_iters=a.iters, optimize_offsets=a.offsets)
    br = batch_better_rate(samples, cfg)
    rows = [(i, h, o, it) for i, (h, o, it) in enumerate(zip(br.hartley, br.optimized, br.iters))]
    io.write_csv(_out(a.out), "optimize", rows)
    ge = 100.0 * np.mean(br.optimized <= br.hartley)
    print(f"better_rate {br.rate:.4f} better_or_equal {ge:.4f} skipped {br.n_skipped}", file=sys.stderr)
    return EXIT_OK


def cmd_ransac(a):
    w = net.load_weights(a.weights) if a.strategy == "learned" else None
    cfg = robust.RansacConfig(iters=a.iters, inlier_thresh_px=a.thresh, seed=a.seed, strategy=a.strategy, weights=w)
    rows = []
    for f in a.files:
        cs = io.read_corr(f)
        r = robust.ransac_fmat(cs.x1, cs.x2, cfg)
        f1 = robust.f1_epiline(r.F, cs.x1, cs.x2, cs.F) if cs.F is not None else float("nan")
        rows.append((f, len(cs), a.strategy, robust.inlier_pct(r.F, cs.x1, cs.x2, 0.1),
                     robust.inlier_pct(r.F, cs.x1, cs.x2, 1.0), f1, a.seed))
    io.write_csv(_out(a.out), "ransac", rows)
    return EXIT_OK


def diagnose_rows(samples, weights=None, search=SearchConfig()):
    """Per-sample (kappa_raw, kappa_h, kappa_x, rho_h, rho_x); x is learned if weights are given, else optimized."""
    pairs = [(s[0], s[1]) for s in samples]
    if weights is None:
        xs = [None if r is None else (r.p1, r.p2) for r in optimize_batch(pairs, search)]
    else:
        xs = [net.forward(weights, x1, x2) for x1, x2 in pairs]
    rows = []
    for (x1, x2), px in zip(pairs, xs):
        h1, h2 = hartley_params(x1), hartley_params(x2)
        try:
            rho_h = sample_rho(x1, x2, h1, h2)
        except DegenerateSample:
            continue
        if px is None:
            continue
        rows.append((_kappa(x1, x2), _kappa(x1, x2, h1, h2), _kappa(x1, x2, *px), rho_h, sample_rho(x1, x2, *px)))
    return rows


def cmd_diagnose(a):
    samples = load_samples(a.files, a.samples, a.seed)
    w = net.load_weights(a.weights) if a.weights else None
    rows = diagnose_rows(samples, w, SearchConfig(max_iters=a.iters))
    if not rows:
        raise DegenerateSample("every sample was degenerate")
    io.write_csv(_out(a.out), "diagnose", [(i, *r) for i, r in enumerate(rows)])
    arr = np.array(rows)
    sh, sx = rho_series(arr[:, 3], a.window), rho_series(arr[:, 4], a.window)
    if a.rho_out:
        io.write_csv(a.rho_out, "rho", [(k, h, x) for k, (h, x) in enumerate(zip(sh, sx))])
    ok = np.isfinite(arr[:, 0])
    frac = 100.0 * np.mean(arr[ok, 1] < arr[ok, 0]) if ok.any() else float("nan")
    print(
        f"kappa_h<kappa_raw {frac:.2f}% ; mean rho_h {np.mean(sh):.6g} rho_x {np.mean(sx):.6g}", file=sys.stderr
    )
    return EXIT_OK


def cmd_gradcheck(a):
    if a.files:
        samples = load_samples(a.files, a.draws, a.seed)
    else:
        samples = synth.make_samples(synth.SceneConfig(noise_sigma_px=1.0), a.draws, seed=a.seed)
    reps = gradcheck_sweep(samples, seed=a.seed, optimize_offsets=a.offsets, tol=a.tol)
    names = ["a1", "a2", "theta", "o1", "o2"][: 5 if a.offsets else 3]
    names = [f"{n}_{v}" for v in (1, 2) for n in names]
    rows = []
    for i, r in enumerate(reps):
        for j, n in enumerate(names):
            rows.append((i, n, r.analytic[j], r.numeric[j], r.per_param[j], "|".join(r.flags)))
    io.write_csv(_out(a.out), "gradcheck", rows)
    err = np.array([r.max_rel_err for r in reps])
    flagged = np.array([r.ill_conditioned for r in reps])
    bad = int(np.sum((err >= a.tol) & ~flagged))
    print(f"pass {100 * np.mean(err < a.tol):.2f}% flagged {int(flagged.sum())} unflagged_failures {bad}", file=sys.stderr)
    return EXIT_RUNTIME if bad else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="epinorm", description="Two-view normalization toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic correspondence files")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--outliers", type=float, default=0.0)
    s.add_argument("--motion", choices=synth.MOTIONS, default="forward")
    s.add_argument("--magnitude", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pairs", type=int, default=1, help="write this many files named <stem>_NNNN.<ext>")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def search_args(q):
        q.add_argument("--method", choices=("gradient", "nelder_mead"), default="gradient")
        q.add_argument("--iters", type=int, default=200)
        q.add_argument("--offsets", action="store_true", help="also optimize the offsets")

    e = sub.add_parser("estimate", help="estimate F from one correspondence file")
    e.add_argument("input")
    e.add_argument("--strategy", choices=("raw", "hartley", "optimized", "learned"), default="hartley")
    e.add_argument("--weights")
    e.add_argument("--inliers-only", action="store_true")
    e.add_argument("--out")
    search_args(e)
    e.set_defaults(func=cmd_estimate)

    def sample_args(q, n):
        q.add_argument("files", nargs="+")
        q.add_argument("--samples", type=int, default=n)
        q.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train the normalizer network")
    sample_args(t, 5000)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--prefilter", type=float, default=60.0)
    t.add_argument("--width", type=int, default=32)
    t.add_argument("--blocks", type=int, default=4)
    t.add_argument("--fc", type=int, default=64)
    t.add_argument("--out", required=True, help="weights file")
    t.add_argument("--log", help="training log CSV")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="learned vs Hartley losses")
    sample_args(v, 1000)
    v.add_argument("--weights", required=True)
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    o = sub.add_parser("optimize", help="per-sample parameter search")
    sample_args(o, 500)
    search_args(o)
    o.add_argument("--out")
    o.set_defaults(func=cmd_optimize)

    r = sub.add_parser("ransac", help="RANSAC with a normalization strategy")
    r.add_argument("files", nargs="+")
    r.add_argument("--strategy", choices=robust.STRATEGIES, default="hartley")
    r.add_argument("--weights")
    r.add_argument("--iters", type=int, default=2000)
    r.add_argument("--thresh", type=float, default=1.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    r.set_defaults(func=cmd_ransac)

    d = sub.add_parser("diagnose", help="condition numbers and rho statistics")
    sample_args(d, 500)
    d.add_argument("--weights", help="compare Hartley with the network instead of the optimizer")
    d.add_argument("--iters", type=int, default=200)
    d.add_argument("--window", type=int, default=100)
    d.add_argument("--out")
    d.add_argument("--rho-out")
    d.set_defaults(func=cmd_diagnose)

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    g.add_argument("files", nargs="*")
    g.add_argument("--draws", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--no-offsets", dest="offsets", action="store_false")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)
    return p


def _validate(p, a):
    if getattr(a, "strategy", None) == "learned" and not a.weights:
        p.error("--strategy learned requires --weights")
    for name in ("samples", "draws", "pairs", "epochs", "iters", "window", "n", "batch"):
        if getattr(a, name, 1) is not None and getattr(a, name, 1) < 1:
            p.error(f"--{name} must be positive")


def main(argv=None):
    p = build_parser()
    a = p.parse_args(argv)
    _validate(p, a)
    try:
        return a.func(a)
    except DEGENERATE as exc:
        print(f"epinorm: degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (EpinormError, OSError, ValueError) as exc:
        print(f"epinorm: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Correspondence files and versioned CSV reports.

Correspondence file (text)::

    EPN1 <n>
    F f11 f12 f13 f21 f22 f23 f31 f32 f33      (optional ground truth, row-major)
    u_x u_y up_x up_y [0|1]                     (n lines, label optional)

Floats are written with 17 significant digits, so a write/read cycle is
bit-exact.  Every CSV report starts with a ``# epinorm-csv v<k> <schema>``
comment line; readers reject versions they do not know.
"""

import csv
import os

import numpy as np

from .core import CorrespondenceSet
from .errors import CorrFileError, CsvVersionError

CORR_MAGIC = "EPN1"
CSV_VERSION = 1
_CSV_TAG = "# epinorm-csv"

SCHEMAS = {
    "train": ("epoch", "lr", "mean_loss"),
    "eval": ("sample", "loss_hartley", "loss_learned"),
    "optimize": ("sample", "loss_hartley", "loss_opt", "iters"),
    "ransac": ("file", "n", "strategy", "inliers_0.1", "inliers_1.0", "f1", "seed"),
    "diagnose": ("sample", "kappa_raw", "kappa_h", "kappa_x", "rho_h", "rho_x"),
    "rho": ("window", "rho_h", "rho_x"),
    "gradcheck": ("draw", "param", "analytic", "numeric", "rel_err", "flags"),
    "estimate": ("strategy", "loss", "kappa_raw", "kappa_normalized", "rho", "dist_gt"),
}


def _g(x):
    return format(float(x), ".17g")


def write_corr(path, cs):
    """Write a :class:`CorrespondenceSet` as a correspondence file."""
    x1 = np.asarray(cs.x1, dtype=float)
    x2 = np.asarray(cs.x2, dtype=float)
    if x1.shape != x2.shape or x1.ndim != 2 or x1.shape[1] != 2:
        raise CorrFileError(f"bad correspondence arrays {x1.shape} / {x2.shape}")
    lines = [f"{CORR_MAGIC} {len(x1)}"]
    if cs.F is not None:
        lines.append("F " + " ".join(_g(v) for v in np.asarray(cs.F, float).ravel()))
    labels = None if cs.labels is None else np.asarray(cs.labels, dtype=bool)
    for i in range(len(x1)):
        row = " ".join(_g(v) for v in (*x1[i], *x2[i]))
        if labels is not None:
            row += " 1" if labels[i] else " 0"
        lines.append(row)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_corr(path):
    """Parse a correspondence file; raises :class:`CorrFileError` with the offending line."""
    with open(path, encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise CorrFileError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != CORR_MAGIC:
        raise CorrFileError(f"{path}:1: expected '{CORR_MAGIC} <n>'")
    try:
        n = int(head[1])
    except ValueError:
        raise CorrFileError(f"{path}:1: bad count {head[1]!r}") from None
    body = lines[1:]
    F = None
    if body and body[0].startswith("F"):
        parts = body[0].split()
        if len(parts) != 10:
            raise CorrFileError(f"{path}:2: F line needs 9 values")
        F = np.array([float(v) for v in parts[1:]]).reshape(3, 3)
        body = body[1:]
    if len(body) != n:
        raise CorrFileError(f"{path}: header says {n} pairs, found {len(body)}")
    pts, labels = [], []
    for k, ln in enumerate(body):
        parts = ln.split()
        if len(parts) not in (4, 5):
            raise CorrFileError(f"{path}: pair {k}: expected 4 or 5 fields")
        try:
            pts.append([float(v) for v in parts[:4]])
        except ValueError:
            raise CorrFileError(f"{path}: pair {k}: non-numeric field") from None
        if len(parts) == 5:
            if parts[4] not in ("0", "1"):
                raise CorrFileError(f"{path}: pair {k}: label must be 0 or 1")
            labels.append(parts[4] == "1")
    if labels and len(labels) != n:
        raise CorrFileError(f"{path}: labels present on some lines only")
    arr = np.array(pts, dtype=float).reshape(n, 4)
    if not np.all(np.isfinite(arr)):
        raise CorrFileError(f"{path}: non-finite coordinate")
    return CorrespondenceSet(arr[:, :2].copy(), arr[:, 2:].copy(), F, np.array(labels) if labels else None)


def write_csv(path_or_file, schema, rows):
    """Write rows under a named schema with the version comment line."""
    cols = SCHEMAS[schema]
    own = isinstance(path_or_file, (str, os.PathLike))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        fh.write(f"{_CSV_TAG} v{CSV_VERSION} {schema}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            if len(r) != len(cols):
                raise ValueError(f"{schema} rows need {len(cols)} fields")
            w.writerow([_g(v) if isinstance(v, (float, np.floating)) else v for v in r])
    finally:
        if own:
            fh.close()


def read_csv(path):
    """Return ``(schema, header, rows)``; rows are lists of strings."""
    with open(path, newline="") as fh:
        first = fh.readline().split()
        if len(first) != 4 or " ".join(first[:2]) != _CSV_TAG or not first[2].startswith("v"):
            raise CsvVersionError(f"{path}: missing version line")
        if first[2] != f"v{CSV_VERSION}":
            raise CsvVersionError(f"{path}: unknown version {first[2]}")
        schema = first[3]
        if schema not in SCHEMAS:
            raise CsvVersionError(f"{path}: unknown schema {schema}")
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != SCHEMAS[schema]:
            raise CsvVersionError(f"{path}: header does not match schema {schema}")
        return schema, header, [row for row in r]

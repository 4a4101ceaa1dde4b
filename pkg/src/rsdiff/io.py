"""CSV/JSON serialisation shared by the command-line tools.

Floats go to CSV with 17 significant digits and to JSON through ``repr``
(shortest round-trip form), so every written number reads back bit-exactly.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import GridMismatch
from .invariant import DensityEstimate, Grid
from .simulator import HybridPath


def fmt(v):
    return f"{float(v):.17g}"


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


def write_json(path, obj):
    text = json.dumps(to_jsonable(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_path_csv(path, hp: HybridPath, every=1):
    d = hp.x.shape[1]
    t = hp.times
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i}" for i in range(d)] + ["lambda"])
        for i in range(0, hp.x.shape[0], every):
            w.writerow([fmt(t[i])] + [fmt(v) for v in hp.x[i]] + [int(hp.lam[i])])


def read_path_csv(path, exploded_at=None):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    rec_dt = float(t[1] - t[0]) if t.size > 1 else 1.0
    hp = HybridPath(dt=rec_dt, stride=1, x=data[:, 1:-1].copy(), lam=data[:, -1].astype(np.int16))
    hp.exploded_at = exploded_at
    return hp


def write_density_csv(path, de: DensityEstimate):
    d = de.grid.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["state"] + [f"center_{i}" for i in range(d)] + ["mass", "ref_mass", "rho_hat"])
        for row in de.rows():
            w.writerow([row[0]] + [fmt(v) for v in row[1:]])


def read_density_table(path):
    """``(states, centers, mass, ref_mass, rho)`` arrays from a density CSV."""
    with open(path, encoding="utf-8") as fh:
        header = next(csv.reader(fh))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n_c = sum(h.startswith("center_") for h in header)
    return data[:, 0].astype(int), data[:, 1:1 + n_c], data[:, 1 + n_c], data[:, 2 + n_c], data[:, 3 + n_c]


def compare_density_tables(path_a, path_b):
    sa, ca, ma, _, _ = read_density_table(path_a)
    sb, cb, mb, _, _ = read_density_table(path_b)
    if sa.shape != sb.shape or np.any(sa != sb) or not np.allclose(ca, cb, rtol=1e-12, atol=1e-12):
        raise GridMismatch("density tables are on different bins")
    ma = ma / ma.sum()
    mb = mb / mb.sum()
    per_state = [float(np.abs(ma[sa == k] - mb[sa == k]).sum()) for k in np.unique(sa)]
    return float(sum(per_state)), per_state


def grid_from_spec(spec, potential):
    """Parse ``lo:hi:bins`` (1-d) or return the default grid when ``spec`` is empty."""
    if not spec:
        return Grid.default(potential)
    lo, hi, bins = spec.split(":")
    return Grid.uniform(float(lo), float(hi), int(bins))

"""Occupation-measure estimates of the invariant law and related diagnostics.

Densities are histogram based and always expressed relative to the
reference measure ``pi_k e^V dx``: ``rho_hat = bin mass / reference bin mass``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AllPathsExploded

MIN_REF_MASS = 1e-30
BIN_NODES = 8


@dataclass(frozen=True, eq=False)
class Grid:
    """Axis-aligned bins given by per-axis edge arrays."""

    edges: tuple

    @classmethod
    def uniform(cls, lo, hi, bins):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        bins = np.broadcast_to(np.asarray(bins, dtype=int), lo.shape)
        return cls(tuple(np.linspace(l, h, b + 1) for l, h, b in zip(lo, hi, bins)))

    @classmethod
    def default(cls, potential, bins=200, n_std=6.0):
        lo, hi = potential.default_box(n_std)
        return cls.uniform(lo, hi, bins)

    @property
    def dim(self):
        return len(self.edges)

    @property
    def shape(self):
        return tuple(e.size - 1 for e in self.edges)

    @property
    def centers(self):
        return tuple(0.5 * (e[1:] + e[:-1]) for e in self.edges)

    def same_as(self, other, rtol=1e-12):
        return self.shape == other.shape and all(
            np.allclose(a, b, rtol=rtol, atol=rtol) for a, b in zip(self.edges, other.edges)
        )

    def locate(self, x):
        """Flat bin index per row of ``x`` (``-1`` outside the grid)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        flat = np.zeros(x.shape[0], dtype=np.int64)
        inside = np.ones(x.shape[0], dtype=bool)
        for ax, e in enumerate(self.edges):
            i = np.searchsorted(e, x[:, ax], side="right") - 1
            inside &= (i >= 0) & (i < e.size - 1)
            flat = flat * (e.size - 1) + np.clip(i, 0, e.size - 2)
        flat[~inside] = -1
        return flat


@dataclass(eq=False)
class EmpiricalMeasure:
    grid: Grid
    counts: np.ndarray        # (N, *grid.shape), occupation time
    total_time: float
    out_of_box_time: float
    n_exploded_excluded: int = 0
    n_samples: int = 0

    @property
    def n_states(self):
        return self.counts.shape[0]

    @property
    def masses(self):
        return self.counts / self.total_time

    @property
    def state_fractions(self):
        per_state = self.counts.reshape(self.n_states, -1).sum(axis=1)
        return per_state / per_state.sum()

    @property
    def out_of_box_fraction(self):
        return self.out_of_box_time / self.total_time

    def merge(self, other):
        if not self.grid.same_as(other.grid):
            raise ValueError("cannot merge measures on different grids")
        return EmpiricalMeasure(
            self.grid,
            self.counts + other.counts,
            self.total_time + other.total_time,
            self.out_of_box_time + other.out_of_box_time,
            self.n_exploded_excluded + other.n_exploded_excluded,
            self.n_samples + other.n_samples,
        )


def _histogram(grid, n_states, x, lam, weight):
    flat = grid.locate(x)
    inside = flat >= 0
    n_bins = int(np.prod(grid.shape))
    idx = lam[inside].astype(np.int64) * n_bins + flat[inside]
    counts = np.bincount(idx, minlength=n_states * n_bins).astype(float) * weight
    return counts.reshape((n_states,) + grid.shape), float(np.count_nonzero(~inside)) * weight


def occupation_measure(paths: Sequence, burn_in, grid: Grid, n_states) -> EmpiricalMeasure:
    """Time-weighted occupation of ``(x, k)`` bins after ``burn_in``.

    Each recorded sample ``(x_i, k_i)`` stands for the interval
    ``[t_i, t_i + record_dt)`` (left-endpoint rule); exploded paths are
    skipped and counted.
    """
    counts = np.zeros((n_states,) + grid.shape)
    total = 0.0
    outside = 0.0
    n_expl = 0
    n_samples = 0
    for p in paths:
        if p.exploded:
            n_expl += 1
            continue
        i0 = int(math.ceil(burn_in / p.record_dt - 1e-9))
        x = p.x[i0:-1]
        lam = p.lam[i0:-1]
        if x.shape[0] == 0:
            continue
        c, out = _histogram(grid, n_states, x, lam, p.record_dt)
        counts += c
        outside += out
        total += x.shape[0] * p.record_dt
        n_samples += x.shape[0]
    if total == 0.0:
        raise AllPathsExploded(f"all {len(paths)} paths exploded or were empty after burn-in")
    return EmpiricalMeasure(grid, counts, total, outside, n_expl, n_samples)


def measure_from_samples(grid, n_states, x, lam, dt=1.0):
    """Empirical measure of a plain sample (e.g. i.i.d. draws), each carrying time ``dt``."""
    x = np.asarray(x, dtype=float).reshape(len(lam), -1)
    lam = np.asarray(lam)
    counts, outside = _histogram(grid, n_states, x, lam, dt)
    return EmpiricalMeasure(grid, counts, lam.size * dt, outside, 0, lam.size)


# --------------------------------------------------------------------------
# density relative to the reference measure
# --------------------------------------------------------------------------

def reference_bin_masses(ref, grid: Grid, nodes=BIN_NODES):
    """``pi_k int_bin e^V`` by tensor Gauss-Legendre with ``nodes`` points per axis and bin."""
    t, w = np.polynomial.legendre.leggauss(nodes)
    axes_x = []
    axes_w = []
    for e in grid.edges:
        half = 0.5 * np.diff(e)
        mid = 0.5 * (e[1:] + e[:-1])
        axes_x.append(mid[:, None] + half[:, None] * t[None, :])   # (bins, nodes)
        axes_w.append(half[:, None] * w[None, :])
    d = grid.dim
    mesh = np.meshgrid(*[a.reshape(-1) for a in axes_x], indexing="ij")
    pts = np.stack(mesh, axis=-1).reshape(-1, d)
    vals = np.exp(np.asarray(ref.potential.value(pts), dtype=float))
    wt = np.ones(1)
    for a in axes_w:
        wt = np.multiply.outer(wt, a.reshape(-1)).reshape(-1)
    shape = []
    for b in grid.shape:
        shape += [b, nodes]
    per = (vals * wt).reshape(shape)
    per = per.sum(axis=tuple(range(1, 2 * d, 2)))
    return np.asarray(ref.pi)[(slice(None),) + (None,) * d] * per[None]


@dataclass(eq=False)
class DensityEstimate:
    grid: Grid
    rho: np.ndarray
    mass: np.ndarray
    ref_mass: np.ndarray
    excluded: np.ndarray
    n_samples: int = 0
    out_of_box_fraction: float = 0.0
    note: str = "histogram estimate, bin width = grid spacing"

    @property
    def n_states(self):
        return self.rho.shape[0]

    def rows(self):
        """``(state, centers..., mass, ref_mass, rho_hat)`` for every bin."""
        centers = np.meshgrid(*self.grid.centers, indexing="ij")
        flat_c = [c.reshape(-1) for c in centers]
        out = []
        for k in range(self.n_states):
            m = self.mass[k].reshape(-1)
            r = self.ref_mass[k].reshape(-1)
            h = self.rho[k].reshape(-1)
            for i in range(m.size):
                out.append((k, *[c[i] for c in flat_c], m[i], r[i], h[i]))
        return out


def density_vs_reference(em: EmpiricalMeasure, ref) -> DensityEstimate:
    ref_mass = reference_bin_masses(ref, em.grid)
    excluded = ref_mass < MIN_REF_MASS
    mass = em.masses
    rho = np.where(excluded, 0.0, mass / np.where(excluded, 1.0, ref_mass))
    return DensityEstimate(em.grid, rho, mass, ref_mass, excluded, em.n_samples, em.out_of_box_fraction)


def relative_entropy(de: DensityEstimate, renormalize=False):
    """``sum rho log rho * reference mass`` over included bins (``0 log 0 = 0``).

    With ``renormalize`` both the empirical and the reference masses are
    rescaled to probability vectors over the included bins first.
    """
    keep = ~de.excluded
    mass = np.where(keep, de.mass, 0.0)
    ref = np.where(keep, de.ref_mass, 0.0)
    if renormalize:
        mass = mass / mass.sum()
        ref = ref / ref.sum()
    pos = keep & (mass > 0)
    rho = mass[pos] / ref[pos]
    return float(np.sum(rho * np.log(rho) * ref[pos]))


def l1_to_reference(de: DensityEstimate):
    """Total L1 distance of bin masses and per-state distances of the conditional histograms."""
    total = float(np.abs(de.mass - de.ref_mass).sum())
    per_state = []
    for k in range(de.n_states):
        m = de.mass[k] / de.mass[k].sum()
        r = de.ref_mass[k] / de.ref_mass[k].sum()
        per_state.append(float(np.abs(m - r).sum()))
    return total, per_state


@dataclass(frozen=True)
class PositivityResult:
    min_rho: float
    per_state_min: tuple
    per_state_verdict: tuple
    verdict: str

    def to_dict(self):
        return {"min_rho": self.min_rho, "per_state_min": list(self.per_state_min),
                "per_state_verdict": list(self.per_state_verdict), "verdict": self.verdict}


def positivity_diagnostic(de: DensityEstimate, lo, hi, min_expected_hits=100) -> PositivityResult:
    """Smallest ``rho_hat`` over bins whose centres lie in the box ``[lo, hi]``.

    A state is ``positive`` when every such bin has at least
    ``min_expected_hits`` expected samples under the reference measure and a
    strictly positive estimate, ``insufficient_data`` when some bin is
    under-sampled, ``not_positive`` otherwise.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    centers = np.meshgrid(*de.grid.centers, indexing="ij")
    in_box = np.ones(de.grid.shape, dtype=bool)
    for ax, c in enumerate(centers):
        in_box &= (c >= lo[ax]) & (c <= hi[ax])
    if not in_box.any():
        raise ValueError("no bin centre inside the requested box")
    mins, verdicts = [], []
    for k in range(de.n_states):
        sel = in_box & ~de.excluded[k]
        expected = de.ref_mass[k][sel] * de.n_samples
        m = float(de.rho[k][sel].min())
        mins.append(m)
        if np.any(expected < min_expected_hits):
            verdicts.append("insufficient_data")
        elif m > 0:
            verdicts.append("positive")
        else:
            verdicts.append("not_positive")
    if all(v == "positive" for v in verdicts):
        overall = "positive"
    elif "not_positive" in verdicts:
        overall = "not_positive"
    else:
        overall = "insufficient_data"
    return PositivityResult(min(mins), tuple(mins), tuple(verdicts), overall)


def convergence_diagnostic(path, window_count, grid: Grid, n_states, burn_in=0.0):
    """L1 distances between successive cumulative occupation histograms.

    The recorded samples after ``burn_in`` are cut into ``window_count``
    equal blocks; histogram ``j`` pools blocks ``1..j``.  Returns
    ``(distances, trend)`` where ``trend`` is the least-squares slope of
    ``log distance`` against ``log j`` (``nan`` when undefined).
    """
    if window_count < 2:
        raise ValueError("window_count must be at least 2")
    i0 = int(math.ceil(burn_in / path.record_dt - 1e-9))
    x = path.x[i0:-1]
    lam = path.lam[i0:-1]
    blocks = np.array_split(np.arange(x.shape[0]), window_count)
    acc = np.zeros((n_states,) + grid.shape)
    prev = None
    dists = []
    for b in blocks:
        c, _ = _histogram(grid, n_states, x[b], lam[b], 1.0)
        acc = acc + c
        cur = acc / max(acc.sum(), 1.0)
        if prev is not None:
            dists.append(float(np.abs(cur - prev).sum()))
        prev = cur
    dists = np.array(dists)
    pos = dists > 0
    if pos.sum() >= 2:
        j = np.arange(2, window_count + 1)[pos]
        trend = float(np.polyfit(np.log(j), np.log(dists[pos]), 1)[0])
    else:
        trend = math.nan
    return dists, trend

"""Finite-difference solver for the stationary system of per-state densities (d = 1).

For each state ``k`` the unknown ``h_k`` solves

    (a_k h_k)'' - (b_k h_k)' + sum_j q_jk(x) h_j = 0

on a truncated interval with zero-flux ends.  The diffusion/drift part is
written in flux form, ``J = b h - (a h)'``, with centred interface values,
so that the trapezoid-weighted column sums of the operator vanish exactly
and discrete mass is conserved.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, spsolve, splu, svds

from .errors import GridMismatch, NullSpaceDimensionAmbiguous
from .model import drift

log = logging.getLogger(__name__)

AMBIGUITY_RATIO = 1e3
MAX_UNKNOWNS = 100_000


@dataclass(frozen=True, eq=False)
class Grid1D:
    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if self.n < 16:
            raise ValueError("grid needs at least 16 nodes")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @property
    def h(self):
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def nodes(self):
        return np.linspace(self.x_min, self.x_max, self.n)

    @property
    def weights(self):
        """Trapezoid weights."""
        w = np.full(self.n, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w


def _coefficients(model, grid):
    x = grid.nodes
    n_st = model.n_states
    a = np.empty((n_st, grid.n))
    b = np.empty((n_st, grid.n))
    q = np.empty((grid.n, n_st, n_st))
    for i, xi in enumerate(x):
        p = np.array([xi])
        q[i] = model.q(p)
        for k in range(n_st):
            a[k, i] = float(np.atleast_2d(model.a(p, k))[0, 0])
            b[k, i] = float(drift(model, p, k)[0])
    return a, b, q


def assemble_adjoint(model, grid: Grid1D):
    """Sparse ``(N n) x (N n)`` operator; unknowns ordered state-major (``k * n + i``)."""
    if model.dim != 1:
        raise ValueError("the stationary solver handles d = 1 only")
    n, h = grid.n, grid.h
    n_st = model.n_states
    if n * n_st > MAX_UNKNOWNS:
        raise ValueError(f"at most {MAX_UNKNOWNS} unknowns")
    a, b, q = _coefficients(model, grid)
    rows, cols, vals = [], [], []

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    # cell scaling: interior nodes own a cell of width h, end nodes h/2
    scale = np.full(n, 1.0 / h)
    scale[0] = scale[-1] = 2.0 / h
    for k in range(n_st):
        off = k * n
        for i in range(n - 1):
            # flux J_{i+1/2} = b_mid (h_i + h_{i+1}) / 2 - (a_{i+1} h_{i+1} - a_i h_i) / h
            bm = 0.5 * (b[k, i] + b[k, i + 1])
            c_left = 0.5 * bm + a[k, i] / h
            c_right = 0.5 * bm - a[k, i + 1] / h
            # the flux leaves node i and enters node i+1
            put(off + i, off + i, -scale[i] * c_left)
            put(off + i, off + i + 1, -scale[i] * c_right)
            put(off + i + 1, off + i, scale[i + 1] * c_left)
            put(off + i + 1, off + i + 1, scale[i + 1] * c_right)
        for j in range(n_st):
            for i in range(n):
                if q[i, j, k] != 0.0:
                    put(off + i, j * n + i, q[i, j, k])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n_st * n, n_st * n))
    A.sum_duplicates()
    return A


def mass_weights(grid: Grid1D, n_states):
    return np.tile(grid.weights, n_states)


@dataclass(frozen=True, eq=False)
class StationarySolution:
    grid: Grid1D
    h_hat: np.ndarray          # (N, n)
    residual_norm: float
    normalized: bool
    singular_values: tuple = ()

    @property
    def n_states(self):
        return self.h_hat.shape[0]

    @property
    def state_masses(self):
        return self.h_hat @ self.grid.weights

    def density(self, k):
        return self.h_hat[k]


def smallest_singular_values(A, k=2):
    """Two smallest singular values of ``A`` via a factorisation of ``A - s I``.

    ``s`` is a tiny shift so that the factorisation exists when ``A`` is
    exactly singular; it perturbs the values by at most ``s``.
    """
    m = A.shape[0]
    norm = float(abs(A).sum(axis=0).max())
    shift = 1e-12 * norm
    lu = splu((A - shift * sp.identity(m, format="csr")).tocsc())
    inv = LinearOperator((m, m), matvec=lambda v: lu.solve(v), rmatvec=lambda v: lu.solve(v, trans="T"),
                         dtype=float)
    v0 = np.ones(m) / math.sqrt(m)
    s = svds(inv, k=k, which="LM", v0=v0, return_singular_vectors=False, tol=1e-8)
    return np.sort(1.0 / s)


def solve_null_space(A, grid: Grid1D = None, n_states=None, check_ambiguity=True) -> StationarySolution:
    """Stationary density stack from the null space of ``A``.

    The discrete normalisation ``w^T h = 1`` (trapezoid weights) is appended
    as a bordering row and column, which makes the system nonsingular
    exactly when the null space of ``A`` is one-dimensional.
    """
    A = sp.csr_matrix(A)
    m = A.shape[0]
    if grid is None:
        raise ValueError("grid is required")
    n_states = n_states or m // grid.n
    if n_states * grid.n != m:
        raise GridMismatch("operator size does not match grid")
    svals = ()
    if check_ambiguity:
        svals = tuple(float(s) for s in smallest_singular_values(A))
        s1, s2 = svals
        if s2 < AMBIGUITY_RATIO * s1:
            raise NullSpaceDimensionAmbiguous(svals)
    w = mass_weights(grid, n_states)
    bordered = sp.bmat([[A, sp.csr_matrix(w[:, None])], [sp.csr_matrix(w[None, :]), None]], format="csc")
    rhs = np.zeros(m + 1)
    rhs[-1] = 1.0
    sol = spsolve(bordered, rhs)
    hvec = sol[:m]
    if w @ hvec < 0:
        hvec = -hvec
    res = float(np.linalg.norm(A @ hvec) / np.linalg.norm(hvec))
    return StationarySolution(grid, hvec.reshape(n_states, grid.n), res, True, svals)


def solve_stationary(model, grid: Grid1D, check_ambiguity=True) -> StationarySolution:
    return solve_null_space(assemble_adjoint(model, grid), grid, model.n_states, check_ambiguity)


def bin_masses(sol: StationarySolution, edges):
    """Integrate the piecewise-linear interpolant of each ``h_k`` over the bins ``edges``."""
    x = sol.grid.nodes
    edges = np.asarray(edges, dtype=float)
    if edges[0] < x[0] - 1e-12 or edges[-1] > x[-1] + 1e-12:
        raise GridMismatch("bins extend beyond the oracle grid")
    out = np.empty((sol.n_states, edges.size - 1))
    for k in range(sol.n_states):
        cum = _cumulative_linear(x, sol.h_hat[k], edges)
        out[k] = np.diff(cum)
    return out


def _cumulative_linear(x, y, t):
    """``int_{x_0}^{t} interp(x, y)`` for each ``t``."""
    seg = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))])
    i = np.clip(np.searchsorted(x, t, side="right") - 1, 0, x.size - 2)
    dx = t - x[i]
    slope = (y[i + 1] - y[i]) / (x[i + 1] - x[i])
    return seg[i] + y[i] * dx + 0.5 * slope * dx * dx


def compare_mc_vs_oracle(de, sol: StationarySolution):
    """L1 distance between the estimate's bin masses and the oracle's, total and per state.

    Both sides are normalised to total mass one over the shared bins.
    """
    grid = de.grid
    if grid.dim != 1:
        raise GridMismatch("oracle comparison needs a one-dimensional grid")
    if de.n_states != sol.n_states:
        raise GridMismatch("number of states differs")
    oracle = bin_masses(sol, grid.edges[0])
    oracle = oracle / oracle.sum()
    mc = de.mass / de.mass.sum()
    per_state = np.abs(mc - oracle).sum(axis=1)
    return float(per_state.sum()), per_state.tolist()


def max_relative_error(sol: StationarySolution, exact, k=0):
    """``max |h - p| / max p`` over the grid nodes."""
    p = exact(sol.grid.nodes)
    return float(np.max(np.abs(sol.h_hat[k] - p)) / np.max(p))

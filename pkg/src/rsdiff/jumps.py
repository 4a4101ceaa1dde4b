"""Interval construction of the switching mechanism and its samplers.

For a conservative ``Q(x)`` the half-line is cut into consecutive intervals
``Gamma_ij(x)`` of length ``q_ij(x)``: row 0 first (pairs (0,1), (0,2), ...),
then row 1 starting at ``q_0(x)``, row 2 at ``q_0(x) + q_1(x)`` and so on.
A mark ``z`` of the driving Poisson measure sends state ``i`` to ``j`` iff
``z`` lies in ``Gamma_ij(x)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BoundViolated

BOUND_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class GammaPartition:
    lo: np.ndarray         # (N, N), empty intervals have lo == hi
    hi: np.ndarray
    row_start: np.ndarray  # (N + 1,) cumulative exit rates

    @property
    def n_states(self):
        return self.lo.shape[0]

    def interval(self, i, j):
        """``(lo, hi)`` or ``None`` for an empty interval."""
        lo, hi = self.lo[i, j], self.hi[i, j]
        return None if hi <= lo else (float(lo), float(hi))


def build_gamma(q) -> GammaPartition:
    """Lay out ``Gamma_ij`` with cumulative offsets in ascending ``(i, j)`` order, ``j != i``."""
    q = np.asarray(getattr(q, "entries", q), dtype=float)
    n = q.shape[0]
    lo = np.zeros((n, n))
    hi = np.zeros((n, n))
    row_start = np.zeros(n + 1)
    cursor = 0.0
    for i in range(n):
        row_start[i] = cursor
        for j in range(n):
            if j == i:
                lo[i, j] = hi[i, j] = cursor
                continue
            lo[i, j] = cursor
            cursor = cursor + q[i, j]
            hi[i, j] = cursor
    row_start[n] = cursor
    return GammaPartition(lo, hi, row_start)


def h_eval(partition: GammaPartition, i: int, z: float) -> int:
    """Jump size ``j - i`` if ``z`` lies in ``Gamma_ij``, 0 otherwise."""
    if z < partition.row_start[i] or z >= partition.row_start[i + 1]:
        return 0
    for j in range(partition.n_states):
        if j != i and partition.lo[i, j] <= z < partition.hi[i, j]:
            return j - i
    return 0


@dataclass(frozen=True)
class JumpEvent:
    time: float
    mark_z: float
    from_state: int
    to_state: int
    accepted: bool


def proposal_probability(c_q, dt):
    return -math.expm1(-c_q * dt)


def sample_switch_thinning(q_field, x, i, c_q, dt, rng, time=0.0) -> Optional[JumpEvent]:
    """One thinning step from state ``i`` with rates frozen at ``x``.

    A candidate arrives with probability ``1 - exp(-c_q dt)``; its mark is
    uniform on ``[row_start_i, row_start_i + c_q)`` and the candidate is
    accepted iff the mark hits one of the row-``i`` intervals.  Two uniforms
    are consumed on every call so that streams stay aligned.
    """
    u = rng.random(2)
    return thinning_from_uniforms(q_field, x, i, c_q, dt, u[0], u[1], time)


def thinning_from_uniforms(q_field, x, i, c_q, dt, u_prop, u_mark, time=0.0):
    if u_prop >= proposal_probability(c_q, dt):
        return None
    q = np.asarray(q_field(np.atleast_1d(x)), dtype=float)
    part = build_gamma(q)
    q_i = part.row_start[i + 1] - part.row_start[i]
    if q_i > c_q * (1 + BOUND_RTOL):
        raise BoundViolated(f"q_{i}(x) = {q_i} exceeds dominating rate {c_q}")
    z = part.row_start[i] + c_q * u_mark
    jump = h_eval(part, i, z)
    return JumpEvent(time, float(z), i, i + jump, jump != 0)


def bernoulli_from_uniform(q_field, x, i, dt, u, time=0.0):
    """First-order scheme: jump to ``j`` with probability ``q_ij(x) dt``.

    Equivalent to a mark of intensity ``1/dt`` over the row, so it is
    reported in the same audit format.
    """
    q = np.asarray(q_field(np.atleast_1d(x)), dtype=float)
    part = build_gamma(q)
    z = part.row_start[i] + u * (1.0 / dt)
    jump = h_eval(part, i, z)
    if jump == 0:
        return None
    return JumpEvent(time, float(z), i, i + jump, True)


def sample_switch_bernoulli(q_field, x, i, dt, rng, time=0.0):
    u = rng.random(2)
    return bernoulli_from_uniform(q_field, x, i, dt, u[0], time)


def write_jump_log(path, events):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "z", "from", "to", "accepted"])
        for ev in events:
            w.writerow([f"{ev.time:.17g}", f"{ev.mark_z:.17g}", ev.from_state, ev.to_state, int(ev.accepted)])

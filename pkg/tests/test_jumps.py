import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from rsdiff.errors import BoundViolated
from rsdiff.jumps import (
    build_gamma,
    h_eval,
    proposal_probability,
    sample_switch_bernoulli,
    sample_switch_thinning,
    thinning_from_uniforms,
    write_jump_log,
)
from rsdiff.model import QMatrixSample


def q2(q12, q21):
    return np.array([[-q12, q12], [q21, -q21]], dtype=float)


def test_two_state_layout():
    p = build_gamma(q2(2, 3))
    assert p.interval(0, 1) == (0.0, 2.0)
    assert p.interval(1, 0) == (2.0, 5.0)


def test_empty_interval():
    p = build_gamma(q2(0, 3))
    assert p.interval(0, 1) is None
    assert p.interval(0, 0) is None


def test_three_state_layout():
    q = np.array([[-3, 1, 2], [3, -7, 4], [0.5, 0.5, -1]], dtype=float)
    p = build_gamma(QMatrixSample(q, np.zeros(1)))
    assert p.interval(0, 1) == (0.0, 1.0)
    assert p.interval(0, 2) == (1.0, 3.0)
    assert p.interval(1, 0) == (3.0, 6.0)
    assert p.interval(1, 2) == (6.0, 10.0)
    assert p.interval(2, 0) == (10.0, 10.5)


def test_h_eval_examples():
    p = build_gamma(q2(2, 3))
    assert h_eval(p, 0, 1.5) == 1
    assert h_eval(p, 1, 3.0) == -1
    assert h_eval(p, 0, 2.5) == 0
    assert h_eval(p, 0, 2.0) == 0      # half-open: 2.0 belongs to row 2
    assert h_eval(p, 1, 2.0) == -1


@st.composite
def q_matrices(draw):
    n = draw(st.integers(1, 6))
    rates = np.array(draw(st.lists(st.floats(0, 10), min_size=n * n, max_size=n * n))).reshape(n, n)
    zero = draw(st.lists(st.booleans(), min_size=n * n, max_size=n * n))
    rates[np.array(zero).reshape(n, n)] = 0.0
    np.fill_diagonal(rates, 0.0)
    np.fill_diagonal(rates, -rates.sum(axis=1))
    return rates


@settings(max_examples=200, deadline=None)
@given(q_matrices())
def test_partition_disjoint_and_row_lengths(q):
    p = build_gamma(q)
    n = q.shape[0]
    ivs = sorted(p.interval(i, j) for i in range(n) for j in range(n) if p.interval(i, j))
    for (lo1, hi1), (lo2, hi2) in zip(ivs, ivs[1:]):
        assert hi1 <= lo2
    for i in range(n):
        total = sum(hi - lo for j in range(n) if (iv := p.interval(i, j)) for lo, hi in [iv])
        q_i = q[i].sum() - q[i, i]
        assert total == pytest.approx(q_i, rel=1e-12, abs=1e-12)
        assert p.row_start[i + 1] - p.row_start[i] == pytest.approx(q_i, rel=1e-12, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(q_matrices(), st.floats(0, 1), st.integers(0, 5))
def test_h_round_trip(q, frac, i):
    n = q.shape[0]
    i = i % n
    p = build_gamma(q)
    z = p.row_start[i] + frac * (p.row_start[i + 1] - p.row_start[i])
    jump = h_eval(p, i, z)
    if jump != 0:
        lo, hi = p.interval(i, i + jump)
        assert lo <= z < hi


def test_zero_rate_never_accepts():
    rng = np.random.default_rng(0)
    qf = lambda x: q2(0.0, 1.0)
    evs = [sample_switch_thinning(qf, [0.0], 0, 2.0, 0.1, rng) for _ in range(2000)]
    assert all(ev is None or not ev.accepted for ev in evs)


def test_acceptance_fraction():
    rng = np.random.default_rng(1)
    qf = lambda x: q2(1.5, 1.0)
    c_q, n = 4.0, 40000
    evs = [sample_switch_thinning(qf, [0.0], 0, c_q, 0.05, rng) for _ in range(n)]
    props = [e for e in evs if e is not None]
    frac = np.mean([e.accepted for e in props])
    p = 1.5 / c_q
    assert abs(frac - p) < 3 * math.sqrt(p * (1 - p) / len(props))
    assert abs(len(props) / n - proposal_probability(c_q, 0.05)) < 3 * math.sqrt(0.2 * 0.8 / n)


def test_bound_violated():
    with pytest.raises(BoundViolated):
        thinning_from_uniforms(lambda x: q2(5.0, 1.0), [0.0], 0, 2.0, 0.1, 0.0, 0.5)


def test_accepted_event_consistent_with_h():
    rng = np.random.default_rng(2)
    q = np.array([[-3, 1, 2], [3, -7, 4], [0.5, 0.5, -1]], dtype=float)
    p = build_gamma(q)
    for _ in range(500):
        ev = sample_switch_thinning(lambda x: q, [0.0], 1, 8.0, 0.5, rng)
        if ev is not None and ev.accepted:
            assert ev.to_state - ev.from_state == h_eval(p, 1, ev.mark_z) != 0


def test_transition_law_chi2():
    """Embedded jump chain of constant Q: destination frequencies follow q_ij / q_i."""
    rng = np.random.default_rng(4)
    q = np.array([[-3, 1, 2], [3, -7, 4], [0.5, 0.5, -1]], dtype=float)
    counts = np.zeros((3, 3))
    k = 0
    n_jumps = 0
    c_q = 7.0
    u = rng.random((600_000, 2))
    for a, b in u:
        ev = thinning_from_uniforms(lambda x: q, [0.0], k, c_q, 1.0, a, b)
        if ev is not None and ev.accepted:
            counts[k, ev.to_state] += 1
            k = ev.to_state
            n_jumps += 1
            if n_jumps >= 100_000:
                break
    assert n_jumps == 100_000
    for i in range(3):
        row = counts[i]
        probs = np.where(np.arange(3) == i, 0.0, q[i]) / (q[i].sum() - q[i, i])
        keep = probs > 0
        _, pval = stats.chisquare(row[keep], row[keep].sum() * probs[keep])
        assert pval > 0.01


def test_bernoulli_probability():
    rng = np.random.default_rng(5)
    qf = lambda x: q2(2.0, 1.0)
    dt, n = 0.05, 40000
    hits = sum(sample_switch_bernoulli(qf, [0.0], 0, dt, rng) is not None for _ in range(n))
    assert abs(hits / n - 2.0 * dt) < 3 * math.sqrt(0.1 * 0.9 / n)


def test_jump_log(tmp_path):
    from rsdiff.jumps import JumpEvent

    path = tmp_path / "j.csv"
    write_jump_log(path, [JumpEvent(0.1, 1.5, 0, 1, True), JumpEvent(0.2, 2.5, 1, 1, False)])
    lines = path.read_text().splitlines()
    assert lines[0] == "t,z,from,to,accepted"
    assert lines[1] == "0.10000000000000001,1.5,0,1,1"

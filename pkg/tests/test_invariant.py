import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from rsdiff.errors import AllPathsExploded
from rsdiff.families import constant_q_model, default_reference, ou_model
from rsdiff.invariant import (
    DensityEstimate,
    EmpiricalMeasure,
    Grid,
    convergence_diagnostic,
    density_vs_reference,
    l1_to_reference,
    measure_from_samples,
    occupation_measure,
    positivity_diagnostic,
    reference_bin_masses,
    relative_entropy,
)
from rsdiff.model import GaussianPotential, ReferenceMeasure
from rsdiff.simulator import HybridPath, SimConfig, simulate_path

# 0.8 log 1.6 + 0.2 log 0.4, mpmath
TWO_BIN_ENTROPY = 0.19274475702175749609467876989


def std_ref(pi=(0.5, 0.5)):
    return ReferenceMeasure(list(pi), GaussianPotential([0.0], [[1.0]]))


def const_path(x, k, n=101, dt=0.01):
    return HybridPath(dt=dt, stride=1, x=np.full((n, 1), x), lam=np.full(n, k, dtype=np.int16))


def test_constant_path_single_bin():
    g = Grid.uniform(-1, 1, 4)
    em = occupation_measure([const_path(0.3, 1)], 0.0, g, 2)
    assert em.counts[1, 2] == pytest.approx(1.0)
    assert em.counts.sum() == pytest.approx(em.total_time)
    assert em.state_fractions.tolist() == [0.0, 1.0]


def test_out_of_box_and_burn_in():
    g = Grid.uniform(-1, 1, 4)
    p = const_path(5.0, 0)
    em = occupation_measure([p], 0.5, g, 1)
    assert em.total_time == pytest.approx(0.5)
    assert em.out_of_box_time == pytest.approx(0.5)
    assert em.counts.sum() + em.out_of_box_time == pytest.approx(em.total_time)


def test_exploded_paths_excluded():
    g = Grid.uniform(-1, 1, 4)
    bad = const_path(0.0, 0)
    bad.exploded_at = 0.5
    em = occupation_measure([bad, const_path(0.1, 0)], 0.0, g, 1)
    assert em.n_exploded_excluded == 1 and em.total_time == pytest.approx(1.0)
    with pytest.raises(AllPathsExploded):
        occupation_measure([bad], 0.0, g, 1)


def test_reference_bin_masses_exact_for_gaussian():
    g = Grid.uniform(-3, 3, 12)
    ref = std_ref((0.25, 0.75))
    m = reference_bin_masses(ref, g)
    exact = np.diff(stats.norm.cdf(g.edges[0]))
    np.testing.assert_allclose(m[0], 0.25 * exact, rtol=1e-10)
    np.testing.assert_allclose(m[1], 0.75 * exact, rtol=1e-10)


def test_reference_bin_masses_2d():
    g = Grid.uniform([-2, -3], [2, 3], [5, 7])
    ref = ReferenceMeasure([1.0], GaussianPotential([0.0, 0.0], np.diag([1.0, 4.0])))
    m = reference_bin_masses(ref, g)[0]
    ex = np.outer(np.diff(stats.norm.cdf(g.edges[0])), np.diff(stats.norm.cdf(g.edges[1], scale=0.5)))
    np.testing.assert_allclose(m, ex, rtol=1e-9, atol=1e-15)


def test_exact_reference_gives_rho_one():
    g = Grid.uniform(-4, 4, 40)
    ref = std_ref()
    ref_mass = reference_bin_masses(ref, g)
    em = EmpiricalMeasure(g, ref_mass.copy(), 1.0, 1.0 - ref_mass.sum())
    de = density_vs_reference(em, ref)
    np.testing.assert_allclose(de.rho, 1.0, rtol=1e-12)
    assert relative_entropy(de) == pytest.approx(0.0, abs=1e-14)


def test_two_bin_entropy():
    g = Grid.uniform(0, 2, 2)
    de = DensityEstimate(g, np.array([[1.6, 0.4]]), np.array([[0.8, 0.2]]), np.array([[0.5, 0.5]]),
                         np.zeros((1, 2), dtype=bool))
    assert relative_entropy(de) == pytest.approx(TWO_BIN_ENTROPY, rel=1e-14)


def test_zero_mass_bins_contribute_zero():
    g = Grid.uniform(0, 2, 2)
    de = DensityEstimate(g, np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]),
                         np.zeros((1, 2), dtype=bool))
    assert relative_entropy(de) == pytest.approx(math.log(2.0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=6, max_size=6), st.lists(st.floats(0.01, 1), min_size=6, max_size=6))
def test_gibbs_inequality_after_renormalising(mass, ref):
    mass = np.array(mass)
    if mass.sum() == 0:
        return
    g = Grid.uniform(0, 1, 3)
    m = mass.reshape(2, 3)
    r = np.array(ref).reshape(2, 3)
    de = DensityEstimate(g, m / r, m, r, np.zeros((2, 3), dtype=bool))
    assert relative_entropy(de, renormalize=True) >= -1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mass_conservation(seed):
    rng = np.random.default_rng(seed)
    g = Grid.uniform(-2, 2, 25)
    x = rng.standard_normal(2000)
    lam = rng.integers(0, 2, 2000)
    em = measure_from_samples(g, 2, x, lam)
    de = density_vs_reference(em, std_ref())
    total = np.sum(de.rho * de.ref_mass)
    assert total == pytest.approx(1.0 - em.out_of_box_fraction, abs=1e-12)


def test_excluded_bins():
    g = Grid.uniform(30, 40, 5)
    em = EmpiricalMeasure(g, np.zeros((1, 5)), 1.0, 1.0)
    de = density_vs_reference(em, ReferenceMeasure([1.0], GaussianPotential([0.0], [[1.0]])))
    assert de.excluded.all() and np.all(de.rho == 0)


def test_positivity_verdicts():
    g = Grid.uniform(-4, 4, 40)
    ref = std_ref()
    ref_mass = reference_bin_masses(ref, g)
    em = EmpiricalMeasure(g, ref_mass.copy(), 1.0, 0.0, n_samples=100_000)
    de = density_vs_reference(em, ref)
    assert positivity_diagnostic(de, -1, 1).verdict == "positive"
    counts = ref_mass.copy()
    counts[1] = 0.0
    de0 = density_vs_reference(EmpiricalMeasure(g, counts, 1.0, 0.0, n_samples=100_000), ref)
    res = positivity_diagnostic(de0, -1, 1)
    assert res.verdict == "not_positive" and res.per_state_verdict == ("positive", "not_positive")
    few = density_vs_reference(EmpiricalMeasure(g, ref_mass.copy(), 1.0, 0.0, n_samples=100), ref)
    assert positivity_diagnostic(few, -1, 1).verdict == "insufficient_data"


def test_convergence_constant_path():
    g = Grid.uniform(-1, 1, 10)
    d, _ = convergence_diagnostic(const_path(0.05, 0, n=1001), 5, g, 1)
    assert np.all(d == 0)


def test_convergence_iid_decreasing():
    rng = np.random.default_rng(0)
    n = 200_000
    p = HybridPath(dt=1.0, stride=1, x=rng.standard_normal((n + 1, 1)), lam=np.zeros(n + 1, dtype=np.int16))
    d, trend = convergence_diagnostic(p, 10, Grid.uniform(-4, 4, 40), 1)
    assert d[-1] < d[0] and trend < -0.5


def test_ou_histogram_matches_normal():
    m = ou_model()
    p = simulate_path(m, [0.0], 0, SimConfig(dt=1e-3, t_end=1e4, seed=2, record_stride=1))
    de = density_vs_reference(occupation_measure([p], 0.0, Grid.default(m.potential), 1), default_reference(m))
    total, per_state = l1_to_reference(de)
    assert total < 0.05


def test_z0_constant_q_rho_near_one():
    m = constant_q_model([[-1, 1], [2, -2]])
    p = simulate_path(m, [0.0], 0, SimConfig(dt=1e-2, t_end=1e5, seed=3))
    g = Grid.uniform(-3, 3, 30)
    em = occupation_measure([p], 0.0, g, 2)
    de = density_vs_reference(em, default_reference(m))
    # consecutive samples are correlated: count one hit per unit of occupation
    # time, the relaxation time of the unit-rate OU part
    well = de.ref_mass * em.total_time >= 1000
    assert np.max(np.abs(de.rho[well] - 1)) < 0.1
    assert positivity_diagnostic(de, -1, 1).verdict == "positive"


def test_generator_annihilates_reference_measure():
    """sum_k pi_k int (L_k f_k + sum_j q_kj f_j) e^V dx = 0 for quadratic f (Z = 0, constant Q)."""
    q = np.array([[-1.0, 1.0], [2.0, -2.0]])
    pi = np.array([2 / 3, 1 / 3])
    x, w = np.polynomial.hermite_e.hermegauss(40)
    w = w / math.sqrt(2 * math.pi)
    coef = [(0.3, -1.0, 2.0), (1.5, 0.7, -0.4)]    # f_k = c0 + c1 x + c2 x^2
    total = 0.0
    for k in range(2):
        c0, c1, c2 = coef[k]
        lf = 2 * c2 + (-x) * (c1 + 2 * c2 * x)      # a f'' + (a V' + a') f' with a = 1, V' = -x
        coupling = sum(q[k, j] * (coef[j][0] + coef[j][1] * x + coef[j][2] * x**2) for j in range(2))
        total += pi[k] * np.sum(w * (lf + coupling))
    assert abs(total) < 1e-8


def test_grid_locate_edges():
    g = Grid.uniform([0, 0], [1, 2], [2, 4])
    idx = g.locate(np.array([[0.0, 0.0], [0.99, 1.99], [1.0, 0.5], [0.5, -0.1]]))
    assert idx.tolist() == [0, 7, -1, -1]

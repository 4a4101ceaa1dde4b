import math

import numpy as np
import pytest
from scipy import stats

from rsdiff.errors import BoundViolated, Exploded
from rsdiff.families import ZField, constant_q_model, example_model, frozen_state_model, ou_model
from rsdiff.model import GaussianPotential, SwitchingModel
from rsdiff.rng import path_streams
from rsdiff.simulator import SimConfig, simulate_batch, simulate_path, step, transience_diagnostic


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=1.0, t_end=0.5)
    with pytest.raises(ValueError):
        SimConfig(t_end=1.0, burn_in=1.0)
    with pytest.raises(ValueError):
        SimConfig(scheme="milstein")
    assert SimConfig(dt=1e-3, t_end=1.0).n_steps == 1000


def test_step_trivial():
    pot = GaussianPotential([0.0], [[1.0]])
    m = SwitchingModel(1, 1, lambda x, k: np.zeros((1, 1)), pot, lambda x, k: np.zeros(1), lambda x: np.zeros((1, 1)))
    x, k, ev = step(m, [0.7], 0, 0.01, path_streams(0), c_q=0.0)
    assert x[0] == 0.7 and k == 0 and ev is None


def test_step_euler_moments():
    m = ou_model()
    streams = path_streams(11)
    dt, x0, n = 0.01, 1.5, 100_000
    xs = np.array([step(m, [x0], 0, dt, streams, c_q=0.0)[0][0] for _ in range(n)])
    mean, var = x0 * (1 - dt), 2 * dt
    assert abs(xs.mean() - mean) < 3 * math.sqrt(var / n)
    # Var of the sample variance of a Gaussian: 2 var^2 / (n - 1)
    assert abs(xs.var(ddof=1) - var) < 3 * var * math.sqrt(2 / (n - 1))


def test_step_explodes():
    with pytest.raises(Exploded):
        step(ou_model(), [0.99], 0, 0.01, path_streams(0), c_q=0.0, radius=1.0)


def test_sojourn_times_exponential():
    m = constant_q_model([[-1, 1], [2, -2]])
    p = simulate_path(m, [0.0], 0, SimConfig(dt=1e-3, t_end=8000.0, seed=5, record_stride=1000))
    times = np.array([0.0] + [ev.time for ev in p.jumps])
    states = [0] + [ev.to_state for ev in p.jumps]
    soj = np.diff(times)
    for k, rate in ((0, 1.0), (1, 2.0)):
        s = soj[np.array(states[:-1]) == k][:10_000]
        assert s.size >= 2000
        assert stats.kstest(s, "expon", args=(0, 1 / rate)).pvalue > 0.01


def test_determinism():
    m = example_model(theta=0.2)
    cfg = SimConfig(dt=1e-3, t_end=5.0, seed=42)
    a = simulate_path(m, [0.1], 1, cfg)
    b = simulate_path(m, [0.1], 1, cfg)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.lam, b.lam) and a.jumps == b.jumps


@pytest.mark.parametrize("scheme", ["euler", "euler_with_bernoulli_switch"])
def test_kernel_matches_python_loop(scheme):
    m = example_model(theta=0.3, delta=0.7)
    zf = ZField.uniform("tanh", 0.3, 2, 1)
    cfg = SimConfig(dt=1e-2, t_end=30.0, seed=9, scheme=scheme, record_stride=3, record_rejected=True)
    a = simulate_path(m, [0.2], 0, cfg, weight_z=zf)
    b = simulate_path(m, [0.2], 0, cfg, weight_z=zf, force_python=True)
    np.testing.assert_allclose(a.x, b.x, rtol=0, atol=1e-12)
    assert np.array_equal(a.lam, b.lam)
    np.testing.assert_allclose(a.log_weight, b.log_weight, rtol=0, atol=1e-10)
    assert [(e.from_state, e.to_state, e.accepted) for e in a.jumps] == \
        [(e.from_state, e.to_state, e.accepted) for e in b.jumps]
    assert len(a.jumps) > 0


def test_lambda_changes_only_at_accepted_jumps():
    m = example_model(theta=0.3)
    p = simulate_path(m, [0.0], 0, SimConfig(dt=1e-3, t_end=20.0, seed=3, record_rejected=True))
    changes = np.flatnonzero(np.diff(p.lam)) + 1
    accepted = [ev for ev in p.jumps if ev.accepted]
    np.testing.assert_allclose(p.times[changes], [ev.time for ev in accepted], atol=1e-9)
    assert any(not ev.accepted for ev in p.jumps)


def test_example_delta_zero_confined():
    m = example_model(delta=0.0)
    cfg = SimConfig(dt=1e-2, t_end=100.0, seed=1, n_paths=1000, explosion_radius=50.0, record_stride=10_000)
    paths = simulate_batch(m, [0.0], 0, cfg)
    assert sum(p.exploded for p in paths) == 0


def test_frozen_transient_state_explodes():
    m = frozen_state_model(example_model(delta=1.0), 1)
    cfg = SimConfig(dt=1e-2, t_end=100.0, seed=2, n_paths=100, explosion_radius=50.0, record_stride=100)
    paths = simulate_batch(m, [0.0], 0, cfg)
    n_expl = sum(p.exploded for p in paths)
    assert n_expl > 80
    p = next(p for p in paths if p.exploded)
    assert abs(p.exploded_x[0]) >= 50.0
    assert np.all(np.abs(p.x[:-1, 0]) < 50.0)


def test_batch_single_equals_path():
    m = example_model()
    cfg = SimConfig(dt=1e-3, t_end=2.0, seed=8, n_paths=1)
    a = simulate_batch(m, [0.0], 0, cfg)[0]
    b = simulate_path(m, [0.0], 0, cfg, path_index=0)
    assert np.array_equal(a.x, b.x)


def test_batch_thread_independent():
    m = example_model(theta=0.1)
    cfg = SimConfig(dt=1e-3, t_end=2.0, seed=8, n_paths=6)
    a = simulate_batch(m, [0.0], 0, cfg, threads=1)
    b = simulate_batch(m, [0.0], 0, cfg, threads=3)
    assert all(np.array_equal(p.x, q.x) and np.array_equal(p.lam, q.lam) for p, q in zip(a, b))


def test_ou_ensemble_mean():
    cfg = SimConfig(dt=1e-3, t_end=1.0, seed=4, n_paths=4000, record_stride=1000)
    paths = simulate_batch(ou_model(), [2.0], 0, cfg)
    xt = np.array([p.x[-1, 0] for p in paths])
    assert abs(xt.mean() - 2.0 * math.exp(-1.0)) < 3 * xt.std(ddof=1) / math.sqrt(xt.size)


def test_weak_order_one():
    """Stationary second moment of the Euler chain for a fast OU: error ~ dt.

    The Euler chain for dX = -k X dt + sqrt(2) dW has stationary variance
    2 / (k (2 - k dt)) against 1/k for the diffusion; the time average over
    a long path estimates it with negligible noise.
    """
    kappa = 10.0
    m = ou_model(rate=kappa)
    dts = np.array([0.02, 0.01, 0.005])
    errs = []
    for i, dt in enumerate(dts):
        p = simulate_path(m, [0.0], 0, SimConfig(dt=dt, t_end=1e5, seed=100 + i, record_stride=5))
        errs.append(abs(np.mean(p.x[1000:, 0] ** 2) - 1 / kappa))
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert 0.7 <= slope <= 1.3


def test_state_occupation_three_states():
    q = np.array([[-3, 1, 2], [3, -7, 4], [0.5, 0.5, -1]], dtype=float)
    from rsdiff.model import stationary_distribution

    p = simulate_path(constant_q_model(q), [0.0], 0, SimConfig(dt=1e-3, t_end=1e4, seed=6, record_stride=10))
    frac = np.bincount(p.lam[:-1], minlength=3) / (p.lam.size - 1)
    np.testing.assert_allclose(frac, stationary_distribution(q), atol=0.02)


def test_bernoulli_scheme_occupation():
    m = constant_q_model([[-1, 1], [2, -2]])
    cfg = SimConfig(dt=1e-3, t_end=5000.0, seed=7, scheme="euler_with_bernoulli_switch", record_stride=10)
    p = simulate_path(m, [0.0], 0, cfg)
    assert abs(np.mean(p.lam[:-1] == 0) - 2 / 3) < 0.02


def test_jump_rate_small_dt_regression():
    """Accepted jumps out of state 0 per unit time in state 0 -> q_0 as dt -> 0."""
    m = constant_q_model([[-2, 2], [1, -1]])
    dts = np.array([1e-2, 3e-3, 1e-3, 3e-4, 1e-4])
    rates = []
    for i, dt in enumerate(dts):
        p = simulate_path(m, [0.0], 0, SimConfig(dt=dt, t_end=2000.0, seed=20 + i, record_stride=1))
        out0 = sum(ev.from_state == 0 for ev in p.accepted_jumps)
        rates.append(out0 / (np.count_nonzero(p.lam[:-1] == 0) * dt))
    slope, intercept = np.polyfit(dts, rates, 1)
    assert intercept == pytest.approx(2.0, rel=0.05)


def test_bound_violated_with_small_cq():
    m = constant_q_model([[-2, 2], [1, -1]])
    with pytest.raises(BoundViolated):
        simulate_path(m, [0.0], 0, SimConfig(dt=1e-2, t_end=100.0, c_q=1.0))
    with pytest.raises(BoundViolated):
        simulate_path(m, [0.0], 0, SimConfig(dt=1e-2, t_end=100.0, c_q=1.0), force_python=True)


def test_generic_model_runs_python_loop():
    pot = GaussianPotential([0.0], [[1.0]])
    m = SwitchingModel(1, 2, lambda x, k: np.eye(1) * (1 + 0.1 * k), pot, lambda x, k: np.zeros(1),
                       lambda x: np.array([[-1.0, 1.0], [1.0, -1.0]]))
    p = simulate_path(m, [0.0], 0, SimConfig(dt=1e-2, t_end=5.0, seed=1))
    assert p.x.shape == (501, 1) and not p.exploded


def test_transience_diagnostic():
    d = transience_diagnostic(example_model(theta=0.1, delta=1.0), 1, n_paths=100)
    assert d["growing"] and d["linear_drift_rate"] > 0
    d = transience_diagnostic(example_model(delta=0.5), 1, n_paths=100)
    assert d["linear_drift_rate"] < 0

import numpy as np
import pytest
from scipy.stats import norm

from rsdiff.errors import GridMismatch, NullSpaceDimensionAmbiguous
from rsdiff.families import constant_q_model, example_model, ou_model
from rsdiff.fp_oracle import (
    Grid1D,
    assemble_adjoint,
    bin_masses,
    compare_mc_vs_oracle,
    mass_weights,
    max_relative_error,
    solve_null_space,
    solve_stationary,
)
from rsdiff.invariant import DensityEstimate, Grid


def test_grid():
    g = Grid1D(-8, 8, 401)
    assert g.h == pytest.approx(0.04) and g.nodes[200] == 0.0
    assert g.weights.sum() == pytest.approx(16.0)
    with pytest.raises(ValueError):
        Grid1D(0, 1, 8)


def test_ou_residual_of_sampled_gaussian():
    g = Grid1D(-8, 8, 401)
    A = assemble_adjoint(ou_model(), g)
    assert np.linalg.norm(A @ norm.pdf(g.nodes)) < 1e-3


def test_ou_solution_and_order():
    errs = []
    ns = (101, 201, 401)
    for n in ns:
        sol = solve_stationary(ou_model(), Grid1D(-8, 8, n))
        errs.append(max_relative_error(sol, norm.pdf))
    assert errs[-1] < 1e-3
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert abs(slope - 2) < 0.3


def test_uncoupled_blocks():
    g = Grid1D(-4, 4, 41)
    A = assemble_adjoint(constant_q_model(np.zeros((2, 2))), g).toarray()
    assert np.all(A[:41, 41:] == 0) and np.all(A[41:, :41] == 0)


@pytest.mark.parametrize("model", [constant_q_model([[-1, 1], [2, -2]]), example_model(theta=0.3, delta=0.8)])
def test_discrete_conservation(model):
    g = Grid1D(-8, 8, 201)
    A = assemble_adjoint(model, g)
    w = mass_weights(g, model.n_states)
    assert np.max(np.abs(w @ A)) < 1e-12
    sol = solve_null_space(A, g)
    assert abs(w @ (A @ sol.h_hat.reshape(-1))) < 1e-8


def test_constant_q_product_solution():
    g = Grid1D(-8, 8, 401)
    sol = solve_stationary(constant_q_model([[-1, 1], [2, -2]]), g)
    exact = np.outer([2 / 3, 1 / 3], norm.pdf(g.nodes))
    assert np.max(np.abs(sol.h_hat - exact)) / exact.max() < 1e-3
    assert sol.state_masses.sum() == pytest.approx(1.0, abs=1e-12)


def test_reducible_is_ambiguous():
    with pytest.raises(NullSpaceDimensionAmbiguous) as exc:
        solve_stationary(constant_q_model(np.zeros((2, 2))), Grid1D(-8, 8, 201))
    assert len(exc.value.singular_values) == 2


def test_example_positive_and_normalised():
    sol = solve_stationary(example_model(theta=0.1, delta=0.5), Grid1D(-8, 8, 401))
    assert sol.h_hat[:, 1:-1].min() > 0
    assert (sol.h_hat @ sol.grid.weights).sum() == pytest.approx(1.0)
    assert sol.h_hat.min() >= -1e-8 * sol.h_hat.max()
    assert sol.residual_norm < 1e-10


def test_state_relabelling_symmetry():
    """Swapping the roles of the two states permutes the solution."""
    from rsdiff.families import BuiltinSpec, model_from_spec

    def build(z, q):
        spec = BuiltinSpec(np.ones((2, 1, 1)), np.zeros(1), np.ones((1, 1)), ("affine", "affine"),
                           np.array(z).reshape(2, 1, 1), np.zeros((2, 1)), np.array(q, float))
        return model_from_spec(spec)

    g = Grid1D(-8, 8, 201)
    a = solve_stationary(build([0.0, 0.3], [[-1, 1], [2, -2]]), g)
    b = solve_stationary(build([0.3, 0.0], [[-2, 2], [1, -1]]), g)
    np.testing.assert_allclose(a.h_hat[::-1], b.h_hat, rtol=1e-10, atol=1e-14)


def _as_estimate(sol, grid):
    mass = bin_masses(sol, grid.edges[0])
    return DensityEstimate(grid, mass, mass, np.ones_like(mass), np.zeros_like(mass, dtype=bool))


def test_compare_identical_is_zero():
    sol = solve_stationary(example_model(theta=0.1), Grid1D(-8, 8, 201))
    grid = Grid.uniform(-6, 6, 50)
    l1, per = compare_mc_vs_oracle(_as_estimate(sol, grid), sol)
    assert l1 == pytest.approx(0.0, abs=1e-15)


def test_compare_refinement_order():
    grid = Grid.uniform(-6, 6, 60)
    model = example_model(theta=0.1)
    fine = solve_stationary(model, Grid1D(-8, 8, 1601))
    dists = []
    for n in (101, 201, 401):
        de = _as_estimate(solve_stationary(model, Grid1D(-8, 8, n)), grid)
        dists.append(compare_mc_vs_oracle(de, fine)[0])
    slope = -np.polyfit(np.log([101, 201, 401]), np.log(dists), 1)[0]
    assert abs(slope - 2) < 0.3


def test_compare_grid_mismatch():
    sol = solve_stationary(ou_model(), Grid1D(-4, 4, 101))
    with pytest.raises(GridMismatch):
        compare_mc_vs_oracle(_as_estimate(sol, Grid.uniform(-4, 4, 10)), solve_stationary(
            constant_q_model([[-1, 1], [1, -1]]), Grid1D(-4, 4, 101)))
    with pytest.raises(GridMismatch):
        bin_masses(sol, np.linspace(-5, 5, 11))


def test_bin_masses_match_trapezoid_total():
    sol = solve_stationary(ou_model(), Grid1D(-8, 8, 201))
    m = bin_masses(sol, np.linspace(-8, 8, 17))
    assert m.sum() == pytest.approx(1.0, abs=1e-12)

import dataclasses
import itertools

import numpy as np
import pytest

from conftest import TWO_POINT_DIAGONAL, TWO_POINT_OFF_DIAGONAL, TWO_POINT_SUM
from eot_stability.exceptions import CostError, MassDriftError, PotentialOverflowError
from eot_stability.measures import DiscreteMeasure, build_cost
from eot_stability.sinkhorn import (
    Coupling,
    Potentials,
    coupling_from_potentials,
    half_step_phi,
    half_step_psi,
    initial_coupling,
    iterate_marginals,
    product_coupling,
    sinkhorn_iterates,
    solve,
)


class TestPotentials:
    def test_shift_keeps_the_sum(self):
        p = Potentials([1.0, 2.0], [3.0], 0.5)
        q = p.shifted(0.25)
        np.testing.assert_allclose(q.sum_grid(), p.sum_grid())
        np.testing.assert_allclose(q.f, [1.25, 2.25])

    def test_rejects_non_finite_and_bad_eps(self):
        with pytest.raises(ValueError):
            Potentials([np.nan], [0.0], 1.0)
        with pytest.raises(ValueError):
            Potentials([0.0], [0.0], 0.0)

    def test_dict_form_names_units(self):
        data = Potentials([1.0], [2.0], 0.1).to_dict()
        assert data["potential_units"] == "cost"
        restored = Potentials.from_dict(data)
        np.testing.assert_array_equal(restored.f, [1.0])


class TestCoupling:
    def test_shape_and_sign_checks(self, pair):
        with pytest.raises(ValueError):
            Coupling([[0.5, 0.5]], pair, pair)
        with pytest.raises(ValueError):
            Coupling([[0.75, -0.25], [0.0, 0.5]], pair, pair)

    def test_product(self, pair):
        pi = product_coupling(pair, pair)
        np.testing.assert_allclose(pi.matrix, 0.25)
        assert pi.mass == pytest.approx(1.0)
        assert pi.marginal_error() == pytest.approx(0.0)

    def test_cell_points_are_row_major(self, pair):
        target = DiscreteMeasure([[5.0], [6.0], [7.0]], [0.2, 0.3, 0.5])
        points = product_coupling(pair, target).cell_points()
        np.testing.assert_array_equal(points[:4], [[0, 5], [0, 6], [0, 7], [1, 5]])

    def test_overflow_guard_names_the_cell(self):
        a, b = DiscreteMeasure([[0.0]], [1.0]), DiscreteMeasure([[0.0]], [1.0])
        with pytest.raises(PotentialOverflowError) as info:
            coupling_from_potentials(Potentials([1000.0], [0.0], 1.0), np.zeros((1, 1)), a, b)
        assert info.value.cell == (0, 0)

    def test_closed_form_potentials_give_the_two_point_coupling(self, two_point):
        mu, nu, C, _ = two_point
        p = Potentials([0.0, 0.0], [TWO_POINT_SUM, TWO_POINT_SUM], 1.0)
        pi = coupling_from_potentials(p, C, mu, nu)
        expected = [[TWO_POINT_DIAGONAL, TWO_POINT_OFF_DIAGONAL], [TWO_POINT_OFF_DIAGONAL, TWO_POINT_DIAGONAL]]
        np.testing.assert_allclose(pi.matrix, expected, rtol=0, atol=1e-14)
        assert pi.marginal_error() <= 1e-14


class TestHalfSteps:
    def test_zero_cost_single_atom(self):
        mu = DiscreteMeasure([[0.0]], [1.0])
        np.testing.assert_allclose(half_step_psi(np.zeros(1), np.zeros((1, 1)), mu, 1.0), [0.0])

    def test_single_atom_absorbs_the_cost(self):
        mu = DiscreteMeasure([[0.0]], [1.0])
        nu = DiscreteMeasure([[1.0], [2.0]], [0.5, 0.5])
        C = build_cost(mu, nu)
        psi = half_step_psi(np.zeros(1), C, mu, 0.3)
        np.testing.assert_allclose(psi, C.values[0])

    def test_small_eps_does_not_overflow(self):
        mu = DiscreteMeasure([[0.0], [10.0]], [0.5, 0.5])
        C = build_cost(mu, mu)
        psi = half_step_psi(np.zeros(2), C, mu, 1e-4)
        phi = half_step_phi(psi, C, mu, 1e-4)
        assert np.all(np.isfinite(psi)) and np.all(np.isfinite(phi))


class TestSolve:
    def test_two_point_closed_form(self, two_point):
        mu, nu, C, eps = two_point
        report = solve(mu, nu, C, eps)
        assert report.converged
        expected = [[TWO_POINT_DIAGONAL, TWO_POINT_OFF_DIAGONAL], [TWO_POINT_OFF_DIAGONAL, TWO_POINT_DIAGONAL]]
        np.testing.assert_allclose(report.coupling.matrix, expected, atol=1e-10)
        np.testing.assert_allclose(report.potentials.sum_grid(), TWO_POINT_SUM, atol=1e-10)

    def test_zero_cost_gives_the_product(self, small_instance):
        mu, nu, _, _ = small_instance
        report = solve(mu, nu, np.zeros((len(mu), len(nu))), 1.0)
        assert report.converged
        assert report.iterations == 1
        np.testing.assert_allclose(report.coupling.matrix, np.outer(mu.weights, nu.weights), atol=1e-15)
        np.testing.assert_allclose(report.potentials.sum_grid(), 0.0, atol=1e-15)

    def test_single_source_atom_is_forced(self):
        mu = DiscreteMeasure([[0.0]], [1.0])
        nu = DiscreteMeasure([[1.0], [3.0]], [0.25, 0.75])
        report = solve(mu, nu, build_cost(mu, nu), 0.2)
        np.testing.assert_allclose(report.coupling.matrix, [[0.25, 0.75]], atol=1e-12)

    def test_marginals_and_residual_at_convergence(self, small_instance):
        mu, nu, C, eps = small_instance
        report = solve(mu, nu, C, eps, tol=1e-11)
        assert report.converged
        assert report.marginal_error <= 1e-11
        np.testing.assert_allclose(report.coupling.row_sums(), mu.weights, atol=1e-12)
        np.testing.assert_allclose(report.coupling.col_sums(), nu.weights, atol=2e-11)
        g_again = half_step_psi(report.potentials.f, C, mu, eps)
        np.testing.assert_allclose(report.potentials.g, g_again, atol=1e-9)

    def test_dual_values_never_decrease(self, small_instance):
        mu, nu, C, _ = small_instance
        report = solve(mu, nu, C, 0.05, tol=1e-10)
        assert np.all(np.diff(report.dual_trace) >= -1e-12)

    def test_not_converged_at_max_iter(self, small_instance):
        mu, nu, C, _ = small_instance
        report = solve(mu, nu, C, 0.01, tol=1e-14, max_iter=2)
        assert not report.converged
        assert report.iterations == 2
        assert len(report.trace_rows()) == 2

    def test_warm_start_needs_fewer_iterations(self, small_instance):
        mu, nu, C, eps = small_instance
        cold = solve(mu, nu, C, eps, tol=1e-10)
        warm = solve(mu, nu, C, eps, tol=1e-10, init=cold.potentials)
        assert warm.converged
        assert warm.iterations <= cold.iterations

    def test_invalid_arguments(self, small_instance):
        mu, nu, C, eps = small_instance
        with pytest.raises(ValueError):
            solve(mu, nu, C, 0.0)
        with pytest.raises(ValueError):
            solve(mu, nu, C, eps, tol=0.0)
        with pytest.raises(ValueError):
            solve(mu, nu, C, eps, max_iter=0)
        with pytest.raises(CostError):
            solve(mu, nu, np.zeros((2, 2)), eps)
        with pytest.raises(CostError):
            solve(nu, mu, build_cost(nu, nu), eps)


class TestIterates:
    def test_alternating_exact_marginals(self, small_instance):
        mu, nu, C, eps = small_instance
        for state in itertools.islice(sinkhorn_iterates(mu, nu, C, eps), 5):
            odd = state.coupling(2 * state.t - 1)
            even = state.coupling(2 * state.t)
            np.testing.assert_allclose(odd.row_sums(), mu.weights, atol=1e-13)
            np.testing.assert_allclose(even.col_sums(), nu.weights, atol=1e-13)

    def test_iterate_marginals_match_the_couplings(self, small_instance):
        mu, nu, C, eps = small_instance
        state = next(itertools.islice(sinkhorn_iterates(mu, nu, C, eps), 2, None))
        mu_even, nu_odd = iterate_marginals(state)
        np.testing.assert_allclose(mu_even.weights, state.coupling(2 * state.t).row_sums(), atol=1e-13)
        np.testing.assert_allclose(nu_odd.weights, state.coupling(2 * state.t - 1).col_sums(), atol=1e-13)

    def test_index_outside_the_state(self, small_instance):
        mu, nu, C, eps = small_instance
        state = next(sinkhorn_iterates(mu, nu, C, eps))
        with pytest.raises(ValueError):
            state.coupling(3)
        with pytest.raises(ValueError):
            state.iterate_potentials(0)

    def test_iterate_marginals_refuse_to_hide_mass_drift(self, small_instance):
        mu, nu, C, eps = small_instance
        state = next(sinkhorn_iterates(mu, nu, C, eps))
        drifted = dataclasses.replace(state, phi_next=state.phi_next + 0.1)
        with pytest.raises(MassDriftError) as info:
            iterate_marginals(drifted)
        assert info.value.side == "row"
        assert info.value.drift > 1e-3

    def test_iterates_reach_the_solution(self, small_instance):
        mu, nu, C, eps = small_instance
        report = solve(mu, nu, C, eps, tol=1e-12)
        state = next(itertools.islice(sinkhorn_iterates(mu, nu, C, eps), report.iterations + 20, None))
        np.testing.assert_allclose(state.coupling(2 * state.t).matrix, report.coupling.matrix, atol=1e-10)

    def test_initial_coupling_is_gibbs(self, two_point):
        mu, nu, C, eps = two_point
        pi = initial_coupling(mu, nu, C, eps)
        assert pi.mass == pytest.approx(1.0)
        kernel = np.exp(-C.values / eps)
        np.testing.assert_allclose(pi.matrix, kernel / kernel.sum())

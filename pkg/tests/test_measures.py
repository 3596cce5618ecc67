import numpy as np
import pytest
from pydantic import ValidationError

from eot_stability.exceptions import CostError, MeasureError, ScheduleExhaustedError
from eot_stability.measures import (
    CostKind,
    CostMatrix,
    DiscreteMeasure,
    PerturbationSpec,
    build_cost,
    canonical_key,
    load_cost_matrix,
    load_measure,
    perturb,
    same_support,
    sample_subgaussian,
    save_cost_matrix,
    save_measure,
    support_diameter_sq,
)
from eot_stability.metrics import tv_distance


class TestDiscreteMeasure:
    def test_zero_weight_atoms_are_stripped(self):
        mu = DiscreteMeasure([[0.0], [1.0], [2.0]], [0.5, 0.0, 0.5])
        assert len(mu) == 2
        np.testing.assert_array_equal(mu.atoms[:, 0], [0.0, 2.0])

    def test_one_dimensional_atoms_are_reshaped(self):
        mu = DiscreteMeasure([0.0, 1.0], [0.25, 0.75])
        assert mu.dim == 1
        assert mu.atoms.shape == (2, 1)

    @pytest.mark.parametrize(
        "atoms, weights",
        [
            ([[0.0], [1.0]], [0.5, 0.6]),
            ([[0.0], [0.0]], [0.5, 0.5]),
            ([[0.0], [1.0]], [1.5, -0.5]),
            ([[0.0], [1.0]], [1.0]),
            ([[0.0]], [0.0]),
            ([[np.inf]], [1.0]),
        ],
    )
    def test_invalid_measures(self, atoms, weights):
        with pytest.raises(MeasureError):
            DiscreteMeasure(atoms, weights)

    def test_normalized(self):
        mu = DiscreteMeasure.normalized([[0.0], [1.0]], [1.0, 3.0])
        np.testing.assert_allclose(mu.weights, [0.25, 0.75])
        with pytest.raises(MeasureError):
            DiscreteMeasure.normalized([[0.0]], [0.0])

    def test_uniform(self):
        mu = DiscreteMeasure.uniform([[0.0], [1.0], [2.0], [3.0]])
        np.testing.assert_allclose(mu.weights, 0.25)

    def test_arrays_are_read_only(self, pair):
        with pytest.raises(ValueError):
            pair.weights[0] = 1.0

    def test_equality_and_mean(self, pair):
        assert pair == DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])
        assert pair != DiscreteMeasure([[0.0], [1.0]], [0.25, 0.75])
        assert pair.mean(np.array([2.0, 4.0])) == pytest.approx(3.0)

    def test_canonical_key_folds_negative_zero(self):
        assert canonical_key([-0.0, 1.0]) == (0.0, 1.0)
        assert canonical_key([0.1 + 0.2]) == canonical_key([0.3])

    def test_same_support_is_order_sensitive(self):
        a = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])
        b = DiscreteMeasure([[0.0], [1.0]], [0.2, 0.8])
        c = DiscreteMeasure([[1.0], [0.0]], [0.5, 0.5])
        assert same_support(a, b)
        assert not same_support(a, c)
        assert a.support_id == b.support_id != c.support_id

    def test_save_and_load(self, tmp_path, pair):
        path = save_measure(pair, tmp_path / "mu.json")
        assert load_measure(path) == pair

    def test_load_normalizes_on_request(self, tmp_path):
        path = tmp_path / "raw.json"
        path.write_text('{"atoms": [[0.0], [1.0]], "weights": [1, 1]}')
        with pytest.raises(MeasureError):
            load_measure(path)
        np.testing.assert_allclose(load_measure(path, normalize=True).weights, [0.5, 0.5])

    def test_ragged_atoms_rejected(self):
        with pytest.raises(ValidationError):
            DiscreteMeasure.from_dict({"atoms": [[0.0], [1.0, 2.0]], "weights": [0.5, 0.5]})


class TestCost:
    def test_squared_euclidean(self):
        X = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])
        Y = DiscreteMeasure([[0.0], [2.0]], [0.5, 0.5])
        np.testing.assert_allclose(build_cost(X, Y).values, [[0.0, 4.0], [1.0, 1.0]])
        np.testing.assert_allclose(build_cost(X, Y, "euclidean").values, [[0.0, 2.0], [1.0, 1.0]])

    def test_plane_distance(self):
        X = DiscreteMeasure([[0.0, 0.0]], [1.0])
        Y = DiscreteMeasure([[2.0, 3.0]], [1.0])
        assert build_cost(X, Y).values[0, 0] == pytest.approx(13.0)
        assert support_diameter_sq(X, Y) == pytest.approx(13.0)

    def test_user_matrix(self, pair):
        C = build_cost(pair, pair, CostKind.MATRIX, [[0.0, 2.0], [3.0, 0.0]])
        assert C.max_cost == 3.0
        assert C.shape == (2, 2)
        np.testing.assert_allclose(C.scaled(2.0).values, [[0.0, 4.0], [6.0, 0.0]])

    def test_errors(self, pair):
        plane = DiscreteMeasure([[0.0, 0.0]], [1.0])
        with pytest.raises(CostError):
            build_cost(pair, plane)
        with pytest.raises(CostError):
            build_cost(pair, pair, "matrix", [[0.0, 1.0]])
        with pytest.raises(CostError):
            build_cost(pair, pair, "matrix")
        with pytest.raises(CostError):
            CostMatrix([[0.0, -1.0]])
        with pytest.raises(CostError):
            CostMatrix([[np.nan]])

    def test_check_support(self, pair):
        C = build_cost(pair, pair)
        C.check_support(pair, pair)
        moved = DiscreteMeasure([[0.0], [1.5]], [0.5, 0.5])
        with pytest.raises(CostError):
            C.check_support(moved, pair)

    def test_load_csv_matrix(self, tmp_path):
        path = tmp_path / "cost.csv"
        path.write_text("0,1,2\n3,4,5\n")
        np.testing.assert_allclose(load_cost_matrix(path), [[0, 1, 2], [3, 4, 5]])

    @pytest.mark.parametrize("suffix", [".csv", ".json"])
    def test_saved_matrix_loads_back(self, tmp_path, small_instance, suffix):
        _, _, C, _ = small_instance
        path = save_cost_matrix(C, tmp_path / f"cost{suffix}")
        np.testing.assert_array_equal(load_cost_matrix(path), C.values)


class TestSampler:
    def test_deterministic(self):
        a = sample_subgaussian(20, 2, "gaussian-mixture", seed=3)
        b = sample_subgaussian(20, 2, "gaussian-mixture", seed=3)
        c = sample_subgaussian(20, 2, "gaussian-mixture", seed=4)
        assert a == b
        assert a != c

    def test_uniform_box(self):
        mu = sample_subgaussian(50, 3, "uniform-box", seed=0)
        assert mu.atoms.shape == (50, 3)
        assert np.all(np.abs(mu.atoms) <= 1.0)
        np.testing.assert_allclose(mu.weights, 1.0 / 50)

    def test_gaussian_sample_is_centred(self):
        mu = sample_subgaussian(100, 2, "gaussian", 7)
        assert mu.atoms.shape == (100, 2)
        assert np.linalg.norm(mu.weights @ mu.atoms) <= 0.5

    def test_single_atom(self):
        mu = sample_subgaussian(1, 1, "gaussian", seed=0)
        assert len(mu) == 1
        assert mu.weights[0] == 1.0

    def test_invalid(self):
        with pytest.raises(MeasureError):
            sample_subgaussian(0)
        with pytest.raises(MeasureError):
            sample_subgaussian(5, 1, "cauchy")


class TestPerturbationSpec:
    def test_geometric(self):
        spec = PerturbationSpec.geometric("weight-jitter", 4)
        assert spec.schedule == [0.5, 0.25, 0.125, 0.0625]
        assert spec.delta(2) == 0.25

    @pytest.mark.parametrize("schedule", [[], [0.1, 0.2], [0.1, 0.1], [0.1, -0.1]])
    def test_rejects_bad_schedules(self, schedule):
        with pytest.raises(ValidationError):
            PerturbationSpec(schedule=schedule)

    def test_index_range(self):
        spec = PerturbationSpec(schedule=[0.5, 0.1])
        with pytest.raises(ValueError):
            spec.delta(0)
        with pytest.raises(ScheduleExhaustedError) as info:
            spec.delta(3)
        assert info.value.length == 2

    def test_for_target_changes_only_the_seed(self):
        spec = PerturbationSpec(schedule=[0.5], seed=10)
        target = spec.for_target()
        assert target.seed == 11
        assert target.schedule == spec.schedule


class TestPerturb:
    def test_zero_delta_returns_base(self, pair):
        spec = PerturbationSpec(schedule=[0.0])
        assert perturb(pair, spec, 1) is pair

    def test_weight_jitter_stays_within_delta(self):
        base = sample_subgaussian(30, 1, seed=1)
        spec = PerturbationSpec.geometric("weight-jitter", 5, seed=2)
        for n in range(1, 6):
            mu_n = perturb(base, spec, n)
            assert same_support(mu_n, base)
            assert np.all(mu_n.weights > 0)
            assert tv_distance(mu_n, base) <= spec.delta(n) + 1e-12

    def test_weight_jitter_is_deterministic(self, pair):
        spec = PerturbationSpec(schedule=[0.5], seed=5)
        assert perturb(pair, spec, 1) == perturb(pair, spec, 1)
        assert perturb(pair, spec, 1) != perturb(pair, spec.for_target(), 1)

    def test_invalid_floor(self, pair):
        spec = PerturbationSpec(schedule=[0.5], floor=0.9)
        with pytest.raises(MeasureError):
            perturb(pair, spec, 1)

    def test_support_jitter_moves_atoms_by_at_most_delta(self):
        base = sample_subgaussian(25, 2, seed=0)
        spec = PerturbationSpec.geometric("support-jitter", 3, seed=4)
        for n in range(1, 4):
            mu_n = perturb(base, spec, n)
            np.testing.assert_array_equal(mu_n.weights, base.weights)
            shift = np.linalg.norm(mu_n.atoms - base.atoms, axis=1)
            assert shift.max() <= spec.delta(n) + 1e-12

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import brute_w2_squared
from stab.measures import (
    EmpiricalMeasure,
    MeasureError,
    TransportPlan,
    disintegrate_plan,
    optimal_plan,
    plan_cost,
    push_forward,
    read_measure_csv,
    second_moment_sqrt,
    w2_distance,
    w2_squared,
    write_measure_csv,
)

coords = st.floats(-5, 5, allow_nan=False, width=64)


def clouds(n_max=5, d_max=3, n=None, d=None):
    @st.composite
    def build(draw):
        nn = n if n is not None else draw(st.integers(1, n_max))
        dd = d if d is not None else draw(st.integers(1, d_max))
        return draw(arrays(float, (nn, dd), elements=coords))

    return build()


class TestEmpiricalMeasure:
    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(MeasureError):
            EmpiricalMeasure(np.zeros((0, 2)))
        with pytest.raises(MeasureError):
            EmpiricalMeasure([[np.nan, 0.0]])

    def test_points_are_read_only(self):
        m = EmpiricalMeasure([[1.0, 2.0]])
        with pytest.raises(ValueError):
            m.points[0, 0] = 3.0

    def test_one_dimensional_input_becomes_column(self):
        m = EmpiricalMeasure([0.0, 2.0])
        assert (m.n, m.dim) == (2, 1)
        assert np.allclose(m.weights, 0.5)


class TestPushForward:
    def test_identity(self):
        m = EmpiricalMeasure(np.random.default_rng(0).normal(size=(5, 2)))
        assert push_forward(m, lambda x: x).same_points(m)

    def test_scaling(self):
        m = EmpiricalMeasure([[1.0, 0.0], [-1.0, 0.0]])
        assert np.array_equal(push_forward(m, lambda x: 2 * x).points, [[2.0, 0.0], [-2.0, 0.0]])

    def test_square_map_moment(self):
        m = EmpiricalMeasure([0.0, 2.0])
        g = push_forward(m, lambda x: x**2)
        assert g.points.mean() == pytest.approx(2.0)

    def test_dimension_change_rejected(self):
        m = EmpiricalMeasure([[1.0, 0.0]])
        with pytest.raises(MeasureError):
            push_forward(m, lambda x: x[:1])


class TestSecondMoment:
    def test_at_base(self):
        assert second_moment_sqrt(EmpiricalMeasure([[1.0, 1.0]]), base=[1.0, 1.0]) == 0.0

    def test_symmetric_pair(self):
        assert second_moment_sqrt(EmpiricalMeasure([[1.0, 0.0], [-1.0, 0.0]])) == pytest.approx(1.0)

    def test_hand_sum(self):
        assert second_moment_sqrt(EmpiricalMeasure([3.0, 4.0])) == pytest.approx(math.sqrt(12.5))

    @given(clouds())
    def test_equals_distance_to_dirac(self, pts):
        m = EmpiricalMeasure(pts)
        assert second_moment_sqrt(m) == pytest.approx(w2_distance(m, EmpiricalMeasure.dirac(np.zeros(m.dim))), abs=1e-9)


class TestOptimalPlan:
    def test_identity_for_equal_measures(self):
        m = EmpiricalMeasure(np.random.default_rng(1).normal(size=(6, 2)))
        plan = optimal_plan(m, m)
        assert np.array_equal(plan.as_permutation(), np.arange(6))
        assert plan_cost(plan, m, m).squared_cost == 0.0

    def test_monotone_pairing_1d(self):
        plan = optimal_plan(EmpiricalMeasure([0.0, 2.0]), EmpiricalMeasure([1.0, 3.0]))
        assert plan.as_permutation().tolist() == [0, 1]
        assert plan_cost(plan, EmpiricalMeasure([0.0, 2.0]), EmpiricalMeasure([1.0, 3.0])).squared_cost == pytest.approx(1.0)

    def test_swapped_targets(self):
        a, b = EmpiricalMeasure([0.0, 10.0]), EmpiricalMeasure([10.0, 0.0])
        plan = optimal_plan(a, b)
        assert plan.as_permutation().tolist() == [1, 0]
        assert plan_cost(plan, a, b).squared_cost == 0.0

    def test_ties_resolve_lexicographically(self):
        # four corners of a square against its centre-rotated copy: many optimal permutations
        sq = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        a, b = EmpiricalMeasure(sq), EmpiricalMeasure(np.zeros((4, 2)))
        assert optimal_plan(a, b).as_permutation().tolist() == [0, 1, 2, 3]

    def test_dimension_mismatch(self):
        with pytest.raises(MeasureError):
            optimal_plan(EmpiricalMeasure([[0.0, 0.0]]), EmpiricalMeasure([[0.0]]))

    @given(clouds(n=3, d=2), clouds(n=3, d=2))
    def test_plan_cost_matches_oracle(self, a, b):
        ma, mb = EmpiricalMeasure(a), EmpiricalMeasure(b)
        rep = plan_cost(optimal_plan(ma, mb), ma, mb)
        assert rep.is_optimal
        assert rep.squared_cost == pytest.approx(brute_w2_squared(a, b), abs=1e-9)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
    def test_unequal_sizes_match_replicated_oracle(self, n, k, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(n, 2)), rng.normal(size=(k, 2))
        if math.lcm(n, k) > 7:
            return
        plan = optimal_plan(EmpiricalMeasure(a), EmpiricalMeasure(b))
        assert max(plan.marginal_errors()) < 1e-12
        assert w2_squared(EmpiricalMeasure(a), EmpiricalMeasure(b)) == pytest.approx(brute_w2_squared(a, b), abs=1e-9)


class TestW2:
    def test_zero_on_diagonal(self):
        m = EmpiricalMeasure(np.random.default_rng(2).normal(size=(7, 3)))
        assert w2_distance(m, m) == 0.0

    def test_single_particles(self):
        assert w2_distance(EmpiricalMeasure([[0.0, 0.0]]), EmpiricalMeasure([[3.0, 4.0]])) == pytest.approx(5.0)

    def test_one_dimensional_example(self):
        assert w2_distance(EmpiricalMeasure([0.0, 2.0]), EmpiricalMeasure([1.0, 3.0])) == pytest.approx(1.0)

    @given(clouds(n_max=6), st.data())
    def test_matches_permutation_oracle(self, a, data):
        b = data.draw(clouds(n=a.shape[0], d=a.shape[1]))
        assert abs(w2_distance(EmpiricalMeasure(a), EmpiricalMeasure(b)) - math.sqrt(brute_w2_squared(a, b))) <= 1e-9

    @given(clouds(n_max=6, d=2), clouds(n_max=6, d=2))
    def test_symmetric_exactly(self, a, b):
        ma, mb = EmpiricalMeasure(a), EmpiricalMeasure(b)
        assert w2_distance(ma, mb) == w2_distance(mb, ma)

    @given(clouds(n=5, d=2), clouds(n=5, d=2), clouds(n=5, d=2))
    def test_triangle(self, a, b, c):
        ma, mb, mc = EmpiricalMeasure(a), EmpiricalMeasure(b), EmpiricalMeasure(c)
        assert w2_distance(ma, mc) <= w2_distance(ma, mb) + w2_distance(mb, mc) + 1e-9

    @given(clouds(n=4, d=2), arrays(float, 2, elements=coords))
    def test_translation_of_both(self, a, shift):
        rng = np.random.default_rng(0)
        b = rng.normal(size=a.shape)
        d0 = w2_distance(EmpiricalMeasure(a), EmpiricalMeasure(b))
        d1 = w2_distance(EmpiricalMeasure(a + shift), EmpiricalMeasure(b + shift))
        assert d1 == pytest.approx(d0, abs=1e-9)


class TestDisintegrate:
    def test_permutation_gives_atoms(self):
        cond = disintegrate_plan(TransportPlan.from_permutation([2, 0, 1]), 1)
        assert cond == {0: {2: 1.0}, 1: {0: 1.0}, 2: {1: 1.0}}

    def test_split_atom(self):
        plan = TransportPlan(np.array([0, 0, 1]), np.array([0, 1, 1]), np.array([0.25, 0.25, 0.5]), 2, 2)
        cond = disintegrate_plan(plan, 1)
        assert cond[0] == pytest.approx({0: 0.5, 1: 0.5})

    def test_empty_plan(self):
        with pytest.raises(MeasureError):
            disintegrate_plan(TransportPlan(np.array([], int), np.array([], int), np.array([]), 1, 1))

    @pytest.mark.parametrize("var", [1, 2])
    def test_round_trip_lp_plan(self, var):
        rng = np.random.default_rng(3)
        plan = optimal_plan(EmpiricalMeasure(rng.normal(size=(3, 2))), EmpiricalMeasure(rng.normal(size=(2, 2))))
        cond = disintegrate_plan(plan, var)
        marg = 1 / 3 if var == 1 else 1 / 2
        rebuilt = {}
        for i, c in cond.items():
            for j, w in c.items():
                rebuilt[(i, j) if var == 1 else (j, i)] = w * marg
        for s, t, w in plan.pairs:
            assert rebuilt[(s, t)] == pytest.approx(w, abs=1e-12)


def test_csv_round_trip(tmp_path):
    m = EmpiricalMeasure(np.random.default_rng(4).normal(size=(5, 3)))
    write_measure_csv(m, tmp_path / "m.csv")
    assert read_measure_csv(tmp_path / "m.csv").same_points(m)

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stab.dynamics import ControlSet, make_field
from stab.lyapunov import (
    BallSampler,
    CLPError,
    builtin_quadratic_clp,
    clp_condition4_check,
    derived_constants,
    m_eps,
    m_kappa_eps,
    moduli_table,
    modulus_i,
    modulus_s,
    n_kappa_eps,
    omega_modulus,
    radius_rcal,
    radius_rcal_inverse,
    sampled_omega,
    sampled_phi_range,
    subgradient_pairings,
)
from stab.measures import EmpiricalMeasure, second_moment_sqrt
from stab.proximal import InfConvOptions, gamma_subgradient, inf_convolution
from stab.proximal import SubgradientMeasure


def sampled_twin(clp):
    """Same functions, but moduli forced through the sampling path."""
    return replace(clp, quadratic=False)


class TestBuiltinPair:
    def test_zero_at_target(self, clp2):
        assert clp2.phi(EmpiricalMeasure.dirac([0.0, 0.0], 3)) == 0.0

    def test_value_on_symmetric_pair(self, clp2):
        assert clp2.phi(EmpiricalMeasure([[1.0, 0.0], [-1.0, 0.0]])) == pytest.approx(0.5)

    def test_psi_increasing_in_eps(self, clp2):
        m = EmpiricalMeasure([[1.0, 2.0], [0.5, -1.0]])
        vals = [clp2.psi(m, s * clp2.eps0) for s in (0.01, 0.1, 1.0)]
        assert vals[0] < vals[1] < vals[2]

    def test_gradient_is_position(self, clp2):
        pts = np.random.default_rng(0).normal(size=(5, 2))
        assert np.array_equal(clp2.phi_grad(EmpiricalMeasure(pts)), pts)

    def test_calibrated_threshold(self, clp2):
        assert clp2.eps0 == 0.125

    def test_unsupported_combinations(self, U2):
        origin = EmpiricalMeasure.dirac([0.0, 0.0])
        with pytest.raises(CLPError, match="linear_steer"):
            builtin_quadratic_clp(origin, U2, "mean_attract")
        with pytest.raises(CLPError):
            builtin_quadratic_clp(EmpiricalMeasure.dirac([1.0, 0.0]), U2)
        with pytest.raises(CLPError):
            builtin_quadratic_clp(origin, ControlSet(np.array([[1.0, 0.0], [0.0, 1.0]])))


class TestModuli:
    def test_sup_closed_form(self, clp2):
        assert modulus_s(clp2, 2.0) == 2.0
        assert modulus_s(clp2, 1e-8) < 1e-15

    def test_inf_closed_form(self, clp2):
        assert modulus_i(clp2, 2.0) == 2.0
        grid = [modulus_i(clp2, R) for R in (1, 2, 4, 8, 16)]
        assert all(a < b for a, b in zip(grid, grid[1:]))

    @given(st.floats(0.01, 20))
    def test_inf_below_sup(self, clp2, R):
        assert modulus_i(clp2, R) <= modulus_s(clp2, R)

    def test_sampled_sup_below_closed_form(self, clp2):
        lo, hi = sampled_phi_range(clp2, 2.0, BallSampler(clp2.target, 8), count=200, rng=1)
        assert hi <= 2.0 + 1e-12

    def test_sampled_path_brackets_closed_form(self, clp2):
        twin = sampled_twin(clp2)
        assert 2.0 * 0.99 <= modulus_s(twin, 2.0, count=128) <= 1.1 * 2.0 + 1e-12
        assert modulus_i(twin, 2.0, count=128) <= 2.0

    def test_rcal(self, clp2):
        assert radius_rcal(clp2, 2.0) == pytest.approx(math.sqrt(2.0))
        assert radius_rcal(clp2, 0.3) > 0
        assert radius_rcal_inverse(clp2, radius_rcal(clp2, 3.0)) == pytest.approx(3.0)

    def test_rcal_ball_inside_half_level(self, clp2):
        rc = radius_rcal(clp2, 2.0)
        level = 0.5 * modulus_i(clp2, 2.0)
        for m in BallSampler(clp2.target, 10).inside(np.random.default_rng(2), rc, 100):
            assert clp2.phi(m) <= level * (1 + 1e-12)

    def test_rcal_sampled_path(self, clp2):
        # sampled S, I carry safety factors: Rcal shrinks by sqrt(0.9 / 1.1) at most
        twin = sampled_twin(clp2)
        rc = radius_rcal(twin, 2.0)
        assert rc <= math.sqrt(2.0) + 1e-6

    def test_omega(self, clp2):
        assert omega_modulus(clp2, 2.0, 0.1, 0.0) == 0.0
        # R = 1.5 and eps = 0 give M^eps = 3
        assert m_eps(1.125, 1.5, 0.0) == pytest.approx(3.0)
        assert omega_modulus(clp2, 1.5, 0.0, 0.1) == pytest.approx(0.305)

    def test_sampled_omega_below_bound(self, clp2):
        val = sampled_omega(clp2, 3.0, 0.1, BallSampler(clp2.target, 6), count=200, rng=3)
        assert val <= 0.1 * 3.0 + 0.005

    def test_table(self, clp2):
        t = moduli_table(clp2, 2.0)
        d = t.to_dict(0.1)
        assert (d["S"], d["I"], d["source"]) == (2.0, 2.0, "closed_form")
        assert d["Rcal"] == pytest.approx(math.sqrt(2))


class TestDerivedConstants:
    def test_zero_eps(self):
        assert m_kappa_eps(2.0, 0.5, 0.0) == pytest.approx(0.5 * 2.0)
        assert n_kappa_eps(2.0, 0.5, 0.0) == 0.0

    def test_plugged_value(self, clp2):
        dc = derived_constants(clp2, moduli_table(clp2, 2.0), 0.5, 0.1, 0.2, 2.0)
        assert dc.M_ke == pytest.approx(0.5 * math.sqrt(4.0025) - 0.025)
        assert dc.M_ke == pytest.approx(0.975313, abs=1e-6)

    @given(st.floats(1e-3, 1.0), st.floats(0.0, 0.1), st.floats(0.01, 1.0))
    def test_decrease_rate_positive(self, clp2, kappa, eps, r):
        dc = derived_constants(clp2, moduli_table(clp2, 2.0), kappa, eps, r, 2.0)
        assert dc.Delta > 0
        assert dc.N_ke >= 0 and dc.K_ke >= 0

    def test_ordering_errors(self, clp2):
        mt = moduli_table(clp2, 2.0)
        with pytest.raises(CLPError):
            derived_constants(clp2, mt, 0.5, 0.1, 2.0, 2.0)
        with pytest.raises(CLPError):
            derived_constants(clp2, mt, 1.5, 0.1, 0.2, 2.0)
        with pytest.raises(CLPError):
            derived_constants(clp2, mt, 0.5, -0.1, 0.2, 2.0)


class TestDecreaseCondition:
    def test_exact_gradient_lift(self, clp2, U2, steer):
        m = EmpiricalMeasure(np.random.default_rng(4).normal(size=(8, 2)) + [1.0, -0.5])
        alpha = SubgradientMeasure(m.points, m.points, np.full(8, 1 / 8))
        vals = subgradient_pairings(alpha, steer, U2, m)
        expected = -2 * clp2.phi(m) + min(float(m.mean() @ u) for u in U2)
        assert vals.min() == pytest.approx(expected)
        rep = clp_condition4_check(clp2, steer, U2, m, 0.5 * clp2.eps0, [alpha])
        assert rep.passed and rep.worst_margin > 0

    def test_requires_eps_below_threshold(self, clp2, U2, steer):
        m = EmpiricalMeasure([[1.0, 0.0]])
        with pytest.raises(CLPError):
            clp_condition4_check(clp2, steer, U2, m, clp2.eps0, [])

    def test_random_subgradients_on_annulus(self, clp2, U2, steer):
        rng = np.random.default_rng(5)
        sampler = BallSampler(clp2.target, 12)
        worst = math.inf
        for m in sampler.annulus(rng, 0.1, 3.0, 100):
            kappa = float(rng.uniform(0.1, 1.0))
            eps = float(rng.uniform(0.05, 0.9)) * clp2.eps0
            res = inf_convolution(clp2, kappa, eps, m, InfConvOptions(probes=8, seed=int(rng.integers(2**31))))
            rep = clp_condition4_check(clp2, steer, U2, res.minimizer, eps, [gamma_subgradient(res, kappa)])
            worst = min(worst, rep.worst_margin)
        assert worst > 0


class TestBallSampler:
    def test_exact_distances(self, clp2):
        s = BallSampler(clp2.target, 7)
        rng = np.random.default_rng(6)
        for rho in (0.0, 0.3, 2.0, 11.0):
            assert second_moment_sqrt(s.at_distance(rng, rho)) == pytest.approx(rho, abs=1e-12)

    def test_general_target_bisection(self):
        target = EmpiricalMeasure(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, -1.0]]))
        s = BallSampler(target)
        from stab.measures import w2_distance

        m = s.at_distance(np.random.default_rng(7), 0.8)
        assert w2_distance(m, target) == pytest.approx(0.8, rel=1e-9)

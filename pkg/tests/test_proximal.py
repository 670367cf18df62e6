import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stab.lyapunov import BallSampler, moduli_table
from stab.measures import EmpiricalMeasure, MeasureError, w2_distance
from stab.proximal import (
    InfConvergenceError,
    InfConvOptions,
    SubgradientMeasure,
    ekeland_probes,
    ekeland_verify,
    gamma_subgradient,
    inf_convolution,
    minimizer_bound_margins,
    moreau_closed_form,
    proximal_subgradient_verify,
    subgradient_probes,
    taylor_bound_verify,
)

OPTS = InfConvOptions(probes=32)


def cloud(seed, n=6, d=2, scale=1.0):
    return EmpiricalMeasure(np.random.default_rng(seed).normal(size=(n, d)) * scale)


class TestInfConvolution:
    def test_symmetric_pair_closed_form(self, clp2):
        m = EmpiricalMeasure([[1.0, 0.0], [-1.0, 0.0]])
        res = inf_convolution(clp2, 1.0, 1e-6, m, OPTS)
        assert res.value == pytest.approx(0.25, abs=1e-6)
        assert np.allclose(res.minimizer.points, [[0.5, 0.0], [-0.5, 0.0]], atol=1e-6)
        assert res.ekeland_ok

    def test_at_target(self, clp2):
        m = EmpiricalMeasure.dirac([0.0, 0.0], 4)
        res = inf_convolution(clp2, 0.5, 0.01, m, OPTS)
        assert res.value == 0.0
        assert res.minimizer.same_points(m)

    @given(st.integers(0, 10**6), st.sampled_from([0.25, 0.5, 1.0]))
    def test_matches_closed_form(self, clp2, seed, kappa):
        m = cloud(seed, n=8)
        res = inf_convolution(clp2, kappa, 1e-5, m, OPTS)
        val, mu = moreau_closed_form(m, kappa)
        assert res.value == pytest.approx(val, rel=1e-4)
        assert np.max(np.linalg.norm(res.minimizer.points - mu.points, axis=1)) < 1e-3

    @given(st.integers(0, 10**6), st.floats(0.05, 1.0), st.floats(1e-4, 0.1))
    def test_never_above_phi(self, clp2, seed, kappa, eps):
        m = cloud(seed, n=5)
        assert inf_convolution(clp2, kappa, eps, m, OPTS).value <= clp2.phi(m) + 1e-12

    def test_small_kappa_gap(self, clp2):
        mt = moduli_table(clp2, 3.0)
        for seed in range(5):
            m = BallSampler(clp2.target, 6).at_distance(np.random.default_rng(seed), 2.5)
            res = inf_convolution(clp2, 1e-3, 1e-3, m, OPTS)
            margins = minimizer_bound_margins(clp2, res, m, mt)
            assert margins["envelope_gap"] >= 0
            assert clp2.phi(m) - res.value < 1e-5

    def test_covectors_are_scaled_displacement(self, clp2):
        m = cloud(3)
        res = inf_convolution(clp2, 0.5, 1e-4, m, OPTS)
        assert np.allclose(res.covectors, (m.points - res.minimizer.points) / 0.25, atol=1e-9)
        assert res.plan.is_permutation()

    def test_parameter_errors(self, clp2):
        with pytest.raises(ValueError):
            inf_convolution(clp2, 0.0, 0.1, cloud(0))
        with pytest.raises(ValueError):
            inf_convolution(clp2, 0.5, 0.0, cloud(0))
        with pytest.raises(MeasureError):
            inf_convolution(clp2, 0.5, 0.1, cloud(0, d=3))

    def test_iteration_cap(self, clp2):
        with pytest.raises(InfConvergenceError):
            inf_convolution(clp2, 0.1, 1e-8, cloud(1, scale=5.0), InfConvOptions(max_iter=1, retry=False))

    @given(st.integers(0, 10**6), st.sampled_from([0.25, 0.5, 1.0]), st.floats(1e-4, 0.05))
    def test_a_priori_bounds(self, clp2, seed, kappa, eps):
        mt = moduli_table(clp2, 2.0)
        m = BallSampler(clp2.target, 6).inside(np.random.default_rng(seed), 2.0, 1, boundary_fraction=0.0)[0]
        res = inf_convolution(clp2, kappa, eps, m, OPTS)
        for name, margin in minimizer_bound_margins(clp2, res, m, mt).items():
            assert margin >= -1e-9, name


class TestEkeland:
    def test_exact_minimizer_passes(self, clp2):
        m = cloud(4)
        _, mu = moreau_closed_form(m, 0.5)
        probes = ekeland_probes(clp2, 0.5, m, mu, 64, 0) + [cloud(k) for k in range(10)]
        assert ekeland_verify(clp2, 0.5, 0.01, m, mu, probes).ok

    def test_candidate_at_target(self, clp2):
        m = EmpiricalMeasure.dirac([0.0, 0.0], 3)
        assert ekeland_verify(clp2, 0.7, 0.01, m, m, ekeland_probes(clp2, 0.7, m, m, 16, 0)).ok

    def test_displaced_candidate_fails(self, clp2):
        kappa, eps = 0.5, 0.01
        m = cloud(5, n=4)
        _, mu = moreau_closed_form(m, kappa)
        pts = np.array(mu.points)
        pts[0, 0] += 10 * eps * kappa**2
        bad = EmpiricalMeasure(pts)
        rep = ekeland_verify(clp2, kappa, eps, m, bad, ekeland_probes(clp2, kappa, m, bad, 64, 0))
        assert not rep.ok and rep.failing_probe is not None

    def test_probe_count(self, clp2):
        m = cloud(6)
        assert len(ekeland_probes(clp2, 0.5, m, m, 64, 0)) == 64
        with pytest.raises(ValueError):
            ekeland_probes(clp2, 0.5, m, m, 0)


class TestGammaSubgradient:
    def test_single_atom(self):
        from stab.lyapunov import builtin_quadratic_clp
        from stab.dynamics import ControlSet

        clp1 = builtin_quadratic_clp(EmpiricalMeasure.dirac([0.0]), ControlSet(np.array([[0.0], [1.0], [-1.0]])),
                                     calibrate=False)
        res = inf_convolution(clp1, 1.0, 1e-8, EmpiricalMeasure([2.0]), OPTS)
        g = gamma_subgradient(res, 1.0)
        assert g.positions[0, 0] == pytest.approx(1.0, abs=1e-7)
        assert g.covectors[0, 0] == pytest.approx(1.0, abs=1e-7)

    def test_at_target(self, clp2):
        m = EmpiricalMeasure.dirac([0.0, 0.0], 3)
        g = gamma_subgradient(inf_convolution(clp2, 0.3, 0.01, m, OPTS), 0.3)
        assert np.array_equal(g.covectors, np.zeros((3, 2)))

    @given(st.integers(0, 10**6), st.sampled_from([0.25, 0.5, 1.0]))
    def test_mass_and_moments(self, clp2, seed, kappa):
        m = cloud(seed, n=5)
        res = inf_convolution(clp2, kappa, 1e-3, m, OPTS)
        g = gamma_subgradient(res, kappa)
        assert g.masses.sum() == pytest.approx(1.0)
        pos2, cov2 = g.second_moments()
        assert pos2 == pytest.approx(float(np.mean(np.sum(res.minimizer.points**2, axis=1))))
        assert math.sqrt(cov2) == pytest.approx(w2_distance(m, res.minimizer) / kappa**2, rel=1e-6)

    def test_invalid_masses(self):
        with pytest.raises(ValueError):
            SubgradientMeasure(np.zeros((2, 1)), np.zeros((2, 1)), np.array([0.7, 0.7]))


class TestProximalSubgradient:
    @pytest.mark.parametrize("kappa", [0.25, 0.5, 1.0])
    def test_passes_and_doubled_fails(self, clp2, kappa):
        m = cloud(7, n=10, scale=1.5)
        res = inf_convolution(clp2, kappa, 1e-3, m, OPTS)
        alpha = gamma_subgradient(res, kappa)
        sigma = 1 / (2 * kappa**2)
        probes = subgradient_probes(res.minimizer, alpha, 1.0, 100, 0, kappa)
        assert proximal_subgradient_verify(clp2, res.minimizer, alpha, 1e-3, sigma, 1.0, probes).ok
        doubled = alpha.scaled(2.0)
        probes2 = subgradient_probes(res.minimizer, doubled, 1.0, 100, 0, kappa)
        assert not proximal_subgradient_verify(clp2, res.minimizer, doubled, 1e-3, sigma, 1.0, probes2).ok

    def test_coincident_probe(self, clp2):
        m = cloud(8)
        res = inf_convolution(clp2, 0.5, 1e-3, m, OPTS)
        rep = proximal_subgradient_verify(clp2, res.minimizer, gamma_subgradient(res, 0.5), 1e-3, 2.0, 1.0,
                                          [res.minimizer], tol=0.0)
        assert rep.ok and rep.worst_margin == pytest.approx(0.0, abs=1e-15)

    def test_marginal_mismatch(self, clp2):
        m = cloud(9)
        res = inf_convolution(clp2, 0.5, 1e-3, m, OPTS)
        with pytest.raises(MeasureError):
            proximal_subgradient_verify(clp2, m, gamma_subgradient(res, 0.5), 1e-3, 2.0, 1.0, [m])


class TestTaylor:
    def test_zero_direction(self, clp2):
        m = cloud(10)
        rep = taylor_bound_verify(clp2, 0.5, 1e-3, m, np.zeros((6, 2)), 0.1, 3.0, OPTS)
        assert rep.ok and rep.lhs <= rep.rhs

    def test_pull_toward_target(self, clp2):
        m = cloud(11)
        rep = taylor_bound_verify(clp2, 0.5, 1e-3, m, -m.points, 0.01, 3.0, OPTS)
        assert rep.ok and rep.slack > 0

    def test_random_unit_directions(self, clp2):
        rng = np.random.default_rng(12)
        sampler = BallSampler(clp2.target, 6)
        for k in range(100):
            m = sampler.inside(rng, 2.0, 1)[0]
            b = rng.normal(size=(6, 2))
            b /= math.sqrt(np.mean(np.sum(b * b, axis=1)))
            tau = (1e-3, 1e-2, 1e-1)[k % 3]
            assert taylor_bound_verify(clp2, 0.5, 1e-3, m, b, tau, 2.0, OPTS).slack >= -1e-9

    def test_shape_error(self, clp2):
        with pytest.raises(MeasureError):
            taylor_bound_verify(clp2, 0.5, 1e-3, cloud(13), np.zeros((5, 2)), 0.1, 2.0)

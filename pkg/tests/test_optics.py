import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from clocknet import optics as op
from clocknet import spin_core as sc

PROBE = op.ProbePulse(n_dr=1e6, n_det=1e6, gamma=7e3, delta=6e6, sigma_over_a=1.2e-5)


class TestHardware:
    def test_probe_eta(self):
        assert PROBE.eta == pytest.approx(1e6 * (7e3 / 6e6) ** 2 * 1.2e-5)
        assert PROBE.eta_n == PROBE.eta

    def test_zero_detuning_rejected(self):
        with pytest.raises(ValueError, match="detuning"):
            op.ProbePulse(1, 1, 7e3, 0.0, 1e-5)

    def test_photons_for_eta_roundtrip(self):
        n = op.photons_for_eta(0.5, 7e3, 6e6, 1.2e-5)
        assert op.ProbePulse(n, n, 7e3, 6e6, 1.2e-5).eta == pytest.approx(0.5)

    def test_finesse(self):
        cav = op.CavityParams(t1=1e-4, t2=1e-4, loss=5e-5)
        assert cav.finesse == pytest.approx(2 * math.pi / 3e-4)
        assert cav.small_loss

    def test_symmetric_finesse(self):
        assert op.CavityParams.symmetric(1e5).finesse == pytest.approx(1e5)

    def test_large_loss_flagged(self):
        assert not op.CavityParams(t1=0.3, t2=0.3).small_loss

    def test_low_finesse_rejected(self):
        with pytest.raises(ValueError):
            op.CavityParams(t1=0.9, t2=0.9, loss=3.0)


class TestKappa:
    def test_no_scattering_no_coupling(self):
        assert op.kappa_free(1000, 0.0) == 0.0

    def test_unit_crossover(self):
        d = 2 * math.e
        k = op.kappa_free(d, 0.5)
        assert k**2 == pytest.approx(math.exp(0.5))
        assert op.xi_qnd(k, 0.5) == pytest.approx(1 / (math.exp(-0.5) * (1 + math.exp(0.5))))
        assert math.sqrt(math.e) / k**2 == pytest.approx(1.0)

    def test_xi_min_free(self):
        assert op.xi_min_free(100) == pytest.approx(0.0543656, rel=1e-6)

    @given(st.floats(0.01, 1e4), st.floats(0, 3))
    def test_cavity_at_crossover_is_free_space(self, d, eta):
        assert op.kappa_cavity(d, math.pi / 2, eta) == pytest.approx(op.kappa_free(d, eta), rel=1e-15)

    def test_substituted_form(self):
        d, f = 0.012, 1e5
        k = op.kappa_cavity_substituted(d, f, 0.5)
        assert k**2 == pytest.approx(2 * d * f * math.exp(-0.5) / math.pi)

    def test_literal_and_substituted_share_prefactor(self):
        d, f = 0.012, 1e5
        eta_n = math.pi * 0.5 / f
        lit = op.kappa_cavity(d, f, eta_n)
        sub = op.kappa_cavity_substituted(d, f, 0.5)
        assert lit / sub == pytest.approx(math.exp((0.5 - eta_n) / 2))

    def test_cavity_xi_min(self):
        xi = op.xi_min_cavity(0.012, 1e5)
        assert xi == pytest.approx(3.558e-3, rel=1e-3)
        assert sc.to_db(xi) == pytest.approx(-24.49, abs=0.01)
        assert sc.to_db(xi) <= -20.0

    @pytest.mark.parametrize("eta_n, f, expected", [(0.0, 1e5, 0.0), (0.3, math.pi, 0.3)])
    def test_eta_cav(self, eta_n, f, expected):
        assert op.eta_cav(eta_n, f) == pytest.approx(expected)

    def test_eta_cav_inverse(self):
        eta_n = 0.5 * math.pi / 1e5
        assert eta_n == pytest.approx(1.5708e-5, rel=1e-4)
        assert op.eta_cav(eta_n, 1e5) == pytest.approx(0.5)


class TestQndUpdate:
    def test_no_coupling(self):
        s, _ = op.qnd_update(sc.new_css(100), 0.0, 0.3)
        assert sc.squeezing_parameter(s) == pytest.approx(math.exp(0.3))

    @given(st.floats(0, 100), st.floats(0, 2))
    def test_closed_form(self, kappa, eta):
        s, _ = op.qnd_update(sc.new_css(1000), kappa, eta)
        assert sc.squeezing_parameter(s) == pytest.approx(op.xi_qnd(kappa, eta), rel=1e-9)

    @given(st.floats(0.01, 3), st.floats(0, 50))
    def test_matches_gaussian_conditioning(self, var_x, kappa):
        s = sc.new_css(100).replace(cov=np.diag([var_x, 0.25 / var_x]))
        post, _ = op.qnd_update(s, kappa, 0.0)
        assert post.var_x == pytest.approx(oracles.gaussian_conditional_variance(var_x, kappa), rel=1e-9)

    def test_optimum_at_d_1000(self):
        d = 1000
        kappa = math.sqrt(d * math.exp(-0.5) / 2)
        s, _ = op.qnd_update(sc.new_css(10**6), kappa, 0.5)
        # large-d expansion of the exact optimum
        assert sc.squeezing_parameter(s) == pytest.approx(2 * math.e / d, rel=3.5 / d)
        post = oracles.gaussian_conditional_variance(0.5, kappa)
        assert sc.squeezing_parameter(s) == pytest.approx(2 * post * math.exp(0.5), rel=1e-9)

    @given(st.floats(0, 100), st.floats(0, 2), st.floats(-5, 5))
    def test_never_unphysical(self, kappa, eta, outcome):
        s = sc.new_css(1000)
        post, _ = op.qnd_update(s, kappa, eta, outcome=outcome)
        assert post.var_x <= s.var_x + 1e-15
        assert sc.heisenberg_ok(post.cov, tol=1e-9)

    def test_back_action_on_conjugate(self):
        post, _ = op.qnd_update(sc.new_css(100), 3.0)
        assert post.var_p == pytest.approx(0.5 + 4.5)

    @pytest.mark.slow
    def test_outcome_sampling_mean(self):
        s = sc.new_css(1000).replace(quad_mean=np.array([0.3, 0.0]))
        kappa = 2.0
        rng = np.random.default_rng(4)
        outs = np.array([op.qnd_update(s, kappa, 0.1, rng)[1] for _ in range(100_000)])
        se = outs.std(ddof=1) / math.sqrt(outs.size)
        assert abs(outs.mean() - kappa * 0.3) < 5 * se
        assert outs.var() == pytest.approx(kappa**2 * 0.5 + 0.5, rel=0.02)

    def test_conditioned_mean_follows_outcome(self):
        post, out = op.qnd_update(sc.new_css(100), 2.0, outcome=4.5)
        assert out == 4.5
        assert post.quad_mean[0] == pytest.approx(2.0 * 0.5 * 4.5 / (4.0 * 0.5 + 0.5))


class TestPhaseShift:
    def test_symmetric_state(self):
        cav = op.CavityParams.symmetric(1e5)
        mean, noise = op.phase_shift(sc.new_css(1000), PROBE, cav)
        assert mean == 0.0
        assert noise == pytest.approx(1e-3)

    def test_scaled_by_root_n_gives_coupling(self):
        cav = op.CavityParams.symmetric(1e4, d=0.5)
        s = sc.new_css(1000).replace(quad_mean=np.array([0.7, 0.0]))
        mean, noise = op.phase_shift(s, PROBE, cav)
        root_n = math.sqrt(PROBE.n_det)
        assert root_n * mean == pytest.approx(op.kappa_cavity(0.5, cav.finesse, PROBE.eta_n) * 0.7, rel=1e-12)
        assert root_n * noise == pytest.approx(1.0)


class TestTransmission:
    def test_matched_lossless(self):
        exact, first = op.cavity_transmission(op.CavityParams.symmetric(1e4), 0.0)
        assert exact == pytest.approx(1.0)
        assert first == pytest.approx(1.0)

    @given(st.floats(1e2, 1e6), st.floats(0, 0.0249))
    def test_first_order_accuracy(self, f, x):
        cav = op.CavityParams.symmetric(f)
        d_delta = x * math.pi / f  # 2 F d_delta / pi < 0.05
        exact, first = op.cavity_transmission(cav, d_delta)
        assert first == pytest.approx(exact, rel=0.01)

    def test_absorption_at_optimum(self):
        n_atoms, sigma_over_a, gamma, delta = 1000, 1.2e-5, 7e3, 6e6
        n = op.photons_for_eta(0.5, gamma, delta, sigma_over_a)
        d = n_atoms * sigma_over_a
        assert op.probe_absorption(d, gamma, delta) == pytest.approx(op.d_delta_at_optimum(n_atoms, n))


class TestCooperativity:
    def test_strontium_cavity_numbers(self):
        cav = op.CavityParams.symmetric(1e5, d=0.012, big_gamma=29e3)
        rep = op.cooperativity_check(cav, 500e3, 7e3)
        assert rep.cooperativity == pytest.approx(1231.5, abs=0.1)
        assert rep.d_times_f == pytest.approx(1200)
        assert rep.consistent

    def test_single_atom_rabi(self):
        assert op.collective_rabi(16e3, 1000) == pytest.approx(506e3, rel=1e-3)

    def test_doubling_atoms(self):
        cav1 = op.CavityParams.symmetric(1e5, d=0.012)
        cav2 = op.CavityParams.symmetric(1e5, d=0.024)
        r1 = op.cooperativity_check(cav1, op.collective_rabi(16e3, 1000), 7e3, rtol=1)
        r2 = op.cooperativity_check(cav2, op.collective_rabi(16e3, 2000), 7e3, rtol=1)
        assert r2.cooperativity == pytest.approx(2 * r1.cooperativity)
        assert r2.d_times_f == pytest.approx(2 * r1.d_times_f)

    def test_inconsistent_warns(self):
        cav = op.CavityParams.symmetric(1e5, d=0.012)
        with pytest.warns(UserWarning, match="cooperativity"):
            rep = op.cooperativity_check(cav, 800e3, 7e3)
        assert not rep.consistent


class TestHpValidity:
    def test_boundary_excluded(self):
        assert not op.hp_validity(1.0, op.HP_BOUND)
        assert op.hp_validity(1.0, math.nextafter(op.HP_BOUND, 0))

    @pytest.mark.parametrize("sa, f, ok", [(1e-4, 1e4, True), (1e-3, 1e5, False), (1.2e-5, 1e5, True)])
    def test_examples(self, sa, f, ok):
        assert op.hp_validity(sa, f) is ok


class TestOptimum:
    @pytest.mark.parametrize("d", [100, 1000, 10_000])
    def test_against_grid_oracle(self, d):
        eta_o, xi_o = oracles.xi_grid_minimum(d)
        eta, xi = op.optimal_eta_scan(d)
        assert eta == pytest.approx(eta_o, abs=2e-4)
        assert xi == pytest.approx(xi_o, rel=1e-7)

    @pytest.mark.parametrize("d", [200, 1000, 5000])
    def test_large_d_limit(self, d):
        eta, xi = op.optimal_eta_scan(d)
        assert abs(eta - 0.5) < 0.01 + 2 / d
        # first-order error of the 2e/d expansion is 2 sqrt(e)/d
        assert abs(xi / op.xi_min_free(d) - 1) < 3.5 / d

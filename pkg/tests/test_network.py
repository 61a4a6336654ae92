import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from clocknet import network as nw
from clocknet import optics as op

N, D, F = 1000, 0.012, 1e5


def single_snr(eta=0.5, f=F):
    return math.sqrt(N) * op.kappa_cavity_substituted(D, f, eta) * math.exp(-eta / 2)


class TestChainSnr:
    def test_single_clock(self):
        cfg = nw.uniform_chain(1, 0.0, N, D, F)
        assert nw.chain_snr(cfg) == pytest.approx(single_snr(), rel=1e-14)

    @pytest.mark.parametrize("m", [1, 2, 5, 16])
    def test_lossless_is_linear_in_m(self, m):
        cfg = nw.uniform_chain(m, 0.0, N, D, F)
        assert nw.chain_snr(cfg) == pytest.approx(m * single_snr(), rel=1e-13)

    def test_two_clocks_equal_finesse(self):
        cfg = nw.uniform_chain(2, math.log(2), N, D, F, allocate=False)
        assert nw.chain_snr(cfg) == pytest.approx((1 + 2**-0.5) * single_snr(), rel=1e-13)

    def test_two_clocks_allocated(self):
        cfg = nw.uniform_chain(2, math.log(2), N, D, F)
        assert nw.chain_snr(cfg) == pytest.approx(1.5 * single_snr(), rel=1e-13)

    @given(st.lists(st.floats(0, 2), min_size=2, max_size=6), st.integers(0, 5), st.floats(0.01, 1))
    def test_monotone_in_attenuation(self, rs, k, dr):
        k = k % len(rs)
        clocks = [nw.ChainClock(N, D, F)] * len(rs)
        base = nw.ChainConfig(clocks, [nw.ChannelSegment(r) for r in rs])
        rs2 = list(rs)
        rs2[k] += dr
        more = nw.ChainConfig(clocks, [nw.ChannelSegment(r) for r in rs2])
        assert nw.chain_snr(more) <= nw.chain_snr(base)

    @given(st.integers(1, 6), st.integers(0, 5), st.floats(1.01, 10))
    def test_monotone_in_finesse(self, m, k, factor):
        cfg = nw.uniform_chain(m, 0.2, N, D, 1e4)
        fs = cfg.finesses.copy()
        fs[k % m] *= factor
        assert nw.chain_snr(cfg.with_params(finesses=fs)) >= nw.chain_snr(cfg)

    def test_table_rows(self):
        rows = nw.chain_table(nw.uniform_chain(3, 0.1, N, D, F))
        assert [r["i"] for r in rows] == [1, 2, 3]
        assert rows[-1]["r_i"] == 0.0
        assert rows[0]["r_i"] == pytest.approx(0.2)
        assert set(rows[0]) == {"i", "r_i", "finesse", "eta", "snr_term"}

    def test_segment_count_checked(self):
        with pytest.raises(ValueError):
            nw.ChainConfig([nw.ChainClock(N, D, F)], [])

    def test_hp_warning(self):
        with pytest.warns(UserWarning, match="2\\*pi\\*e"):
            nw.ChainClock(100, 1.0, 1e4)


class TestAllocation:
    def test_lossless(self):
        cfg = nw.uniform_chain(4, 0.0, N, D, F, allocate=False)
        np.testing.assert_allclose(nw.allocate_finesse(F, cfg), F)

    def test_two_clocks(self):
        cfg = nw.uniform_chain(2, math.log(2), N, D, F, allocate=False)
        f = nw.allocate_finesse(F, cfg)
        assert f[0] == pytest.approx(F / 2)
        assert f[1] == F

    @pytest.mark.parametrize("m, r", [(4, 0.17), (8, 0.087), (3, 1.0)])
    def test_keeps_eta_at_half(self, m, r):
        cfg = nw.uniform_chain(m, r, N, D, F)
        scatter = (7e3 / 6e6) ** 2 * D / N
        n = 0.5 * math.pi / (scatter * F)  # photons that put the last clock at 1/2
        etas = nw.eta_from_photons(n, cfg.attenuation, scatter, cfg.finesses)
        np.testing.assert_allclose(etas, 0.5, rtol=1e-12)

    def test_unequal_hops_rejected(self):
        clocks = [nw.ChainClock(N, D, F)] * 3
        cfg = nw.ChainConfig(clocks, [nw.ChannelSegment(0.1), nw.ChannelSegment(0.2), nw.ChannelSegment(0)])
        with pytest.raises(ValueError, match="equal"):
            nw.allocate_finesse(F, cfg)


class TestImprovement:
    def test_four_clocks(self):
        assert nw.chain_improvement(4, 0.5) == pytest.approx(3.14, abs=0.05)
        assert round(nw.chain_improvement(4, 0.5), 1) == 3.1

    def test_eight_clocks(self):
        assert nw.chain_improvement(8, 0.5) == pytest.approx(6.02, abs=0.05)
        assert round(nw.chain_improvement(8, 0.5)) == 6

    def test_other_convention(self):
        val = nw.chain_improvement(4, 0.5, "total_over_M_minus_1")
        assert val == pytest.approx(sum(2 ** (-k / 3) for k in range(4)), rel=1e-14)
        assert val == pytest.approx(2.92, abs=0.005)

    @given(st.integers(1, 50))
    def test_lossless(self, m):
        for conv in nw.TransmissionConvention:
            assert nw.chain_improvement(m, 1.0, conv) == pytest.approx(m, rel=1e-14)

    @given(st.integers(2, 30), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_decreasing_in_loss(self, m, t1, t2):
        if abs(t1 - t2) < 1e-6:
            return
        hi, lo = max(t1, t2), min(t1, t2)
        assert nw.chain_improvement(m, lo) < nw.chain_improvement(m, hi)

    @given(st.integers(1, 30), st.floats(0.01, 1.0))
    def test_matches_snr_ratio(self, m, t):
        r = nw.per_hop_r(m, t)
        chain = nw.chain_snr(nw.uniform_chain(m, r, N, D, F))
        assert chain / single_snr() == pytest.approx(nw.chain_improvement(m, t), rel=1e-12)
        assert chain / single_snr() == pytest.approx(oracles.geometric_improvement(m, r), rel=1e-12)

    def test_bad_transmission(self):
        with pytest.raises(ValueError):
            nw.per_hop_r(4, 0.0)


class TestPrecision:
    def test_lossless_limit(self):
        m = 7
        p = nw.chain_precision(m, 1e-12, D, N, F)
        # the S/N sum at eta = 1/2 gives 2 d N F / (pi e) per clock
        assert p.exact == pytest.approx((2 * D * N * F / (math.pi * math.e)) ** -0.5 / m, rel=1e-10)
        assert p.asymptotic_printed == pytest.approx(p.asymptotic / math.sqrt(2))

    def test_dense_chain(self):
        p = nw.chain_precision(100, 0.05, D, N, F)
        assert p.rel_diff < 0.15
        assert not p.flagged or p.rel_diff > 0.1

    def test_heisenberg_in_n(self):
        # at fixed sigma/A, d grows with N
        a = nw.chain_precision(4, 0.1, D, N, F).exact
        b = nw.chain_precision(4, 0.1, 2 * D, 2 * N, F).exact
        assert b == pytest.approx(a / 2, rel=1e-12)

    def test_short_chain_flagged(self):
        assert nw.chain_precision(4, 0.17, D, N, F).flagged

    @given(st.floats(0.001, 0.05))
    def test_asymptote_within_order_r(self, r):
        m = int(round(10 / r))
        p = nw.chain_precision(m, r, D, N, F)
        assert p.rel_diff <= r + 1e-3


class TestOptimizer:
    def test_free_eta_lossless(self):
        cfg = nw.uniform_chain(3, 0.0, N, D, F, eta=0.1)
        res = nw.optimize_chain(cfg, ["eta"])
        assert res.converged
        np.testing.assert_allclose(res.config.etas, 0.5, atol=1e-4)

    def test_free_finesse_fixed_photons(self):
        m, r = 4, 0.2
        cfg = nw.uniform_chain(m, r, N, D, F, allocate=False)
        con = nw.OptimizeConstraints(photon_scatter=0.5 / F, eta_budget=0.5, finesse_bounds=(1.0, 1e6))
        res = nw.optimize_chain(cfg, ["finesse"], con)
        expected = nw.allocate_finesse(F, cfg)
        np.testing.assert_allclose(res.config.finesses, expected, rtol=1e-3)
        np.testing.assert_allclose(res.config.etas, 0.5, rtol=1e-3)

    def test_eta_free_with_coupling_rejected(self):
        cfg = nw.uniform_chain(2, 0.1, N, D, F)
        with pytest.raises(ValueError):
            nw.optimize_chain(cfg, ["eta"], nw.OptimizeConstraints(photon_scatter=1e-6))

    def test_single_clock_grid_oracle(self):
        cfg = nw.uniform_chain(1, 0.0, N, D, F, eta=1.3)
        res = nw.optimize_chain(cfg, ["eta"])
        grid = np.linspace(1e-4, 2, 20001)
        best = grid[np.argmax(np.sqrt(grid) * np.exp(-grid))]
        assert res.config.etas[0] == pytest.approx(best, abs=2e-4)
        assert res.config.etas[0] == pytest.approx(0.5, abs=1e-4)

    @pytest.mark.parametrize("m, t", [(4, 0.5), (8, 0.5), (3, 0.1)])
    def test_not_worse_than_analytic(self, m, t):
        cfg = nw.uniform_chain(m, nw.per_hop_r(m, t), N, D, F, eta=0.2)
        analytic = nw.chain_snr(cfg.with_params(etas=np.full(m, 0.5)))
        res = nw.optimize_chain(cfg, ["eta"])
        assert res.snr >= analytic * (1 - 1e-12)
        assert res.snr <= analytic + 1e-6

    def test_deterministic(self):
        cfg = nw.uniform_chain(3, 0.3, N, D, F, eta=0.9)
        a = nw.optimize_chain(cfg, ["eta"])
        b = nw.optimize_chain(cfg, ["eta"])
        assert a.history == b.history

    def test_nonconvergence_warns(self):
        cfg = nw.uniform_chain(2, 0.3, N, D, F, eta=0.9)
        with pytest.warns(UserWarning, match="converge"):
            res = nw.optimize_chain(cfg, ["eta"], nw.OptimizeConstraints(max_sweeps=1, tol=0.0))
        assert not res.converged

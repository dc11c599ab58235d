from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wickrg.formfactor import CutoffProfile, FormFactor
from wickrg.spectral import (
    MassAccumulator,
    NegativeDenominator,
    _backward,
    accumulate_mass,
    apriori_energy_derivative_bound,
    ground_energy,
    leading_constants,
    run_flow,
    solve_energy_chain,
    tilde_c2,
)
from wickrg.wickflow import FlowConfig

# C_minus1, C_0 and their one-integral sum at rho = 1/4 and 1/8, from an
# mpmath quadrature written independently of the package (see test below)
FROZEN = {
    0.25: (0.089887150452721586, 0.51389466846024415, 0.60378181891296574),
    0.125: (0.089887150452721586, 0.61467433884992324, 0.70456148930264482),
}


def test_tilde_c2_sharp_is_two_log_three_halves():
    assert tilde_c2() == pytest.approx(2 * math.log(1.5), rel=1e-13)


@pytest.mark.parametrize("lam", [0.5, 2.0, 4.0])
def test_tilde_c2_cutoff_closed_form(lam):
    assert tilde_c2(FormFactor(0.0, lam)) == pytest.approx(2 * math.log(1 + lam / 2), rel=1e-12)


def test_tilde_c2_ignores_infrared_regularization():
    assert tilde_c2(FormFactor(0.3)) == pytest.approx(tilde_c2(FormFactor(0.0)), rel=1e-14)


@pytest.mark.parametrize("rho", [0.25, 0.125])
def test_leading_constants_frozen(rho):
    lc = leading_constants(FlowConfig(g=0.05, rho=rho))
    cm1, c0, seam = FROZEN[rho]
    assert lc.C_minus1 == pytest.approx(cm1, rel=1e-10)
    assert lc.C_0 == pytest.approx(c0, rel=1e-10)
    assert lc.seam == pytest.approx(seam, rel=1e-10)
    assert lc.seam_residual < 1e-12
    assert tuple(lc) == (lc.C_minus1, lc.C_0)


def test_leading_constants_mpmath_oracle():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 25

    def theta(t):
        if t <= 0.75:
            return mp.mpf(1)
        if t >= 1:
            return mp.mpf(0)
        s = (t - mp.mpf(0.75)) / mp.mpf(0.25)
        return 1 - (6 * s**5 - 15 * s**4 + 10 * s**3)

    def cb2(r, x):
        return mp.cos(mp.pi / 2 * theta(x / r)) ** 2

    def c2(r, x):
        return mp.sin(mp.pi / 2 * theta(x / r)) ** 2

    rho = mp.mpf(1) / 4
    pts = [0, 0.75 * rho, rho, 0.75, 1]

    def c0(x):
        b, r, c = cb2(1, x), cb2(rho, x), c2(1, x)
        u = 1 + x * b / 2
        s = x * b / 2 / u
        return r * c * (1 - s) ** 2 / (1 + x * c * r / 2 - x * x * b * c / (4 * u))

    cm1 = mp.quad(lambda x: cb2(1, x) / (1 + x * cb2(1, x) / 2), pts)
    seam = mp.quad(lambda x: cb2(rho, x) / (1 + x * cb2(rho, x) / 2), pts)
    assert float(cm1) == pytest.approx(FROZEN[0.25][0], rel=1e-14)
    assert float(mp.quad(c0, pts)) == pytest.approx(FROZEN[0.25][1], rel=1e-14)
    assert float(seam) == pytest.approx(FROZEN[0.25][2], rel=1e-14)


def test_leading_constants_step_profile():
    # a sharp projector at 1 leaves nothing of the first decimation inside the form factor
    lc = leading_constants(FlowConfig(g=0.05, rho=0.25, profile=CutoffProfile.step(1.0)))
    assert lc.C_minus1 == 0.0
    assert lc.seam_residual < 1e-12


def test_leading_constants_vanish_above_cutoff():
    # nothing is decimated below the form factor cutoff
    lc = leading_constants(FlowConfig(g=0.05, rho=0.25, profile=CutoffProfile(50.0, 60.0)))
    assert lc.C_minus1 == 0.0
    assert lc.C_0 == 0.0


def test_K_stable_under_rho_halving():
    K = [leading_constants(FlowConfig(g=0.05, rho=r)).K for r in (0.25, 0.125)]
    assert abs(K[0] - K[1]) / max(K) < 0.1


@pytest.mark.parametrize(
    "E,dE,ok",
    [(0.5, 1.0, True), (0.5, 1.0 + 1e-6, False), (0.0, 0.0, True), (-1e-3, 0.0, True), (0.02, -0.2, True)],
)
def test_apriori_derivative_bound(E, dE, ok):
    assert apriori_energy_derivative_bound(E, dE) is ok


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(-0.05, 0.05),
            st.floats(-0.05, 0.05),
            st.floats(0.5, 2.0),
        ),
        min_size=2,
        max_size=7,
    ),
    st.sampled_from([0.25, 0.5]),
)
def test_backward_solves_linear_chain(data, rho):
    maps = [(z, Ez, a, 1.0 if i == 0 else rho) for i, (z, Ez, a) in enumerate(data)]
    top = len(maps) - 2
    e = _backward(maps, top)
    z, Ez, a, _ = maps[-1]
    assert Ez + a * (e[-1] - z) == pytest.approx(0.0, abs=1e-15)
    for j in range(len(maps) - 1):
        z, Ez, a, r = maps[j]
        assert r * e[j + 1] == pytest.approx(Ez + a * (e[j] - z), abs=1e-15)


def test_backward_truncated_leaves_upper_scales_unset():
    maps = [(0.0, 0.1, 1.0, 1.0), (0.0, 0.2, 1.0, 0.5), (0.0, 0.3, 1.0, 0.5)]
    e = _backward(maps, 0)
    assert math.isnan(e[2])
    assert e[1] == pytest.approx(-0.2)
    assert e[0] == pytest.approx(1.0 * -0.2 - 0.1)


class TestMassAccumulator:
    def geometric(self, q=0.25, n=6):
        acc = MassAccumulator(rho=0.5)
        for k, scale in enumerate(range(-1, n - 1)):
            # dgamma2 weighted by rho**-max(scale, 0) comes out as q**k
            acc.add(scale, 0.1 * q**k, q**k * 0.5 ** max(scale, 0), 1e-9, 1e-9)
        return acc

    def test_weights(self):
        acc = MassAccumulator(rho=0.25)
        acc.add(-1, 0.0, 1.0, 0.0, 0.0)
        acc.add(0, 0.0, 1.0, 0.0, 0.0)
        acc.add(2, 0.0, 1.0, 0.5, 0.5)
        assert acc.dgamma2 == [1.0, 1.0, 16.0]
        assert acc.budget_num == [0.0, 0.0, 8.0]
        assert acc.budget_den == [0.0, 0.0, 0.5]

    def test_sums_and_inverse_mass(self):
        acc = self.geometric()
        s = sum(0.25**k for k in range(6))
        assert acc.numerator == pytest.approx(1 + s)
        assert acc.denominator == pytest.approx(1 + 0.1 * s)
        assert acc.inverse_mass == pytest.approx((1 + s) / (1 + 0.1 * s))

    def test_geometric_tail_is_exact(self):
        acc = self.geometric()
        tn, td = acc.tails
        rest = 0.25**6 / (1 - 0.25)
        assert tn == pytest.approx(rest, rel=1e-12)
        assert td == pytest.approx(0.1 * rest, rel=1e-12)

    def test_error_combines_tails_and_budgets(self):
        acc = self.geometric()
        tn, td = acc.tails
        N, D = acc.numerator, acc.denominator
        bn = sum(acc.budget_num)
        bd = sum(acc.budget_den)
        assert acc.inverse_mass_error() == pytest.approx((tn + bn) / D + N * (td + bd) / D**2)

    def test_short_or_growing_series_has_infinite_tail(self):
        acc = MassAccumulator(rho=0.5)
        acc.add(-1, 0.1, 0.1, 0, 0)
        acc.add(0, 0.1, 0.1, 0, 0)
        assert acc.tails == (math.inf, math.inf)
        acc.add(1, 0.2, 0.2, 0, 0)
        assert math.isinf(acc.tails[1])
        assert MassAccumulator(0.5).tails == (0.0, 0.0)

    def test_convergence_flag(self):
        assert self.geometric(q=0.01).converged()
        assert not self.geometric(q=0.9).converged()

    def test_negative_denominator(self):
        acc = MassAccumulator(rho=0.5)
        acc.add(-1, -2.0, 0.0, 0, 0)
        with pytest.raises(NegativeDenominator):
            acc.inverse_mass


def test_free_chain_and_mass():
    cfg = FlowConfig(g=0.0, rho=0.25, pairs_window=(2, 1, 0))
    ch = solve_energy_chain(cfg, 2)
    assert np.all(ch.e_values == 0.0)
    E, err = ground_energy(None, ch)
    assert E == 0.0
    assert err == 0.0
    m, merr, _ = accumulate_mass(cfg)
    assert m == 1.0
    assert merr == 0.0


def test_free_chain_at_positive_momentum():
    cfg = FlowConfig(g=0.0, rho=0.25, p=0.2, pairs_window=(1, 1, 0))
    ch = solve_energy_chain(cfg, 1)
    E, _ = ground_energy(None, ch)
    assert E == pytest.approx(0.02, abs=1e-14)


def test_mass_requires_zero_momentum():
    with pytest.raises(ValueError):
        accumulate_mass(FlowConfig(g=0.01, p=0.1))


def test_greedy_flow_records():
    run = run_flow(FlowConfig(g=0.0, rho=0.25), 2)
    assert [r.scale for r in run.records] == [-1, 0, 1, 2]
    assert len(run.reports) == 3
    assert run.const == 0.0
    assert all(r.dgamma1 == 0.0 and r.dgamma2 == 0.0 for r in run.records[:-1])
    assert run.records[1].lam == pytest.approx(0.5)


@pytest.mark.slow
def test_mass_series_leading_coefficient():
    # the computed series approaches 1 + (16 pi / 3) tilde_c2 g**2 up to O(rho) corrections
    g = 0.01
    cfg = FlowConfig(g=g, rho=0.25, pairs_window=(1, 1, 0))
    run = run_flow(cfg, 4)
    m, err, acc = accumulate_mass(cfg, run=run)
    lead = 16 * math.pi / 3 * tilde_c2() * g**2
    assert m > 1
    assert abs((m - 1) / lead - 1) < 0.05
    assert err < 0.05 * (m - 1)
    # half that coefficient is off by a factor of about two
    assert (m - 1) / (lead / 2) > 1.8

from __future__ import annotations

import math

import numpy as np
import pytest

from wickrg.formfactor import FormFactor
from wickrg.initcond import first_decimation, kinetic_T, vacuum_A2, wick_constant, wick_normal_form
from wickrg.kernelspace import Leg, SupLattice, norm_T
from wickrg.quadrature import integrate_photon_loop, polarization_vectors
from wickrg.sumrules import check_sum_rules
from wickrg.kernelspace import norm_sigma
from wickrg.wickflow import FlowConfig, free_comparison_T

RNG = np.random.default_rng(3)


def _legs(n):
    kh = RNG.normal(size=(n, 3))
    kh /= np.linalg.norm(kh, axis=1, keepdims=True)
    return Leg(RNG.uniform(0.05, 0.95, n), kh, polarization_vectors(kh)[:, 0])


def _X(n):
    X0 = RNG.uniform(0.0, 1.0, n)
    v = RNG.normal(size=(n, 3))
    v *= (X0 * RNG.uniform(0, 1, n) / np.linalg.norm(v, axis=1))[:, None]
    return np.column_stack([X0, v])


def test_vacuum_A2_sharp():
    assert vacuum_A2() == pytest.approx(4 * math.pi, rel=1e-10)


def test_vacuum_A2_matches_loop_quadrature():
    from wickrg.formfactor import eval_kappa
    from wickrg.quadrature import QuadratureRule

    ff = FormFactor(0.0, profile="smooth")
    rule = QuadratureRule.build(16, 3, breaks=ff.breakpoints)
    loop = 2 * integrate_photon_loop(lambda k, h: eval_kappa(ff, k) ** 2, rule=rule)
    assert vacuum_A2(ff) == pytest.approx(loop, rel=1e-10)


def test_wick_constant():
    assert wick_constant(0.2, 0.1) == pytest.approx(0.02 + 0.005 * 4 * math.pi, rel=1e-12)


def test_free_normal_form():
    w = wick_normal_form(0.2, 0.0)
    assert w.w == {} and w.scale == -1
    X = _X(50)
    ref = X[:, 0] - 0.2 * X[:, 3] + 0.5 * np.sum(X[:, 1:] ** 2, axis=1)
    assert np.allclose(w.T.full(X), ref, atol=1e-15)


def test_degree_one_kernel_at_zero_momentum():
    g = 0.07
    w = wick_normal_form(0.0, g)
    X, leg = _X(40), _legs(40)
    ref = g * np.sum(X[:, 1:] * leg.eps, axis=1)
    assert np.allclose(w.kernel(1, 0).evaluate(X, [leg]), ref, atol=1e-15)
    X[:, 1:] = 0.0
    assert np.all(w.kernel(1, 0).evaluate(X, [leg]) == 0.0)


def test_kernels_at_positive_momentum():
    g, p = 0.07, 0.2
    w = wick_normal_form(p, g)
    X, a, b = _X(30), _legs(30), _legs(30)
    pv = np.array([0.0, 0.0, p])
    ref10 = -g * np.sum((pv - X[:, 1:]) * a.eps, axis=1)
    assert np.allclose(w.kernel(1, 0).evaluate(X, [a]), ref10, atol=1e-14)
    ee = np.sum(a.eps * b.eps, axis=1)
    assert np.allclose(w.kernel(1, 1).evaluate(X, [a, b]), g * g * ee, atol=1e-15)
    assert np.allclose(w.kernel(2, 0).evaluate(X, [a, b]), 0.5 * g * g * ee, atol=1e-15)


def test_kinetic_T_taylor():
    g, H = kinetic_T(0.2).taylor()
    assert np.allclose(g, [0.0, 0.0, 0.0, -0.2], atol=1e-10)
    assert np.allclose(H, np.diag([0.0, 1.0, 1.0, 1.0]), atol=1e-6)


def test_infrared_integral_finite():
    # int d^3k kappa^2 / |k|^2 = 4 pi int kappa^2 dk
    from wickrg.quadrature import radial_rule

    q, w = radial_rule(16, weight_q=False)
    val = 4 * math.pi * np.sum(w)
    assert np.isfinite(val) and val == pytest.approx(4 * math.pi, rel=1e-10)


def test_first_decimation_free():
    cfg = FlowConfig(g=0.0, rho=0.25)
    fam, rep = first_decimation(0.0, 0.0, 0.0, cfg)
    assert fam.w == {} and fam.E == 0.0 and fam.scale == 0
    ref = free_comparison_T(0.0, 0.5)
    assert norm_T(fam.T, 1.0, SupLattice(level=1, n_X0=5, n_r=2), reference=ref) < 1e-12


def test_first_decimation_spectral_parameter(decimated):
    _, fam, _ = decimated
    assert abs(fam.dE - 1.0) < 0.5


def test_first_decimation_satisfies_unit_sum_rules(decimated):
    _, fam, rep = decimated
    sr = check_sum_rules(fam, 1.0)
    assert sr.max_residual <= rep.budget.total()
    assert sr.mu_leading == pytest.approx(1.0, rel=0.02)


def test_initial_parameters_are_order_g():
    lat = SupLattice(level=1, n_X0=3, n_r=2)
    eps, delta = [], []
    for g in (1e-2, 1e-3):
        cfg = FlowConfig(g=g, rho=0.25, pairs_window=(1, 1, 0))
        fam, _ = first_decimation(0.0, g, 0.0, cfg)
        eps.append(sum(fam.xi ** -sum(d) * norm_sigma(k, lat) for d, k in fam.all_kernels().items()) / g)
        delta.append(norm_T(fam.T, 1.0, lat, reference=free_comparison_T(0.0, 0.5)) / g)
    assert eps[1] <= 1.5 * eps[0] and eps[1] > 0
    assert delta[1] <= 1.5 * delta[0]

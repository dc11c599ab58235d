from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wickrg.formfactor import FormFactor, eval_kappa
from wickrg.quadrature import (
    QuadratureRule,
    ToleranceNotMet,
    angular_rule,
    integrate_photon_loop,
    photon_modes,
    polarization_sum,
    polarization_vectors,
    radial_rule,
)

unit = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 0.1)


def test_polarization_sum_axes():
    z = np.array([0.0, 0.0, 1.0])
    assert polarization_sum(z, 2, 2) == 0.0
    assert polarization_sum(z, 0, 0) == 1.0


@given(unit)
def test_polarization_vectors_transverse_and_complete(v):
    khat = np.asarray(v) / np.linalg.norm(v)
    eps = polarization_vectors(khat)
    assert np.allclose(eps @ eps.T, np.eye(2), atol=1e-13)
    assert np.allclose(eps @ khat, 0.0, atol=1e-13)
    P = eps.T @ eps
    assert np.allclose(P, [[polarization_sum(khat, i, j) for j in range(3)] for i in range(3)], atol=1e-13)
    assert np.trace(P) == pytest.approx(2.0)


def test_unit_integrand_gives_two_pi():
    assert integrate_photon_loop(lambda k, h: np.ones_like(k)) == pytest.approx(2 * math.pi, rel=1e-13)


def test_sharp_kappa_squared_gives_two_pi():
    ff = FormFactor()
    val = integrate_photon_loop(lambda k, h: eval_kappa(ff, k) ** 2)
    assert val == pytest.approx(2 * math.pi, rel=1e-12)


def test_vacuum_A2_of_modes():
    # sum over both polarizations of int d^3k kappa^2 / |k| = 4 pi
    m = photon_modes(QuadratureRule.build(16, 5))
    ff = FormFactor()
    assert np.sum(m.weight * eval_kappa(ff, m.kmag) ** 2 / m.kmag) == pytest.approx(4 * math.pi, rel=1e-10)


@pytest.mark.parametrize("n", [4, 9, 16])
def test_radial_exactness_on_monomials(n):
    q, w = radial_rule(n)
    for m in range(2 * n):
        assert np.sum(w * q**m) == pytest.approx(1.0 / (m + 2), rel=1e-12)


def test_angular_rule_integrates_harmonics():
    d, w = angular_rule(7)
    assert np.sum(w) == pytest.approx(4 * math.pi)
    assert np.sum(w * d[:, 2] ** 2) == pytest.approx(4 * math.pi / 3)
    assert abs(np.sum(w * d[:, 0] * d[:, 1] * d[:, 2])) < 1e-13


def test_refinement_error_decreases():
    f = lambda k, h: np.exp(-k) * (1 + h[..., 2] ** 2)  # noqa: E731
    rule = QuadratureRule.build(3, 3)
    exact = integrate_photon_loop(f, rule=QuadratureRule.build(40, 9))
    e1 = abs(integrate_photon_loop(f, rule=rule) - exact)
    e2 = abs(integrate_photon_loop(f, rule=rule.refined()) - exact)
    assert e2 < e1


def test_check_raises_when_tolerance_missed():
    rule = QuadratureRule.build(2, 1, tol=1e-14)
    with pytest.raises(ToleranceNotMet):
        integrate_photon_loop(lambda k, h: np.sin(7 * k) + h[..., 0] ** 4, rule=rule, check=True)


def test_two_leg_loop_factorizes():
    rule = QuadratureRule.build(6, 3)
    one = integrate_photon_loop(lambda k, h: k**2, rule=rule)
    two = integrate_photon_loop(lambda k1, h1, k2, h2: k1**2 * k2**2, legs=2, rule=rule)
    assert two == pytest.approx(one**2, rel=1e-12)

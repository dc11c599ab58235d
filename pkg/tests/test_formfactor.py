from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wickrg.formfactor import (
    CutoffProfile,
    FormFactor,
    eval_chi,
    eval_chibar,
    eval_kappa,
    eval_kappa_primitive,
    eval_theta,
    smoothstep,
)

PROFILE = CutoffProfile()


def test_chi_plateau_and_tail():
    assert eval_chi(PROFILE, 1.0, 0.5) == 1.0
    assert eval_chi(PROFILE, 1.0, 1.2) == 0.0


def test_chi_scaling_against_direct_quintic():
    # chi_{1/2}(1/2) = chi_1(1): the quintic gives Theta(1) = 0 exactly, so probe just inside
    x = 0.5 * (1 - 1e-3)
    t = (2 * x - 0.75) / 0.25
    theta = 1 - (6 * t**5 - 15 * t**4 + 10 * t**3)
    ref = np.sin(np.pi * theta / 2)
    val = eval_chi(PROFILE, 0.5, x)
    assert 0 < val < 1
    assert val == pytest.approx(ref, rel=1e-12)
    assert val == pytest.approx(eval_chi(PROFILE, 1.0, 2 * x), rel=1e-14)


def test_smoothstep_is_quintic_at_order_two():
    t = np.linspace(0, 1, 11)
    assert np.allclose(smoothstep(t, 2), 6 * t**5 - 15 * t**4 + 10 * t**3, atol=1e-14)
    assert np.allclose(smoothstep(t, 2, 1), 30 * t**4 - 60 * t**3 + 30 * t**2, atol=1e-12)


@given(st.floats(0.0, 3.0), st.sampled_from([1.0, 0.5, 0.25, 0.125]))
def test_partition_of_unity(x, rho):
    c, cb = eval_chi(PROFILE, rho, x), eval_chibar(PROFILE, rho, x)
    assert abs(c**2 + cb**2 - 1) <= 1e-14


@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_theta_monotone(a, b):
    lo, hi = sorted((a, b))
    assert eval_theta(PROFILE, hi) <= eval_theta(PROFILE, lo)


@settings(max_examples=50)
@given(st.floats(0.0, 3.0), st.sampled_from([1.0, 0.5, 0.25]))
def test_chi_derivative_support(x, rho):
    d = eval_chi(PROFILE, rho, x, derivative=1)
    if x < 0.75 * rho or x > rho:
        assert d == 0.0


def test_theta_is_C2_at_the_junctions():
    for x in (0.75, 1.0):
        for k in (1, 2):
            assert abs(eval_theta(PROFILE, x, k)) < 1e-12


def test_kappa_sharp_values():
    ff = FormFactor()
    assert eval_kappa(ff, 0.3) == 1.0
    assert eval_kappa(ff, 1.5) == 0.0
    assert not ff.within_hypotheses


def test_kappa_smooth_normalization():
    ff = FormFactor(0.1, profile="smooth")
    x = 1e-6
    assert eval_kappa(ff, x) == pytest.approx(x**0.1, rel=1e-8)
    assert ff.within_hypotheses


def test_kappa_ratio_approaches_one_monotonically():
    ff = FormFactor(0.1, profile="smooth")
    xs = np.logspace(-1, -2, 8)
    dev = np.abs(eval_kappa(ff, xs) / xs**0.1 - 1)
    assert np.all(np.diff(dev) <= 0)


def test_kappa_norm_bounds():
    ff = FormFactor(0.1, profile="smooth")
    x = np.linspace(1e-6, 1.0, 20001)
    k = eval_kappa(ff, x)
    prim = eval_kappa_primitive(ff, x, derivative=1)
    total = np.max(np.abs(k / x**0.1)) + np.max(np.abs(x * prim))
    assert 0 < total < 10


def test_step_profile():
    p = CutoffProfile.step()
    assert p.is_step
    assert eval_theta(p, 0.999) == 1.0 and eval_theta(p, 1.0) == 0.0


def test_invalid_arguments():
    with pytest.raises(ValueError):
        FormFactor(-0.1)
    with pytest.raises(ValueError):
        CutoffProfile(1.0, 0.5)
    with pytest.raises(ValueError):
        eval_chi(PROFILE, 0.0, 0.5)

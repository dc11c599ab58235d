from __future__ import annotations

import math

import numpy as np
import pytest

from wickrg.formfactor import FormFactor
from wickrg.initcond import wick_normal_form
from wickrg.sumrules import SumRuleReport, check_sum_rules, default_directions, marginal_cancellation_probe


@pytest.fixture(scope="module")
def w_p0():
    return wick_normal_form(0.0, 0.05, 0.0, FormFactor(0.1))


@pytest.fixture(scope="module")
def w_p2():
    return wick_normal_form(0.2, 0.05, 0.0, FormFactor(0.1))


def test_default_directions_are_unit():
    for n in default_directions():
        assert np.linalg.norm(n) == pytest.approx(1.0)


@pytest.mark.parametrize("name", ["w_p0", "w_p2"])
def test_wick_normal_form_obeys_rules_exactly(name, request):
    w = request.getfixturevalue(name)
    rep = check_sum_rules(w, 1.0)
    assert rep.max_residual < 1e-12
    assert rep.mu_leading == pytest.approx(1.0, rel=1e-12)
    assert rep.scale["00->10"] > 0


def test_wrong_strength_leaves_residual(w_p2):
    rep = check_sum_rules(w_p2, 0.5)
    # half the T derivative is missing: residual is half the larger side
    assert rep.residuals["00->10"] == pytest.approx(0.5 * rep.scale["00->10"], rel=1e-10)


def test_free_family_vacuous():
    w = wick_normal_form(0.2, 0.0, 0.0, FormFactor(0.1))
    rep = check_sum_rules(w, 1.0)
    assert rep.max_residual == 0.0
    assert all(math.isnan(v) for k, v in rep.mu_fit.items() if k != "00->10")


def test_report_serializes(w_p0):
    d = check_sum_rules(w_p0).as_dict()
    assert set(d) == {"mu", "residuals", "scale", "mu_fit", "max_residual"}
    assert isinstance(SumRuleReport(1.0).max_residual, float)


def test_marginal_probe_zero_at_rest(w_p0):
    assert marginal_cancellation_probe(w_p0) == pytest.approx(0.0, abs=1e-14)


def test_marginal_probe_at_momentum(w_p2):
    # the soft limit of w_10 at X = 0 is g <p, eps>, largest for eps along p
    assert marginal_cancellation_probe(w_p2) == pytest.approx(0.05 * 0.2, rel=1e-10)


def test_marginal_probe_direction_along_p(w_p2):
    # photons along p have polarizations orthogonal to it
    assert marginal_cancellation_probe(w_p2, [np.array([0.0, 0.0, 1.0])]) == pytest.approx(0.0, abs=1e-14)


def test_first_decimation_within_budget(decimated):
    cfg, fam, rep = decimated
    sr = check_sum_rules(fam, 1.0, g=cfg.g)
    assert sr.max_residual <= rep.budget.total()
    assert sr.mu_leading == pytest.approx(1.0, rel=0.02)

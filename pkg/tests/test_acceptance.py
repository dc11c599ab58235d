"""Acceptance criteria A1-A9, one test each.

Each test prints a single ``A<n> PASS|FAIL`` line with its key numbers.  The
flows shared between criteria are computed once per module.
"""
from __future__ import annotations

import pytest

from wickrg.acceptance import CRITERIA, AcceptanceSettings, run_acceptance

SETTINGS = AcceptanceSettings()


@pytest.fixture(scope="module")
def cache():
    return {}


@pytest.mark.slow
@pytest.mark.parametrize("criterion", list(CRITERIA))
def test_criterion(criterion, cache, capsys):
    (v,) = run_acceptance([criterion], SETTINGS, cache)
    with capsys.disabled():
        print("\n" + v.line(), flush=True)
    assert v.passed, v.summary

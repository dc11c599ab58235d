from __future__ import annotations

import pytest

from wickrg.config import DEFAULTS, RunConfig, load_config


def test_defaults_round_trip(tmp_path):
    cfg = load_config()
    assert cfg.data == DEFAULTS
    f = tmp_path / "c.yaml"
    f.write_text("model:\n  g: 0.02\nflow:\n  N_scales: 2\n")
    c2 = load_config(str(f))
    assert c2.data["model"]["g"] == 0.02
    assert c2.data["model"]["p"] == 0.0
    assert c2.N_scales == 2


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown config key model.gg"):
        RunConfig.from_yaml("model: {gg: 1}")


def test_section_must_be_mapping():
    with pytest.raises(ValueError):
        RunConfig.from_yaml("flow: 3")


def test_rho_above_half_rejected():
    with pytest.raises(ValueError):
        RunConfig.from_yaml("flow: {rho: 0.6}")


def test_rho_from_g_rho():
    cfg = RunConfig.from_yaml("model: {g: 0.001}\nflow: {rho_from_g: true}")
    assert cfg.flow_config().rho == pytest.approx(0.1)
    cfg = RunConfig.from_yaml("model: {g: 0.5}\nflow: {rho_from_g: true}")
    assert cfg.flow_config().rho == 0.5


def test_hash_depends_on_content_only():
    a = RunConfig.from_yaml("model: {g: 0.02}\nseed: 3")
    b = RunConfig.from_yaml("seed: 3\nmodel: {g: 0.02}")
    assert a.hash == b.hash
    assert a.hash != a.override(seed=4).hash
    assert len(a.hash) == 16


def test_flow_config_fields():
    fc = RunConfig.from_yaml("model: {g: 0.02, p: 0.1, sigma: 0.05}\nflow: {pairs_window: [1, 1, 0]}").flow_config()
    assert (fc.g, fc.p, fc.sigma) == (0.02, 0.1, 0.05)
    assert fc.pairs_window == (1, 1, 0)
    assert fc.formfactor.sigma == 0.05

from __future__ import annotations

import json

import pytest

from wickrg.cli import build_parser, main


@pytest.fixture
def free_config(tmp_path):
    f = tmp_path / "free.yaml"
    f.write_text("model: {g: 0.0}\nflow: {N_scales: 1, pairs_window: [1, 1, 0]}\nseed: 7\n")
    return str(f)


def test_parser_lists_subcommands():
    ap = build_parser()
    for cmd in ("flow", "oracle", "accept", "sumrules", "constants"):
        assert ap.parse_args([cmd]).command == cmd


def test_constants(tmp_path, capsys):
    assert main(["constants", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "constants.json").read_text())
    assert rep["seam_residual"] < 1e-8
    assert rep["tilde_c2"] == pytest.approx(0.8109302162163288, rel=1e-12)


def test_flow_free_outputs_are_reproducible(tmp_path, free_config):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["flow", "--config", free_config, "--out", str(out)]) == 0
        outs.append({f: (out / f).read_bytes() for f in ("records.jsonl", "series.csv", "report.json")})
    assert outs[0] == outs[1]
    rep = json.loads(outs[0]["report.json"])
    assert rep["E"] == 0.0
    assert rep["m_ren_star"] == 1.0
    assert rep["seed"] == 7
    lines = outs[0]["records.jsonl"].decode().splitlines()
    assert len(lines) == 3
    assert all(json.loads(s)["config_hash"] == rep["config_hash"] for s in lines)


def test_sumrules_free(tmp_path, free_config):
    assert main(["sumrules", "--config", free_config, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "sumrules.json").read_text())
    assert all(r["max_residual"] == 0.0 for r in rep["per_scale"])


def test_accept_single_criterion(tmp_path, capsys):
    assert main(["accept", "--only", "A1", "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.startswith("A1 PASS")
    rep = json.loads((tmp_path / "acceptance.json").read_text())
    assert rep["verdicts"][0]["criterion"] == "A1"
    assert rep["verdicts"][0]["seconds"] is None


def test_oracle_small(tmp_path):
    code = main(["oracle", "--radial-n", "3", "--nmax", "2", "--g", "0.05", "--p", "0.1", "--out", str(tmp_path)])
    assert code == 0
    rep = json.loads((tmp_path / "oracle.json").read_text())
    assert rep["derivative_bound"] is True
    assert rep["E0"] == pytest.approx(rep["second_order"], abs=1e-5)


def test_bad_config_exit_code(tmp_path, capsys):
    f = tmp_path / "bad.yaml"
    f.write_text("model: {nope: 1}\n")
    assert main(["constants", "--config", str(f), "--out", str(tmp_path)]) == 2
    assert "unknown config key" in capsys.readouterr().err

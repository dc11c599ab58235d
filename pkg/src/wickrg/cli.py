"""Command line front end.

Subcommands::

    wickrg flow       energy chain and mass for one configuration
    wickrg oracle     exact diagonalization of the discretized model
    wickrg accept     acceptance criteria A1-A9 (``--only A1,A4``)
    wickrg sumrules   sum-rule residuals along a flow
    wickrg constants  leading mass constants and the two-scale identity

Every subcommand accepts ``--config``, ``--out`` and ``--seed`` and exits
with status 0 iff all checks it ran passed.  Outputs carry the config hash
and seed but no timestamps, so identical inputs give identical files.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from .config import load_config

__all__ = ["main", "build_parser"]


def _dump(obj) -> str:
    from .spectral import _jsonable

    return json.dumps(_jsonable(obj), sort_keys=True, allow_nan=True)


def _write(out, name, text):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def _outdir(args, cfg):
    return args.out or cfg.data["output"]["dir"]


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.override(seed=int(args.seed))
    np.random.seed(cfg.seed)
    return cfg


# ---------------------------------------------------------------------------


def cmd_flow(args) -> int:
    from .spectral import accumulate_mass, ground_energy, solve_energy_chain

    cfg = _load(args)
    fc = cfg.flow_config()
    N = cfg.N_scales
    chain = solve_energy_chain(fc, N)
    E, err = ground_energy(None, chain)
    run = chain.run
    m_star = m_err = None
    if fc.p == 0:
        m_star, m_err, _ = accumulate_mass(fc, N, run=run)
    out = _outdir(args, cfg)
    lines = [_dump(dict(config_hash=cfg.hash, seed=cfg.seed, **r.as_dict())) for r in run.records]
    _write(out, "records.jsonl", "\n".join(lines) + "\n")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "series.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n", "dgamma1", "dgamma2", "eps", "budget"])
        for r in run.records:
            wr.writerow([r.scale, repr(r.dgamma1), repr(r.dgamma2), repr(r.eps), repr(r.budget.get("total", math.nan))])
    cons = float(np.max(chain.consistency, initial=0.0))
    report = dict(E=E, m_ren_star=m_star, error=dict(E=err, m_ren_star=m_err), config_hash=cfg.hash, seed=cfg.seed,
                  chain=chain.as_dict(), per_scale=[r.as_dict() for r in run.records])
    _write(out, "report.json", _dump(report) + "\n")
    ok = cons <= 1e-10 and np.isfinite(E)
    print(f"E = {E:.12g} +- {err:.2g}" + (f"   m* = {m_star:.12g} +- {m_err:.2g}" if m_star is not None else ""))
    print(f"chain consistency {cons:.2e}; outputs in {out}")
    return 0 if ok else 1


def cmd_oracle(args) -> int:
    from .fockoracle import DiscretizedModes, FiberModel, diagonalize, build_hamiltonian, mass_by_finite_difference
    from .fockoracle import second_order_energy
    from .spectral import apriori_energy_derivative_bound

    cfg = _load(args)
    o, m = cfg.data["oracle"], cfg.data["model"]
    radial = args.radial_n if args.radial_n is not None else int(o["radial_n"])
    nmax = args.nmax if args.nmax is not None else int(o["nmax"])
    g = args.g if args.g is not None else float(m["g"])
    p = args.p if args.p is not None else float(m["p"])
    sigma = args.sigma if args.sigma is not None else float(m["sigma"])
    ff = cfg.override(model={"sigma": sigma}).formfactor()
    d = DiscretizedModes.from_rule(radial_n=radial, angular=o["angular"], nmax_photons=nmax, uv_cutoff=ff.uv_cutoff)
    fm = FiberModel(p, sigma, g, ff)
    E0, _, gap = diagonalize(build_hamiltonian(fm, d))
    rep = dict(E0=E0, gap=gap, second_order=second_order_energy(fm, d), n_modes=len(d.modes), nmax=nmax, g=g, p=p,
               sigma=sigma, config_hash=cfg.hash, seed=cfg.seed)
    ok = True
    if p == 0 and g > 0:
        inv, _ = mass_by_finite_difference(fm, d, h=float(o["h"]))
        rep["inverse_mass"] = inv
        ok &= inv < 1
    if p > 0:
        h = 1e-3
        Ep = diagonalize(build_hamiltonian(fm.with_p(p + h), d))[0]
        Em = diagonalize(build_hamiltonian(fm.with_p(p - h), d))[0]
        dE = (Ep - Em) / (2 * h)
        rep["dE_dp"] = dE
        rep["derivative_bound"] = apriori_energy_derivative_bound(E0, dE)
        ok &= rep["derivative_bound"]
    _write(_outdir(args, cfg), "oracle.json", _dump(rep) + "\n")
    print(_dump(rep))
    return 0 if ok else 1


def cmd_accept(args) -> int:
    from .acceptance import AcceptanceSettings, run_acceptance

    cfg = _load(args)
    only = [s for s in args.only.split(",") if s] if args.only else None
    verdicts = run_acceptance(only, AcceptanceSettings(seed=cfg.seed))
    for v in verdicts:
        print(v.line(), flush=True)
    rep = dict(config_hash=cfg.hash, seed=cfg.seed, verdicts=[dict(v.as_dict(), seconds=None) for v in verdicts])
    _write(_outdir(args, cfg), "acceptance.json", _dump(rep) + "\n")
    return 0 if all(v.passed for v in verdicts) else 1


def cmd_sumrules(args) -> int:
    from .acceptance import _carried_budget
    from .spectral import run_flow
    from .sumrules import check_sum_rules

    cfg = _load(args)
    fc = cfg.flow_config()

    def sr(fam):
        mu = fc.rho ** (max(fam.scale, 0) * fc.sigma)
        return check_sum_rules(fam, mu, g=fc.g).as_dict()

    run = run_flow(fc, cfg.N_scales, sum_rules=sr)
    rows, ok, budget = [], True, 0.0
    for i, rec in enumerate(run.records):
        if i == 0:
            bound = 1e-12
        else:
            budget = _carried_budget(budget, run.records[i - 1], rec)
            bound = budget
        res = rec.sum_rules["max_residual"]
        ok &= res <= bound
        rows.append(dict(rec.sum_rules, n=rec.scale, bound=bound))
        print(f"scale {rec.scale:3d}  residual {res:.3e}  bound {bound:.3e}  mu_fit {rec.sum_rules['mu_fit'].get('00->10')}")
    _write(_outdir(args, cfg), "sumrules.json", _dump(dict(config_hash=cfg.hash, seed=cfg.seed, per_scale=rows)) + "\n")
    return 0 if ok else 1


def cmd_constants(args) -> int:
    from .spectral import leading_constants

    cfg = _load(args)
    fc = cfg.flow_config()
    lc = leading_constants(fc)
    rep = dict(C_minus1=lc.C_minus1, C_0=lc.C_0, seam=lc.seam, seam_residual=lc.seam_residual, tilde_c2=lc.tilde_c2,
               K=lc.K, rho=lc.rho, mass_coefficient=8 * math.pi / 3 * lc.tilde_c2, config_hash=cfg.hash, seed=cfg.seed)
    _write(_outdir(args, cfg), "constants.json", _dump(rep) + "\n")
    print(_dump(rep))
    return 0 if lc.seam_residual <= 1e-8 else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wickrg", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--out", help="output directory (default from config)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--only", help="comma-separated criteria, e.g. A1,A4 (accept only)")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn, hlp in (("flow", cmd_flow, "energy chain, mass and per-scale records"),
                          ("oracle", cmd_oracle, "exact diagonalization of the discretized model"),
                          ("accept", cmd_accept, "acceptance criteria"),
                          ("sumrules", cmd_sumrules, "sum-rule residuals along a flow"),
                          ("constants", cmd_constants, "leading mass constants")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.set_defaults(func=fn)
        if name == "oracle":
            p.add_argument("--radial-n", type=int, help="radial nodes")
            p.add_argument("--nmax", type=int, help="largest photon number")
            p.add_argument("--g", type=float)
            p.add_argument("--p", type=float)
            p.add_argument("--sigma", type=float)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except (ValueError, KeyError) as exc:
        print(f"wickrg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance criteria A1-A9 as functions returning verdicts.

Each ``check_A*`` takes an :class:`AcceptanceSettings` and a cache dict that
lets criteria share flows (A4 and A5 use the same runs).  Verdicts carry the
measured numbers so that failures can be read without rerunning.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .fockoracle import (
    DiscretizedModes,
    FiberModel,
    energy_derivative,
    feshbach_identity_suite,
    ground_energy_at,
    mass_by_finite_difference,
)
from .formfactor import FormFactor
from .kernelspace import SupLattice, norm_T
from .spectral import (
    accumulate_mass,
    apriori_energy_derivative_bound,
    ground_energy,
    leading_constants,
    matched_modes,
    run_flow,
    solve_energy_chain,
    tilde_c2,
)
from .sumrules import check_sum_rules
from .wickflow import FlowConfig, free_comparison_T

__all__ = ["Verdict", "AcceptanceSettings", "CRITERIA", "run_acceptance", "flow_config"]


@dataclass
class Verdict:
    criterion: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{self.criterion} {'PASS' if self.passed else 'FAIL'}  {self.summary}  ({self.seconds:.1f} s)"

    def as_dict(self) -> dict:
        return dict(criterion=self.criterion, passed=self.passed, summary=self.summary, details=self.details,
                    seconds=self.seconds)


@dataclass
class AcceptanceSettings:
    """Sizes of the acceptance runs."""

    a3_couplings: tuple = (1e-2, 3e-3, 1e-3)
    a3_max_scales: int = 8
    a3_rel_tol: float = 0.10
    a4_g: float = 0.05
    a4_rho: float = 0.25
    a4_sigmas: tuple = (0.0, 0.05, 0.1)
    a4_p: float = 0.2
    a4_steps: int = 6
    a4_sigma_spread: float = 0.25
    a5_mu_tol: float = 0.02
    a6_g: float = 0.02
    a6_rho: float = 0.25
    a6_scales: int = 3
    a6_tol: float = 1e-10
    a7_couplings: tuple = (0.05, 0.02)
    a7_rho: float = 0.25
    a7_scales: int = 3
    a7_radial_n: int = 12
    a7_mass_scales: int = 8
    a8_instances: int = 100
    a9_steps: int = 10
    a9_ps: tuple = (0.0, 0.2)
    a9_tol: float = 1e-10
    seed: int = 0


def flow_config(g, p=0.0, sigma=0.0, rho=0.25, window=(1, 1, 0), **kw) -> FlowConfig:
    """Flow configuration with a sharp form factor carrying the same ``sigma``."""
    return FlowConfig(rho=rho, g=g, p=p, sigma=sigma, formfactor=FormFactor(sigma), pairs_window=window, **kw)


# ---------------------------------------------------------------------------


def check_A1(s: AcceptanceSettings, cache: dict) -> Verdict:
    """Closed form of the leading mass constant."""
    c = tilde_c2(FormFactor())
    exact = 2 * math.log(1.5)
    rel = abs(c - exact) / exact
    cut = {}
    for lam in (0.5, 2.0, 4.0):
        v = 8 * math.pi / 3 * tilde_c2(FormFactor(uv_cutoff=lam))
        ref = 16 * math.pi / 3 * math.log(1 + lam / 2)
        cut[lam] = abs(v - ref) / ref
    ok = rel < 1e-10 and max(cut.values()) < 1e-10
    return Verdict("A1", ok, f"tilde_c2 = {c:.10f}, rel err {rel:.1e}; cutoff identity max rel {max(cut.values()):.1e}",
                   dict(tilde_c2=c, exact=exact, rel=rel, cutoff_rel=cut))


def check_A2(s: AcceptanceSettings, cache: dict) -> Verdict:
    """Two-scale identity and the O(rho) gap to tilde_c2."""
    out = {}
    for rho in (0.25, 0.125):
        lc = leading_constants(FlowConfig(rho=rho))
        out[rho] = dict(C_minus1=lc.C_minus1, C_0=lc.C_0, seam=lc.seam, seam_residual=lc.seam_residual, K=lc.K,
                        gap=lc.total - lc.tilde_c2)
    Ks = [v["K"] for v in out.values()]
    spread = abs(Ks[0] - Ks[1]) / max(Ks)
    seam = max(v["seam_residual"] for v in out.values())
    ok = seam < 1e-8 and spread < 0.1
    return Verdict("A2", ok, f"seam residual {seam:.1e}; K = {Ks[0]:.4f}, {Ks[1]:.4f} (spread {spread:.1%})",
                   dict(per_rho=out, K_spread=spread))


def check_A3(s: AcceptanceSettings, cache: dict) -> Verdict:
    """(m* - 1) / g**2 against (8 pi / 3) tilde_c2 with rho = g**(1/3)."""
    target = 8 * math.pi / 3 * tilde_c2()
    rows = {}
    for g in s.a3_couplings:
        cfg = flow_config(g, rho=min(0.5, g ** (1 / 3)))
        m, err, acc = accumulate_mass(cfg, s.a3_max_scales)
        ratio = (m - 1) / g**2
        rows[g] = dict(m_star=m, error=err, ratio=ratio, ratio_error=err / g**2, rel_dev=abs(ratio - target) / target,
                       scales=len(acc.scales) - 1, rho=cfg.rho)
    gs = sorted(rows, reverse=True)
    devs = [rows[g]["rel_dev"] for g in gs]
    positive = all(rows[g]["m_star"] > 1 for g in gs)
    shrinking = all(b <= a for a, b in zip(devs[:-1], devs[1:]))
    last = devs[-1]
    ok = positive and shrinking and last <= s.a3_rel_tol
    txt = ", ".join(f"g={g:g}: {rows[g]['ratio']:.3f}" for g in gs)
    return Verdict("A3", ok, f"(m*-1)/g^2 {txt}; target {target:.3f}; rel dev at smallest g {last:.1%}",
                   dict(target=target, rows=rows, positive=positive, shrinking=shrinking))


def _a4_flow(s, cache, p, sigma):
    key = ("a4", p, sigma)
    if key not in cache:
        cfg = flow_config(s.a4_g, p=p, sigma=sigma, rho=s.a4_rho)
        rho = cfg.rho

        def sr(fam):
            mu = rho ** (max(fam.scale, 0) * sigma)
            return check_sum_rules(fam, mu, g=s.a4_g).as_dict()

        cache[key] = run_flow(cfg, s.a4_steps, sum_rules=sr)
    return cache[key]


def check_A4(s: AcceptanceSettings, cache: dict) -> Verdict:
    """Contraction of the degree-one and -two kernels per step."""
    rho = s.a4_rho
    ratios = {}
    for sg in s.a4_sigmas:
        run = _a4_flow(s, cache, 0.0, sg)
        ratios[sg] = [r.contraction for r in run.records if r.scale >= 1]
    c4 = {sg: max(v) / rho for sg, v in ratios.items()}
    spread = (max(c4.values()) - min(c4.values())) / max(c4.values())
    c4_all = max(c4.values())
    run = _a4_flow(s, cache, s.a4_p, 0.1)
    rp = [r.contraction for r in run.records if r.scale >= 1]
    cp = max(rp) / rho**0.1
    ok = c4_all * rho < 1 and spread <= s.a4_sigma_spread and cp * rho**0.1 < 1
    return Verdict(
        "A4", ok,
        f"c4 per sigma {', '.join(f'{v:.3f}' for v in c4.values())} (spread {spread:.0%}), c4*rho = {c4_all * rho:.3f}; "
        f"p={s.a4_p}: c*rho^sigma = {cp * rho ** 0.1:.3f}",
        dict(ratios=ratios, c4=c4, spread=spread, p_ratios=rp, c_p=cp))


def _carried_budget(budget, prev, rec):
    """Truncation budget present at ``rec``: the new step's budget plus the older one contracted like the kernels."""
    kappa = rec.contraction if np.isfinite(rec.contraction) else 1.0
    return prev.budget.get("total", math.inf) + kappa * budget


def check_A5(s: AcceptanceSettings, cache: dict) -> Verdict:
    """Sum rules at scale -1, their residuals after each step and the strength transport."""
    from .initcond import wick_normal_form

    w = wick_normal_form(0.0, s.a4_g, 0.0, FormFactor(0.1))
    r0 = check_sum_rules(w, 1.0).max_residual
    rho = s.a4_rho
    rows, ok_res, ok_mu = {}, True, True
    for sg in (0.0, 0.1):
        run = _a4_flow(s, cache, 0.0, sg)
        per = []
        budget = 0.0
        for prev, rec in zip(run.records[:-1], run.records[1:]):
            sr = rec.sum_rules
            budget = _carried_budget(budget, prev, rec)
            mu_exp = rho ** (max(rec.scale, 0) * sg)
            mu_fit = sr["mu_fit"].get("00->10", math.nan)
            mu_dev = abs(mu_fit / mu_exp - 1)
            per.append(dict(scale=rec.scale, residual=sr["max_residual"], budget=budget, mu_fit=mu_fit, mu_expected=mu_exp,
                            mu_dev=mu_dev))
            ok_res &= sr["max_residual"] <= budget
            if sg > 0:
                ok_mu &= mu_dev <= s.a5_mu_tol
        rows[sg] = per
    ok = r0 < 1e-12 and ok_res and ok_mu
    worst = max(p["mu_dev"] for p in rows[0.1])
    return Verdict("A5", ok, f"scale -1 residual {r0:.1e}; residual <= budget: {ok_res}; worst mu deviation at sigma=0.1 {worst:.2%}",
                   dict(scale_minus1=r0, rows=rows))


def check_A6(s: AcceptanceSettings, cache: dict) -> Verdict:
    """Energy chain bounds, consistency and the free chain."""
    cfg = flow_config(s.a6_g, rho=s.a6_rho, window=(2, 1, 0))
    ch = solve_energy_chain(cfg, s.a6_scales)
    rec0 = ch.run.records[1]
    eps0 = max(abs(rec0.E - rec0.z), rec0.eps)
    bound_ok = all(abs(e) <= 2.0 ** (-n + 1) * eps0 for n, e in zip(range(-1, s.a6_scales + 1), ch.e_values) if n >= 0)
    cons = float(np.max(ch.consistency))
    free = solve_energy_chain(flow_config(0.0, rho=s.a6_rho), 2)
    zero = bool(np.all(free.e_values == 0.0))
    ok = bound_ok and cons <= s.a6_tol and zero
    return Verdict("A6", ok, f"|e_n| <= 2^(1-n) eps0: {bound_ok}; consistency {cons:.1e}; free chain zero: {zero}",
                   dict(e=ch.e_values.tolist(), eps0=eps0, consistency=ch.consistency.tolist(), passes=ch.passes,
                        gaps=[g.tolist() for g in ch.convergence_gaps], tail=ch.tail.tolist()))


def check_A7(s: AcceptanceSettings, cache: dict) -> Verdict:
    """Energy of the matched discretized model, mass sign and size, and the derivative bound."""
    d = DiscretizedModes.from_rule(radial_n=s.a7_radial_n)
    d1 = DiscretizedModes(d.modes, 1)
    ff = FormFactor()
    rows = {}
    ok = True
    for g in s.a7_couplings:
        m = FiberModel(0.0, 0.0, g, ff)
        E_or = ground_energy_at(m, d)
        E_or1 = ground_energy_at(m, d1)
        err_or = abs(E_or - E_or1)
        cfg = flow_config(g, rho=s.a7_rho, window=(2, 1, 0))
        ch = solve_energy_chain(cfg, s.a7_scales, modes=matched_modes(d.modes, cfg.rho))
        const = 0.5 * g * g * d.vacuum_A2(ff)
        E_rg, err_rg = ground_energy(m, ch, const=const)
        agree = abs(E_rg - E_or) <= err_rg + err_or
        inv_or, _ = mass_by_finite_difference(m, d)
        m_star, m_err, _ = accumulate_mass(flow_config(g, rho=s.a7_rho), s.a7_mass_scales)
        inv_rg = 1 / m_star
        ratio = (1 - inv_or) / (1 - inv_rg)
        mass_ok = inv_or < 1 and 0.5 <= ratio <= 2
        bound = {}
        for p in (0.0, 0.1):
            mp = FiberModel(p, 0.0, g, ff)
            E, dE = energy_derivative(mp, d)
            bound[p] = dict(E=E, dE=dE, holds=apriori_energy_derivative_bound(E, dE))
        b_ok = all(v["holds"] for v in bound.values())
        rows[g] = dict(E_rg=E_rg, err_rg=err_rg, E_oracle=E_or, err_oracle=err_or, diff=E_rg - E_or, agree=agree,
                       inv_mass_oracle=inv_or, inv_mass_flow=inv_rg, mass_ratio=ratio, mass_ok=mass_ok, bound=bound)
        ok &= agree and mass_ok and b_ok
    txt = "; ".join(f"g={g:g}: |dE|={abs(r['diff']):.1e} vs budget {r['err_rg'] + r['err_oracle']:.1e}, "
                    f"mass ratio {r['mass_ratio']:.2f}" for g, r in rows.items())
    return Verdict("A7", ok, txt, dict(rows=rows))


def check_A8(s: AcceptanceSettings, cache: dict) -> Verdict:
    rep = feshbach_identity_suite(s.seed, n_instances=s.a8_instances)
    worst = max(rep["max_residual"].values()) if isinstance(rep.get("max_residual"), dict) else rep.get("max_residual")
    return Verdict("A8", bool(rep["passed"]), f"{s.a8_instances} instances, worst residual {worst:.1e}", dict(report=rep))


def check_A9(s: AcceptanceSettings, cache: dict) -> Verdict:
    """The free flow is the free comparison family with lambda -> rho lambda."""
    lat = SupLattice(level=1, n_X0=5, n_r=2)
    rows, ok = {}, True
    for p in s.a9_ps:
        cfg = flow_config(0.0, p=p)
        run = run_flow(cfg, s.a9_steps)
        fams = [f for f in run.families if f.scale >= 0]
        w1_zero = all(not f.w for f in fams)
        dist = [float(norm_T(f.T, 1.0, lat, reference=free_comparison_T(p, 0.5 * cfg.rho**f.scale, 0.0, cfg.profile)))
                for f in fams]
        lam = [r.lam for r in run.records if r.scale >= 0]
        ratios = [b / a for a, b in zip(lam[:-1], lam[1:])]
        rdev = max(abs(r / cfg.rho - 1) for r in ratios)
        rows[p] = dict(w1_zero=w1_zero, max_distance=max(dist), lam=lam, ratio_dev=rdev)
        ok &= w1_zero and max(dist) <= s.a9_tol and rdev <= 1e-8
    txt = "; ".join(f"p={p}: dist {r['max_distance']:.1e}, lambda ratio dev {r['ratio_dev']:.1e}" for p, r in rows.items())
    return Verdict("A9", ok, txt, dict(rows=rows))


CRITERIA = {f"A{i}": f for i, f in enumerate(
    (check_A1, check_A2, check_A3, check_A4, check_A5, check_A6, check_A7, check_A8, check_A9), start=1)}


def run_acceptance(only=None, settings: AcceptanceSettings | None = None, cache: dict | None = None):
    """Run the selected criteria (all by default) and return their verdicts in order."""
    settings = settings or AcceptanceSettings()
    cache = {} if cache is None else cache
    names = list(CRITERIA) if not only else [n.strip().upper() for n in only]
    out = []
    for n in names:
        if n not in CRITERIA:
            raise KeyError(f"unknown criterion {n}")
        t = time.time()
        v = CRITERIA[n](settings, cache)
        v.seconds = time.time() - t
        out.append(v)
    return out

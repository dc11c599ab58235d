"""Spectral-parameter chain, ground-state energy, mass and leading-order constants.

A flow is a sequence of families ``w_(n)`` built at spectral parameters
``z_n``; the constant part ``E_n`` of each family is known at ``z_n`` together
with its derivative ``a_n = dE_n/dz``.  The ground state corresponds to the
chain ``e_n`` with

    rho * e_(n+1) = E_n(e_n),        E_N(e_N) = 0,

and the ground-state energy is ``const - e_(-1)`` (the scale ``-1`` family is
``H - const + z``).  The chain is solved by repeated forward flows and a
backward Newton sweep through the linearized maps ``E_n``.

The inverse effective mass is the limit of ``rho**-n B_n / A_n`` where
``A_n`` and ``B_n`` are the ``X0`` slope and the ``X_par`` curvature of ``T``
at scale ``n``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.integrate import quad

from .formfactor import FormFactor, eval_chibar_sq, eval_kappa
from .initcond import wick_normal_form
from .kernelspace import SupLattice, norm_T
from .wickflow import FlowConfig, ModeSet, Stage, _kernel_sizes, free_comparison_T, renormalize

__all__ = [
    "RootFindFailure",
    "NegativeDenominator",
    "FlowRecord",
    "FlowRun",
    "EnergyChain",
    "MassAccumulator",
    "LeadingConstants",
    "run_flow",
    "solve_energy_chain",
    "ground_energy",
    "accumulate_mass",
    "tilde_c2",
    "leading_constants",
    "apriori_energy_derivative_bound",
    "matched_modes",
]


class RootFindFailure(RuntimeError):
    """The chain left the admissible disk ``|e| < 1/10``."""


class NegativeDenominator(RuntimeError):
    """The ``X0`` slope of ``T`` became non-positive: the flow left its domain."""


# ---------------------------------------------------------------------------
# closed forms


def _quad(f, a, b, pts=()):
    pts = sorted(x for x in set(pts) if a < x < b)
    val, _ = quad(f, a, b, points=pts or None, limit=400, epsabs=1e-14, epsrel=1e-13)
    return val


def tilde_c2(ff: FormFactor = FormFactor()) -> float:
    """``int_0^inf kappa(x)**2 / (1 + x/2) dx`` for the ``sigma -> 0`` form factor.

    Examples
    --------
    >>> round(tilde_c2(), 7)
    0.8109302
    """
    ff0 = ff.limit()
    return _quad(lambda x: float(eval_kappa(ff0, x)) ** 2 / (1 + 0.5 * x), 0.0, ff0.uv_cutoff, ff0.breakpoints)


@dataclass(frozen=True)
class LeadingConstants:
    """``C_minus1`` and ``C_0`` of the two-scale leading-order mass.

    Iterating yields ``(C_minus1, C_0)``.  ``seam`` is the one-integral form
    of their sum and ``tilde_c2`` the limiting constant.
    """

    C_minus1: float
    C_0: float
    seam: float
    tilde_c2: float
    rho: float

    def __iter__(self):
        return iter((self.C_minus1, self.C_0))

    @property
    def total(self) -> float:
        return self.C_minus1 + self.C_0

    @property
    def seam_residual(self) -> float:
        return abs(self.total - self.seam)

    @property
    def K(self) -> float:
        """``|C_minus1 + C_0 - tilde_c2| / rho``."""
        return abs(self.total - self.tilde_c2) / self.rho


def leading_constants(cfg: FlowConfig) -> LeadingConstants:
    """Leading-order constants of the first two decimations.

    With ``b1 = chibar_1**2``, ``br = chibar_rho**2``, ``c1 = chi_1**2``,
    ``u = 1 + x b1 / 2`` and ``s = (x/2) b1 / u``::

        C_minus1 = int kappa**2 b1 / u
        C_0      = int kappa**2 br c1 (1 - s)**2 / (1 + x c1 br / 2 - x**2 b1 c1 / (4 u))

    Their sum equals ``int kappa**2 br / (1 + x br / 2)`` (the ``seam``).
    """
    ff = cfg.formfactor.limit()
    prof, rho = cfg.profile, cfg.rho
    pts = tuple(ff.breakpoints) + (prof.transition_lo * rho, prof.transition_hi * rho,
                                   prof.transition_lo, prof.transition_hi)

    def k2(x):
        return float(eval_kappa(ff, x)) ** 2

    def b1(x):
        return float(eval_chibar_sq(prof, 1.0, x))

    def br(x):
        return float(eval_chibar_sq(prof, rho, x))

    def cm1(x):
        b = b1(x)
        return k2(x) * b / (1 + 0.5 * x * b)

    def c0(x):
        b, r = b1(x), br(x)
        c = 1.0 - b
        if r * c == 0.0:
            return 0.0
        u = 1 + 0.5 * x * b
        s = 0.5 * x * b / u
        den = 1 + 0.5 * x * c * r - 0.25 * x * x * b * c / u
        return k2(x) * r * c * (1 - s) ** 2 / den

    def seam(x):
        r = br(x)
        return k2(x) * r / (1 + 0.5 * x * r)

    hi = max(ff.uv_cutoff, prof.transition_hi)
    C_m1 = _quad(cm1, 0.0, hi, pts)
    C_0 = _quad(c0, 0.0, hi, pts)
    S = _quad(seam, 0.0, hi, pts)
    return LeadingConstants(C_m1, C_0, S, tilde_c2(ff), rho)


def apriori_energy_derivative_bound(E: float, dE: float, tol: float = 1e-12) -> bool:
    """``|dE/d|p|| <= sqrt(2 E)`` up to ``tol``."""
    return bool(abs(dE) <= math.sqrt(max(2.0 * E, 0.0)) + tol)


# ---------------------------------------------------------------------------
# flows


@dataclass
class FlowRecord:
    """Diagnostics of one scale.

    ``E`` and ``dE`` are the constant part and its ``z`` derivative at ``z``;
    ``A`` and ``B`` are ``d_X0 T`` and ``d^2_{X_par} T`` at 0; ``eps``,
    ``delta`` and ``lam`` locate the family in the polydisc; ``dgamma1`` and
    ``dgamma2`` belong to the step leaving this scale, as does ``budget``.
    """

    scale: int
    rho: float
    z: float
    E: float
    dE: float
    A: float
    B: float
    lam: float
    e: float = math.nan
    eps: float = math.nan
    delta: float = math.nan
    dgamma1: float = math.nan
    dgamma2: float = math.nan
    budget: dict = field(default_factory=dict)
    jet_budget: dict = field(default_factory=dict)
    kernel_sizes: dict = field(default_factory=dict)
    sum_rules: dict | None = None
    contraction: float = math.nan

    def as_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


@dataclass
class FlowRun:
    """Families ``w_(-1) .. w_(N)``, their records and the step reports between them.

    ``continued_at`` holds the spectral parameter at which each family was
    continued to the next scale (for the last one, the root of its ``E``).
    """

    cfg: FlowConfig
    families: list
    records: list
    reports: list
    const: float
    continued_at: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return len(self.families) - 2


_NORM_LATTICE = SupLattice(level=1, n_X0=5, n_r=2)


def _eps(sizes: dict, xi: float) -> float:
    """``sum xi**-(M+N) ||w_MN||`` over stored kernels, Hermitian partners counted twice."""
    return float(sum(xi ** -(int(k[0]) + int(k[1])) * v * (1 if k[0] == k[1] else 2) for k, v in sizes.items()))


def _record(fam, cfg: FlowConfig, rho: float, norms: bool) -> FlowRecord:
    g, H = fam.T.taylor()
    A = 1.0 + float(g[0])
    B = float(H[3, 3])
    rec = FlowRecord(scale=fam.scale, rho=rho, z=float(fam.z), E=float(fam.E), dE=float(fam.dE), A=A, B=B, lam=0.5 * B)
    if norms and fam.scale >= 0:
        ref = free_comparison_T(cfg.p, rec.lam, 0.0, cfg.profile)
        rec.delta = float(norm_T(fam.T, 1.0, _NORM_LATTICE, reference=ref))
    return rec


def matched_modes(pm, rho: float):
    """Mode sets for :func:`run_flow` that reuse one fixed photon discretization at every scale.

    Returns a function of the scale giving ``(fine, coarse)``; both are the
    discretization rescaled by ``rho**n`` (no rescaling for the first
    decimation and scale 0).
    """

    def modes(scale):
        f = 1.0 if scale <= 0 else rho**scale
        ms = ModeSet.from_photon_modes(pm, f, label=f"matched{scale}")
        return ms, ms

    return modes


def run_flow(cfg: FlowConfig, n_scales: int, zeta: float = 0.0, guesses=None, modes=None,
             norms: bool = False, sum_rules=None) -> FlowRun:
    """Flow from the Wick normal form down to scale ``n_scales``.

    Parameters
    ----------
    cfg : FlowConfig
    n_scales : int
        Last scale ``N``; families ``w_(-1) .. w_(N)`` are produced.
    zeta : float
        Spectral parameter of the scale ``-1`` family.
    guesses : sequence of float, optional
        Chain values ``e_0 .. e_(N-1)`` at which each family is continued.
        By default each family is continued at the root of its own
        linearized ``E_n`` (the greedy chain).
    modes : callable, optional
        ``modes(scale) -> (fine, coarse)`` internal mode sets.
    norms : bool
        Also compute the polydisc coordinates ``delta_n`` (slow at deep scales).
    sum_rules : callable, optional
        ``sum_rules(family) -> dict`` stored in each record.
    """
    w = wick_normal_form(cfg.p, cfg.g, zeta, cfg.formfactor, cfg.grids.radial_n1, cfg.grids.radial_n2, cfg.xi)
    const = w.meta["const"]
    fams, recs, reps = [w], [_record(w, cfg, 1.0, norms)], []
    used = [float(zeta)]
    for n in range(-1, n_scales):
        fam = fams[-1]
        if n >= 0:
            e = guesses[n] if guesses is not None else fam.z - fam.E / fam.dE
            used.append(float(e))
            fam = replace(fam, z=float(e), E=float(fam.E + fam.dE * (e - fam.z)))
        ms = modes(n) if modes is not None else None
        new, rep = renormalize(fam, cfg, modes=ms)
        reps.append(rep)
        rec = recs[-1]
        rec.dgamma1, rec.dgamma2 = rep.dgamma1, rep.dgamma2
        rec.budget = rep.budget.as_dict()
        rec.jet_budget = dict(rep.jet_budget)
        if n >= 0:
            rec.kernel_sizes = dict(rep.kernel_sizes)
            rec.eps = _eps(rep.kernel_sizes, cfg.xi)
        if sum_rules is not None:
            rec.sum_rules = sum_rules(fams[-1])
        fams.append(new)
        recs.append(_record(new, cfg, cfg.rho, norms))
    last = recs[-1]
    if sum_rules is not None:
        last.sum_rules = sum_rules(fams[-1])
    if n_scales >= 0:
        last.kernel_sizes = {f"{M}{N}": float(v) for (M, N), v in _kernel_sizes(Stage(fams[-1], cfg, modes=(None, None))).items()}
        last.eps = _eps(last.kernel_sizes, cfg.xi)
    for a, b in zip(recs[1:], recs[2:]):
        if a.eps > 0:
            b.contraction = b.eps / a.eps
    last_fam = fams[-1]
    used.append(float(last_fam.z - last_fam.E / last_fam.dE))
    return FlowRun(cfg, fams, recs, reps, const, used)


# ---------------------------------------------------------------------------
# energy chain


@dataclass
class EnergyChain:
    """Solution of ``rho e_(n+1) = E_n(e_n)``, ``E_N(e_N) = 0``.

    Attributes
    ----------
    N_scales : int
    e_values : ndarray
        ``e_(n, N)`` for ``n = -1 .. N`` (index ``n + 1``).
    e_inf : ndarray
        Estimates of ``e_(n, inf)`` (equal to ``e_values``) with
        ``tail`` the geometric bound on the difference.
    convergence_gaps : list of ndarray
        ``|e_(n, m) - e_(n, m+1)|`` for ``m = n .. N-1``, per scale ``n``.
    consistency : ndarray
        ``|rho e_(n+1) - E_n(e_n)|`` for the final flow: the residual of the
        linearized chain together with ``a_n |e_n - e_used|``, the mismatch
        between the chain and the values at which the flow was built.
    passes : list of float
        Largest chain update in each forward pass.
    run : FlowRun
        The final flow, built at the converged chain.
    """

    N_scales: int
    rho: float
    e_values: np.ndarray
    tail: np.ndarray
    convergence_gaps: list
    consistency: np.ndarray
    passes: list
    run: FlowRun

    @property
    def e_inf(self) -> np.ndarray:
        return self.e_values

    @property
    def zeta(self) -> float:
        """``e_(-1, inf)``."""
        return float(self.e_values[0])

    def as_dict(self) -> dict:
        return _jsonable(dict(N_scales=self.N_scales, rho=self.rho, e_values=self.e_values, tail=self.tail,
                              convergence_gaps=self.convergence_gaps, consistency=self.consistency,
                              passes=self.passes))


def _linear_maps(run: FlowRun):
    """``(z_n, E_n(z_n), a_n, rho_n)`` for ``n = -1 .. N``; ``rho_n`` is the step leaving scale ``n``."""
    out = []
    for rec in run.records:
        out.append((rec.z, rec.E, rec.dE, 1.0 if rec.scale < 0 else run.cfg.rho))
    return out


def _backward(maps, top: int):
    """Exact solution of the linearized chain truncated at scale ``top``.

    ``e_top`` is the root of ``E_top`` and ``e_n = z_n + (rho_n e_(n+1) - E_n(z_n)) / a_n``
    below it; this is one Newton sweep from any starting chain.
    """
    new = [math.nan] * len(maps)
    i = top + 1
    z, Ez, a, _ = maps[i]
    new[i] = z - Ez / a
    for j in range(i - 1, -1, -1):
        z, Ez, a, r = maps[j]
        new[j] = z + (r * new[j + 1] - Ez) / a
    return new


def solve_energy_chain(cfg: FlowConfig, N_scales: int = 6, tol: float = 1e-13, max_passes: int = 4,
                       modes=None, norms: bool = False, sum_rules=None) -> EnergyChain:
    """Ground-state chain ``e_(n, N)`` by forward flows and backward Newton sweeps.

    The first flow continues every family at the root of its own linearized
    ``E_n``.  Each sweep solves the linearized chain exactly; the next flow is
    built at the updated values.  Iteration stops when the largest update is
    below ``tol``.

    Raises
    ------
    RootFindFailure
        If a chain value leaves ``|e| < 1/10``.
    """
    guesses, zeta, passes = None, 0.0, []
    for _ in range(max_passes):
        run = run_flow(cfg, N_scales, zeta, guesses, modes, norms=False)
        new = _backward(_linear_maps(run), N_scales)
        gap = max(abs(a - b) for a, b in zip(new, run.continued_at))
        passes.append(gap)
        if any(abs(v) >= 0.1 for v in new):
            raise RootFindFailure("chain value left |e| < 1/10")
        if gap < tol:
            break
        zeta, guesses = new[0], new[1:-1]
    if norms or sum_rules is not None:
        run = run_flow(cfg, N_scales, zeta, guesses, modes, norms=norms, sum_rules=sum_rules)
    maps = _linear_maps(run)
    e = np.array(_backward(maps, N_scales))
    for rec, v in zip(run.records, e):
        rec.e = float(v)
    # each family was built from its predecessor continued at run.continued_at
    cons = np.array([abs(r * e[j + 1] - (Ez + a * (e[j] - z))) for j, (z, Ez, a, r) in enumerate(maps[:-1])])
    # truncated chains e_(n, m) from the same linearized maps
    trunc = [_backward(maps, m) for m in range(-1, N_scales)]
    gaps = []
    for j in range(len(maps)):
        seq = [t[j] for t in trunc if not math.isnan(t[j])]
        gaps.append(np.abs(np.diff(seq)))
    tail = np.zeros(len(maps))
    for j, gp in enumerate(gaps):
        gp = gp[gp > 0]
        if len(gp) >= 2:
            q = min(max(gp[i + 1] / gp[i] for i in range(len(gp) - 1)), 0.5)
            tail[j] = gp[-1] * q / (1 - q)
        elif len(gp) == 1:
            tail[j] = gp[-1]
    return EnergyChain(N_scales, cfg.rho, e, tail, gaps, cons, passes, run)


def _relative_kernel_error(reports, n):
    """Relative error of the degree-1 and -2 kernels produced by report ``n``."""
    if n + 1 >= len(reports):
        return 0.0
    b = reports[n].budget
    err = sum(b.sector(k) for k in ("10", "11", "20")) + sum(b.degree_cap.values())
    size = sum(reports[n + 1].kernel_sizes.values())
    return err / size if size > 0 else 0.0


def ground_energy(m, chain: EnergyChain, const: float | None = None):
    """Ground-state energy ``const - e_(-1, inf)`` and its error bar.

    Parameters
    ----------
    m : FiberModel or None
        Only used for its Wick constant when given; the chain's own constant
        is used otherwise.
    chain : EnergyChain
    const : float, optional
        Wick constant overriding both (e.g. with a discretized ``<A**2>``).

    Returns
    -------
    (float, float)
    """
    run = chain.run
    if const is None:
        const = run.const
        if m is not None:
            from .initcond import wick_constant

            const = wick_constant(m.p, m.g, m.formfactor or FormFactor(m.sigma))
    rho = run.cfg.rho
    err = 0.0
    reps = run.reports
    for i, rep in enumerate(reps):
        n = rep.scale
        w = rho ** max(n, 0)
        err += w * rep.jet_budget.get("value", 0.0)
        # kernel errors enter the next vacuum output quadratically
        if i + 1 < len(reps):
            err += rho ** max(n + 1, 0) * 2 * _relative_kernel_error(reps, i) * abs(reps[i + 1].delta0)
    err += chain.tail[0] + float(np.max(chain.consistency, initial=0.0))
    return float(const - chain.zeta), float(err)


# ---------------------------------------------------------------------------
# mass


@dataclass
class MassAccumulator:
    """Series ``1/m* = (1 + sum rho**-n dgamma2_n) / (1 + sum dgamma1_n)``.

    ``n`` runs from ``-1`` with ``rho**-n`` read as 1 at ``n = -1`` and 0.
    """

    rho: float
    scales: list = field(default_factory=list)
    dgamma1: list = field(default_factory=list)
    dgamma2: list = field(default_factory=list)
    budget_num: list = field(default_factory=list)
    budget_den: list = field(default_factory=list)

    def add(self, scale, dg1, dg2, b_num, b_den):
        w = self.rho ** -max(scale, 0)
        self.scales.append(scale)
        self.dgamma1.append(float(dg1))
        self.dgamma2.append(float(w * dg2))
        self.budget_num.append(float(w * b_num))
        self.budget_den.append(float(b_den))

    @property
    def numerator(self) -> float:
        return 1.0 + sum(self.dgamma2)

    @property
    def denominator(self) -> float:
        return 1.0 + sum(self.dgamma1)

    @staticmethod
    def _tail(terms):
        t = [abs(x) for x in terms if abs(x) > 0]
        if len(t) < 3:
            return math.inf if t else 0.0
        q = max(t[-1] / t[-2], t[-2] / t[-3])
        if q >= 1:
            return math.inf
        return t[-1] * q / (1 - q)

    @property
    def tails(self):
        return self._tail(self.dgamma2), self._tail(self.dgamma1)

    @property
    def inverse_mass(self) -> float:
        if self.denominator <= 0:
            raise NegativeDenominator("X0 slope of T is not positive")
        return self.numerator / self.denominator

    def inverse_mass_error(self) -> float:
        tn, td = self.tails
        en = tn + sum(self.budget_num)
        ed = td + sum(self.budget_den)
        D = self.denominator
        return en / D + abs(self.numerator) * ed / D**2

    def converged(self, rel: float = 1e-3) -> bool:
        tn, td = self.tails
        sn = abs(sum(self.dgamma2)) or 1.0
        sd = abs(sum(self.dgamma1)) or 1.0
        return (tn <= rel * sn and td <= rel * sd) or tn <= sum(self.budget_num)

    def as_dict(self) -> dict:
        return _jsonable(asdict(self))


def _mass_from_run(run: FlowRun) -> MassAccumulator:
    acc = MassAccumulator(run.cfg.rho)
    reps = run.reports
    for i, rep in enumerate(reps):
        jb = rep.jet_budget
        rel = _relative_kernel_error(reps, i - 1) if i >= 1 else 0.0
        b_num = jb.get("hess_sp", 0.0) + 2 * rel * abs(rep.dgamma2)
        b_den = jb.get("grad0", 0.0) + 2 * rel * abs(rep.dgamma1)
        acc.add(rep.scale, rep.dgamma1, rep.dgamma2, b_num, b_den)
    return acc


def accumulate_mass(cfg: FlowConfig, N_scales: int = 12, run: FlowRun | None = None, modes=None, min_scales: int = 3):
    """Effective mass ``m*`` at ``p = 0`` with its error.

    The flow follows the greedy chain and stops early once both series tails
    are below ``1e-3`` of their sums or below the accumulated budget.

    Returns
    -------
    (m_star, error, MassAccumulator)
    """
    if cfg.p != 0:
        raise ValueError("the mass series is defined at p = 0")
    if run is None:
        if cfg.g == 0:
            run = run_flow(cfg, 1, modes=modes)
        else:
            run = _run_until_converged(cfg, N_scales, modes, min_scales)
    acc = _mass_from_run(run)
    inv = acc.inverse_mass
    err = acc.inverse_mass_error()
    m = 1.0 / inv
    return m, float(m * m * err), acc


def _run_until_converged(cfg, N_scales, modes, min_scales):
    run = run_flow(cfg, min_scales, modes=modes)
    while run.N < N_scales and not _mass_from_run(run).converged():
        run = _extend(run, modes)
    return run


def _extend(run: FlowRun, modes=None) -> FlowRun:
    """Continue a greedy flow by one scale."""
    cfg = run.cfg
    fam = run.families[-1]
    e = fam.z - fam.E / fam.dE
    fam = replace(fam, z=float(e), E=float(fam.E + fam.dE * (e - fam.z)))
    ms = modes(fam.scale) if modes is not None else None
    new, rep = renormalize(fam, cfg, modes=ms)
    new.meta["sizes"] = {}
    rec = run.records[-1]
    rec.dgamma1, rec.dgamma2 = rep.dgamma1, rep.dgamma2
    rec.budget = rep.budget.as_dict()
    rec.jet_budget = dict(rep.jet_budget)
    rec.kernel_sizes = dict(rep.kernel_sizes)
    rec.eps = _eps(rep.kernel_sizes, cfg.xi)
    prev = run.records[-2]
    if prev.scale >= 0 and prev.eps > 0:
        rec.contraction = rec.eps / prev.eps
    run.families.append(new)
    run.reports.append(rep)
    run.records.append(_record(new, cfg, cfg.rho, False))
    return run

"""The renormalization map at kernel level.

One step takes a family ``(E, T, w_1)`` at spectral parameter ``z`` and returns
the renormalized family.  The interaction part is the alternating sum over
chains of ``L`` Wick monomials separated by free resolvent factors,

    V = < Omega, F_0 W_1 F_1 W_2 ... W_L F_L Omega >,

where every ``W_l`` splits its legs into external photons and internal
photons contracted with neighbours.  The vacuum expectation is evaluated by
propagating a state with at most two internal photons in flight through the
chain, from right to left, on a discrete set of photon modes.  The output
kernels are then projected onto the covariant tensor basis of
:mod:`wickrg.kernelspace` by fitting their Taylor data at ``X = 0``.

The degree-(0,0) output is kept as an exact composition

    Ttilde_new(X) = (g(rho X) - g(0)) / rho,
    g(Y) = (Ttilde(Y) + E) U(Y) + U(Y)**2 Delta(Y),

where ``U`` is the overlap factor and ``Delta`` the interaction part of the
degree-(0,0) output, interpolated on a Chebyshev grid.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property, partial

import numpy as np
from numpy.polynomial import chebyshev as npcheb
from scipy import ndimage
from scipy.special import roots_legendre

from .formfactor import CutoffProfile, FormFactor, eval_chi_sq, eval_chibar_sq, smoothstep
from .kernelspace import (
    SQRT_4PI,
    AnalyticT,
    KernelFamily,
    Leg,
    RadialGrid,
    SupLattice,
    TKernel,
    WickKernel,
    channel_features,
    degree1_channels,
    degree2_channels,
    norm_sigma,
    taylor_from_values,
    taylor_stencil,
)
from .quadrature import QuadratureRule, photon_modes, polarization_vectors

__all__ = [
    "SingularDenominator",
    "DomainViolation",
    "PatternUnsupported",
    "BudgetBlown",
    "InterpolationLoss",
    "GridConfig",
    "FlowConfig",
    "free_comparison",
    "free_comparison_T",
    "upsilon",
    "free_resolvent",
    "free_renormalize_T",
    "ChebInterp",
    "ComposedT",
    "ModeSet",
    "Factor",
    "Pattern",
    "enumerate_patterns",
    "Stage",
    "contract_VL",
    "rescale",
    "TruncationBudget",
    "StepReport",
    "renormalize",
]


class SingularDenominator(ArithmeticError):
    pass


class DomainViolation(ValueError):
    pass


class PatternUnsupported(ValueError):
    pass


class BudgetBlown(RuntimeError):
    pass


class InterpolationLoss(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class GridConfig:
    """Discretization parameters of the flow.

    Attributes
    ----------
    radial_n1, radial_n2 : int
        Storage nodes per leg for degree-one and degree-two kernels.
    fine_radial, fine_angular : int
        Nodes per radial panel and angular order for contractions with one
        photon in flight.
    coarse_radial, coarse_angular : int
        Same for contractions with two photons in flight.
    cheb_x0, cheb_r, cheb_u : int
        Chebyshev grid for the degree-(0,0) interaction part.
    jet_blend : tuple
        Fractions of the Chebyshev ``Y0`` range between which the
        interpolant hands over to the quadratic jet at 0.
    taylor_h : float
        Step of the Taylor stencil in the new-scale variables.
    lmax_p, lmax_c : int
        Legendre orders in ``khat.phat`` (degree one, ``p > 0``) and
        ``khat.khat'`` (degree two).
    n_unodes, n_cnodes : int
        Sampled angles for the fits.
    tgrid : tuple
        Spline table for fast ``Ttilde`` evaluation: ``(n_X0, n_r, n_u)``.
    e_step : float
        Relative step (times rho) of the centred difference in ``E``.
    chunk : int
        Target array size per contraction chunk.
    """

    radial_n1: int = 32
    radial_n2: int = 20
    fine_radial: int = 16
    fine_angular: int = 7
    coarse_radial: int = 8
    coarse_angular: int = 3
    cheb_x0: int = 12
    cheb_r: int = 6
    cheb_u: int = 5
    jet_blend: tuple = (0.01, 0.03)
    taylor_h: float = 1e-3
    lmax_p: int = 2
    lmax_c: int = 2
    n_unodes: int = 5
    n_cnodes: int = 5
    tgrid: tuple = (129, 41, 9)
    e_step: float = 1e-4
    chunk: int = 2_000_000


@dataclass(frozen=True)
class FlowConfig:
    """Parameters of the renormalization map.

    Attributes
    ----------
    rho : float
        Scale factor, ``0 < rho <= 1/2``.
    L_max : int
        Longest chain of Wick monomials evaluated.
    degree_cap : int
        Highest stored ``M + N``.
    p, sigma, g : float
        Conserved momentum, infrared exponent and coupling.
    xi : float
        Norm weight.
    pairs_window : tuple of int
        Largest number of contracted internal pairs evaluated for outputs
        of degree 0, 1 and 2.  Patterns outside the window are bounded and
        booked in the truncation budget.
    budget_ceiling : float
        ``renormalize`` raises :class:`BudgetBlown` above this total budget.
    """

    rho: float = 0.25
    L_max: int = 3
    degree_cap: int = 2
    p: float = 0.0
    sigma: float = 0.0
    g: float = 0.0
    xi: float = 0.25
    profile: CutoffProfile = CutoffProfile()
    formfactor: FormFactor = FormFactor()
    pairs_window: tuple = (2, 1, 0)
    budget_ceiling: float = math.inf
    grids: GridConfig = GridConfig()

    def __post_init__(self):
        if not 0 < self.rho <= 0.5:
            raise ValueError("rho must lie in (0, 1/2]")
        if self.L_max < 2:
            raise ValueError("L_max must be >= 2")
        if self.degree_cap != 2:
            raise ValueError("only degree_cap = 2 is implemented")
        if not 0 <= self.p < 1.0 / 3.0:
            raise ValueError("p must lie in [0, 1/3)")
        if self.sigma < 0 or self.g < 0:
            raise ValueError("sigma and g must be nonnegative")
        if not 0 < self.xi < 1:
            raise ValueError("xi must lie in (0, 1)")

    @classmethod
    def rho_from_g(cls, g: float, **kw) -> "FlowConfig":
        """Scale choice ``rho = g**(1/3)`` (capped at 1/2)."""
        return cls(rho=min(0.5, g ** (1.0 / 3.0)) if g > 0 else 0.5, g=g, **kw)


# ---------------------------------------------------------------------------
# free part


def _as_X(X):
    if hasattr(X, "as_array"):
        return X.as_array()
    return np.asarray(X, dtype=float)


def _tfree(X, p, lam):
    return -p * X[..., 3] + lam * np.sum(X[..., 1:] ** 2, axis=-1)


def _free_tilde(X, p, lam, z, profile):
    X0 = X[..., 0]
    t = _tfree(X, p, lam) + z
    cb = eval_chibar_sq(profile, 1.0, X0)
    den = X0 + cb * t
    active = cb > 0
    if np.any(active & (np.abs(den) < 1e-12)):
        raise SingularDenominator("free comparison denominator vanishes")
    with np.errstate(divide="ignore", invalid="ignore"):
        ups = np.where(active, X0 / np.where(active, den, 1.0), 1.0)
    return t * ups - z


def free_comparison(p: float, lam: float, z: float, X, profile: CutoffProfile = CutoffProfile()):
    """Overlap-corrected free kernel ``T_0^{(p; lambda)}[z; X]``.

    ``T_0 = X0 + chi_1(X0)**2 * ((t + z) U_1 - z)`` with
    ``t = -|p| X_par + lambda |X|**2`` and
    ``U_1 = X0 / (X0 + chibar_1(X0)**2 (t + z))``.  Below ``X0 = 3/4`` this is
    ``X0 + t``.

    Raises
    ------
    SingularDenominator
        If the overlap denominator vanishes on the overlap support.
    """
    if not 0 <= p < 1.0 / 3.0:
        raise ValueError("p must lie in [0, 1/3)")
    if not 0 <= lam <= 0.5:
        raise ValueError("lambda must lie in [0, 1/2]")
    X = _as_X(X)
    return X[..., 0] + eval_chi_sq(profile, 1.0, X[..., 0]) * _free_tilde(X, p, lam, z, profile)


def free_comparison_T(p: float, lam: float, z: float = 0.0, profile: CutoffProfile = CutoffProfile()) -> AnalyticT:
    """:func:`free_comparison` as a :class:`~wickrg.kernelspace.TKernel`."""
    return AnalyticT(partial(_free_tilde, p=p, lam=lam, z=z, profile=profile), profile, label=f"T0(p={p},lam={lam},z={z})")


def _overlap(profile, rho, Y0, first=False):
    Y0 = np.asarray(Y0, dtype=float)
    lo = profile.transition_lo * rho
    out = np.zeros(Y0.shape)
    m = Y0 >= lo if first else (Y0 >= lo) & (Y0 < profile.transition_hi)
    if not np.any(m):
        return out if out.ndim else float(out)
    y = Y0[m]
    v = eval_chibar_sq(profile, rho, y)
    if not first:
        v = v * eval_chi_sq(profile, 1.0, y)
    out[m] = v
    return out if out.ndim else float(out)


def upsilon(T: TKernel, E: float, rho: float, X, profile: CutoffProfile = CutoffProfile(), first: bool = False):
    """Overlap factor ``U = X0 / (X0 + chibar_rho**2 chi_1**2 (Ttilde + E))``.

    Equal to 1 wherever ``chibar_rho(X0) = 0``, i.e. for ``X0 <= 3 rho / 4``.
    With ``first=True`` the decimation of the unbounded Hamiltonian is meant:
    the overlap weight is ``chibar_1**2`` and ``Ttilde`` is the full kinetic
    part.
    """
    X = _as_X(X)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    X0 = X[..., 0]
    c = _overlap(profile, rho, X0, first)
    out = np.ones(np.shape(X0))
    m = (c > 0) & (X0 > 0)
    if np.any(m):
        tv = T.tilde(X[m]) + E
        den = X0[m] + c[m] * tv
        if np.any(np.abs(den) < 1e-14):
            raise SingularDenominator("overlap denominator vanishes")
        out[m] = X0[m] / den
    return float(out[0]) if single else out


def free_resolvent(T: TKernel, E: float, rho: float, X, profile: CutoffProfile = CutoffProfile()):
    """``[X0 + chibar_rho**2 chi_1**2 (Ttilde + E)]**-1``.

    Raises
    ------
    DomainViolation
        If ``|denominator| < rho/100`` on the support of ``chibar_rho``.
    """
    X = _as_X(X)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    X0 = X[..., 0]
    c = _overlap(profile, rho, X0)
    den = np.array(X0, dtype=float, copy=True)
    m = c > 0
    if np.any(m):
        den[m] = X0[m] + c[m] * (T.tilde(X[m]) + E)
        if np.any(np.abs(den[m]) < rho / 100):
            raise DomainViolation("free resolvent denominator below rho/100")
    with np.errstate(divide="ignore"):
        out = 1.0 / den
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# Chebyshev interpolation of the degree-(0,0) interaction part


class ChebInterp:
    """Tensor Chebyshev interpolant of a function of ``Y`` in coordinates ``(Y0, r, u)``.

    ``r = |Yvec| / Y0`` and ``u = Yvec . phat / |Yvec|``; the ``u`` axis is
    dropped when the function is rotation invariant (``p = 0``).
    """

    def __init__(self, y0_max: float, n0: int, nr: int, nu: int | None, r_max: float = 1.25):
        self.domains = [(0.0, y0_max), (0.0, r_max)] + ([(-1.0, 1.0)] if nu else [])
        self.ns = [n0, nr] + ([nu] if nu else [])
        self.nodes = []
        self._inv = []
        for (a, b), n in zip(self.domains, self.ns):
            x = np.cos(np.pi * (np.arange(n) + 0.5) / n)[::-1]
            self.nodes.append(a + 0.5 * (b - a) * (x + 1))
            self._inv.append(np.linalg.inv(npcheb.chebvander(x, n - 1)))
        self.coef = np.zeros(self.ns)

    @property
    def dim(self):
        return len(self.ns)

    def points(self) -> np.ndarray:
        """Spectral points ``Y`` (shape ``(*ns, 4)``) at the interpolation nodes."""
        grids = np.meshgrid(*self.nodes, indexing="ij")
        Y0, r = grids[0], grids[1]
        u = grids[2] if self.dim == 3 else np.ones_like(Y0)
        s = np.sqrt(np.clip(1 - u * u, 0, None))
        mag = Y0 * r
        return np.stack([Y0, mag * s, np.zeros_like(Y0), mag * u], axis=-1)

    def fit(self, values: np.ndarray) -> "ChebInterp":
        c = np.asarray(values, dtype=float).reshape(self.ns)
        for ax, inv in enumerate(self._inv):
            c = np.moveaxis(np.tensordot(inv, np.moveaxis(c, ax, 0), axes=(1, 0)), 0, ax)
        self.coef = c
        return self

    def coords(self, Y):
        Y = np.asarray(Y, dtype=float)
        Y0 = Y[..., 0]
        mag = np.linalg.norm(Y[..., 1:], axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(Y0 > 0, mag / np.where(Y0 > 0, Y0, 1), 0.0)
            u = np.where(mag > 0, Y[..., 3] / np.where(mag > 0, mag, 1), 1.0)
        out = [Y0, r] + ([u] if self.dim == 3 else [])
        return out

    def __call__(self, Y):
        if not np.any(self.coef):
            return np.zeros(np.shape(Y)[:-1])
        cs = self.coords(Y)
        shape = cs[0].shape
        mats = []
        for (a, b), n, c in zip(self.domains, self.ns, cs):
            x = 2 * (c.reshape(-1) - a) / (b - a) - 1
            mats.append(npcheb.chebvander(x, n - 1))
        if self.dim == 2:
            out = np.einsum("mi,ij,mj->m", mats[0], self.coef, mats[1])
        else:
            out = np.einsum("mi,ijk,mj,mk->m", mats[0], self.coef, mats[1], mats[2])
        return out.reshape(shape)


class JetBlend:
    """Interpolant that reduces to its quadratic jet at 0 for small ``Y0``.

    In the coordinates ``r = |Yvec| / Y0`` an interpolation error in ``r``
    turns into an error ``~ 1 / Y0`` in the spatial derivatives.  Below
    ``lo * y0_max`` the jet ``d0 + g.Y + Y.H.Y / 2`` is used instead, with a
    smoothstep hand-over up to ``hi * y0_max``.
    """

    def __init__(self, interp, d0, g, H, y0_max, lo=0.01, hi=0.03):
        self.interp = interp
        self.d0, self.g, self.H = float(d0), np.asarray(g, float), np.asarray(H, float)
        self.a, self.b = lo * y0_max, hi * y0_max

    def jet(self, Y):
        Y = np.asarray(Y, dtype=float)
        return self.d0 + Y @ self.g + 0.5 * np.einsum("...a,ab,...b->...", Y, self.H, Y)

    def __call__(self, Y):
        Y = np.asarray(Y, dtype=float)
        shape = Y.shape[:-1]
        Y = Y.reshape(-1, 4)
        out = self.jet(Y)
        w = smoothstep((Y[:, 0] - self.a) / (self.b - self.a))
        m = w > 0
        if np.any(m):
            out[m] = out[m] + w[m] * (self.interp(Y[m]) - out[m])
        return out.reshape(shape)


class _Zero:
    def __call__(self, Y):
        return np.zeros(np.shape(Y)[:-1])


class ComposedT(TKernel):
    """``Ttilde`` of a renormalized family as an exact composition with the previous scale.

    Parameters
    ----------
    prev : TKernel
        ``Ttilde`` of the previous scale (the full kinetic part at scale -1).
    E_prev : float
        Constant part at the previous scale.
    rho : float
        Scale factor (1 for the first decimation).
    delta : callable
        Interaction part of the degree-(0,0) output in old-scale variables.
    taylor_data : tuple
        Gradient and Hessian at 0, propagated exactly.
    first : bool
        First decimation (overlap weight ``chibar_1**2``).
    """

    def __init__(self, prev, E_prev, rho, profile, delta, taylor_data, first=False, p=0.0, tgrid=(129, 41, 9)):
        self.prev = prev
        self.E_prev = float(E_prev)
        self.rho = float(rho)
        self.profile = profile
        self.delta = delta
        self.first = first
        self.p = p
        self._taylor = taylor_data
        self._tgrid = tgrid
        self.unbounded = False
        self.g0 = float(self._g(np.zeros((1, 4)))[0])

    def _g(self, Y):
        Y0 = Y[..., 0]
        c = _overlap(self.profile, self.rho, Y0, self.first)
        tv = self.prev.tilde(Y) + self.E_prev
        ups = np.ones_like(Y0)
        m = (c > 0) & (Y0 > 0)
        if np.any(m):
            ups[m] = Y0[m] / (Y0[m] + c[m] * tv[m])
        return tv * ups + ups**2 * self.delta(Y)

    def tilde(self, X):
        X = np.asarray(X, dtype=float)
        return (self._g(self.rho * X) - self.g0) / self.rho

    def taylor(self):
        return self._taylor

    @cached_property
    def _spline(self):
        n0, nr, nu = self._tgrid
        x0 = np.linspace(0.0, 1.0, n0)
        r = np.linspace(0.0, 1.25, nr)
        if self.p > 0:
            u = np.linspace(-1.0, 1.0, nu)
            G = np.meshgrid(x0, r, u, indexing="ij")
            s = np.sqrt(np.clip(1 - G[2] ** 2, 0, None))
            mag = G[0] * G[1]
            X = np.stack([G[0], mag * s, np.zeros_like(mag), mag * G[2]], axis=-1)
        else:
            G = np.meshgrid(x0, r, indexing="ij")
            mag = G[0] * G[1]
            X = np.stack([G[0], np.zeros_like(mag), np.zeros_like(mag), mag], axis=-1)
        vals = self.tilde(X.reshape(-1, 4)).reshape(X.shape[:-1])
        return ndimage.spline_filter(vals, order=3, mode="nearest"), (x0, r)

    def tilde_fast(self, X):
        """Cubic-spline lookup of :meth:`tilde` on ``0 <= X0 <= 1``."""
        X = np.asarray(X, dtype=float)
        coef, (x0, r) = self._spline
        shape = X.shape[:-1]
        X = X.reshape(-1, 4)
        X0 = X[:, 0]
        mag = np.linalg.norm(X[:, 1:], axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            rr = np.where(X0 > 0, mag / np.where(X0 > 0, X0, 1), 0.0)
        coords = [X0 / (x0[1] - x0[0]), rr / (r[1] - r[0])]
        if self.p > 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.where(mag > 0, X[:, 3] / np.where(mag > 0, mag, 1), 1.0)
            nu = coef.shape[2]
            coords.append((u + 1) / 2 * (nu - 1))
        out = ndimage.map_coordinates(coef, np.array(coords), order=3, mode="nearest", prefilter=False)
        return out.reshape(shape)


def free_renormalize_T(T: TKernel, E: float, rho: float, profile: CutoffProfile = CutoffProfile(), p: float = 0.0) -> ComposedT:
    """Renormalized ``Ttilde`` in the absence of interaction."""
    g, H = T.taylor()
    return ComposedT(T, E, rho, profile, _Zero(), (g, rho * H), first=False, p=p)


# ---------------------------------------------------------------------------
# photon modes for internal contractions


@dataclass
class ModeSet:
    """Internal photon modes: momentum, polarization and leg factor ``sqrt(weight/|q|)``."""

    kmag: np.ndarray
    khat: np.ndarray
    eps: np.ndarray
    s: np.ndarray
    label: str = ""

    @classmethod
    def build(cls, radial_per_panel: int, angular_order: int, breaks, label=""):
        rule = QuadratureRule.build(radial_per_panel, angular_order, tuple(breaks))
        pm = photon_modes(rule)
        return cls(pm.kmag, pm.kvec / pm.kmag[:, None], pm.eps, pm.leg, label)

    @classmethod
    def from_photon_modes(cls, pm, scale: float = 1.0, label=""):
        """Modes of a fixed discretization seen at a lower scale.

        Momenta ``q <= scale`` are rescaled to ``q / scale``; the ``d^3k``
        weights pick up ``scale**-3``.
        """
        keep = pm.kmag <= scale * (1 + 1e-12)
        k = pm.kmag[keep] / scale
        w = pm.weight[keep] / scale**3
        return cls(k, pm.kvec[keep] / pm.kmag[keep, None], pm.eps[keep], np.sqrt(w / k), label)

    @property
    def N(self):
        return len(self.kmag)

    @cached_property
    def q4(self):
        return np.concatenate([self.kmag[:, None], self.kmag[:, None] * self.khat], axis=1)

    def leg(self, axis: int, ndim: int) -> Leg:
        shape = [1] * ndim
        shape[axis] = self.N
        return Leg(self.kmag.reshape(shape), self.khat.reshape(shape + [3]), self.eps.reshape(shape + [3]))

    def factor(self, axis, ndim):
        shape = [1] * ndim
        shape[axis] = self.N
        return self.s.reshape(shape)

    def shift(self, axis, ndim):
        shape = [1] * ndim
        shape[axis] = self.N
        return self.q4.reshape(shape + [4])


# ---------------------------------------------------------------------------
# patterns


@dataclass(frozen=True)
class Factor:
    """One Wick monomial in a chain: kernel degree and its external/internal split.

    ``m``/``n`` external creation/annihilation legs, ``p``/``q`` internal ones.
    """

    M: int
    N: int
    m: int
    p: int
    n: int
    q: int

    @property
    def binom(self) -> int:
        return math.comb(self.m + self.p, self.p) * math.comb(self.n + self.q, self.q)


@dataclass(frozen=True)
class Pattern:
    """A chain of factors, listed left to right."""

    factors: tuple

    @property
    def L(self):
        return len(self.factors)

    @property
    def sign(self):
        return (-1) ** (self.L - 1)

    @property
    def weight(self):
        return self.sign * math.prod(f.binom for f in self.factors)

    @property
    def pairs(self):
        return sum(f.p for f in self.factors)

    @property
    def in_flight(self):
        """Photon numbers in flight between factors (right to left)."""
        out, f = [], 0
        for fac in reversed(self.factors):
            f = f - fac.q + fac.p
            out.append(f)
        return out

    @property
    def max_in_flight(self):
        return max([0] + self.in_flight)

    @property
    def needs_coarse(self):
        if self.max_in_flight >= 2:
            return True
        return any(f.p == 1 and f.q == 1 for f in self.factors)

    @property
    def M_out(self):
        return sum(f.m for f in self.factors)

    @property
    def N_out(self):
        return sum(f.n for f in self.factors)


DEGREES = ((1, 0), (0, 1), (1, 1), (2, 0), (0, 2))


def _factor_options(degrees):
    out = []
    for M, N in degrees:
        for m in range(M + 1):
            for n in range(N + 1):
                out.append(Factor(M, N, m, M - m, n, N - n))
    return out


def enumerate_patterns(M: int, N: int, L: int, degrees=DEGREES, max_in_flight: int | None = None):
    """All chains of ``L`` factors with ``M`` external creations and ``N`` annihilations.

    A chain is admissible if, applied right to left to the vacuum, the
    number of internal photons never becomes negative and returns to zero.
    """
    opts = _factor_options(degrees)
    out = []
    for combo in itertools.product(opts, repeat=L):
        if sum(f.m for f in combo) != M or sum(f.n for f in combo) != N:
            continue
        f, ok, mx = 0, True, 0
        for fac in reversed(combo):
            if fac.q > f:
                ok = False
                break
            f = f - fac.q + fac.p
            mx = max(mx, f)
        if not ok or f != 0:
            continue
        if max_in_flight is not None and mx > max_in_flight:
            continue
        out.append(Pattern(tuple(combo)))
    return out


# ---------------------------------------------------------------------------
# evaluation stage


class Stage:
    """Everything needed to evaluate chains for one family at one value of ``E``.

    Parameters
    ----------
    fam : KernelFamily
    cfg : FlowConfig
    E : float, optional
        Overrides ``fam.E`` inside the resolvent factors.
    """

    def __init__(self, fam: KernelFamily, cfg: FlowConfig, E: float | None = None, modes=None):
        self.fam = fam
        self.cfg = cfg
        self.first = fam.scale == -1
        self.rho = 1.0 if self.first else cfg.rho
        self.profile = cfg.profile
        self.E = fam.E if E is None else float(E)
        self.kernels = {d: k for d, k in fam.all_kernels().items() if not k.is_zero()}
        if modes is None:
            modes = build_modes(cfg, self.first)
        self.fine, self.coarse = modes
        self.forms = {}
        self.fcache = {}

    @cached_property
    def probe(self):
        return ModeSet.build(2, 3, _breaks(self.cfg.rho, self.first), "probe")

    def with_E(self, E):
        st = Stage(self.fam, self.cfg, E, (self.fine, self.coarse))
        st.forms = self.forms
        return st

    def overlap(self, Y0):
        return _overlap(self.profile, self.rho, Y0, self.first)

    def _tval(self, Y):
        T = self.fam.T
        return T.tilde_fast(Y) + self.E

    def F(self, Y):
        """Resolvent factor between two monomials, at spectral points ``Y``."""
        Y0 = Y[..., 0]
        c = self.overlap(Y0)
        out = np.zeros(Y0.shape)
        m = c > 0
        if np.any(m):
            den = Y0[m] + c[m] * self._tval(Y[m])
            if np.any(np.abs(den) < self.rho / 100):
                raise DomainViolation("resolvent denominator below rho/100")
            out[m] = c[m] / den
        return out

    def U(self, Y):
        """Overlap factor at the two ends of a chain."""
        Y0 = Y[..., 0]
        c = self.overlap(Y0)
        out = np.ones(Y0.shape)
        m = (c > 0) & (Y0 > 0)
        if np.any(m):
            out[m] = Y0[m] / (Y0[m] + c[m] * self._tval(Y[m]))
        return out

    def g_of(self, Y, delta):
        """``g(Y) = (Ttilde + E) U + U**2 Delta`` on old-scale points."""
        tv = self.fam.T.tilde(Y) + self.E
        Y0 = Y[..., 0]
        c = self.overlap(Y0)
        ups = np.ones(Y0.shape)
        m = (c > 0) & (Y0 > 0)
        ups[m] = Y0[m] / (Y0[m] + c[m] * tv[m])
        return tv * ups + ups**2 * delta


def _breaks(rho, first):
    if first:
        return (0.75, 1.0)
    return tuple(sorted({0.75 * rho, rho, 0.75, 1.0}))


def build_modes(cfg: FlowConfig, first: bool):
    gr = cfg.grids
    br = _breaks(cfg.rho, first)
    fine = ModeSet.build(gr.fine_radial, gr.fine_angular, br, "fine")
    coarse = ModeSet.build(gr.coarse_radial, gr.coarse_angular, br, "coarse")
    return fine, coarse


def _sub_leg(lg: Leg, sl, extra_dims):
    shape = lambda a: a[sl].reshape(a[sl].shape[:1] + (1,) * extra_dims + a[sl].shape[1:])
    return Leg(shape(lg.kmag), shape(lg.khat), shape(lg.eps))


def _apply_factor(st: Stage, fac: Factor, psi, nfl, Y, eo, ei, ms: ModeSet):
    kern = st.kernels.get((fac.M, fac.N))
    if kern is None:
        return None, nfl
    prim_ext = st.first

    def K(Yb, outs_ext, outs_int, ins_ext, ins_int):
        legs = outs_ext + outs_int + ins_ext + ins_int
        prim = [prim_ext] * len(outs_ext) + [False] * len(outs_int) + [prim_ext] * len(ins_ext) + [False] * len(ins_int)
        form = None
        if not outs_ext and not ins_ext:
            # fully internal: the quadratic form in Y is shared by all chunks
            key = (fac.M, fac.N, nfl, ms.label, tuple(np.shape(l.kmag) for l in legs))
            form = st.forms.get(key)
            if form is None:
                form = st.forms[key] = kern.polynomial_form(legs, prim)
        else:
            is_ext = [True] * len(outs_ext) + [False] * len(outs_int) + [True] * len(ins_ext) + [False] * len(ins_int)
            form = _dedup_form(kern, legs, is_ext, prim)
        return kern.evaluate(Yb, legs, prim, form=form)

    p, q = fac.p, fac.q
    B = psi.shape[0]

    def ext(legs, extra):
        return [_sub_leg(l, slice(None), extra) for l in legs]

    if nfl == 0:
        if (p, q) == (0, 0):
            return psi * K(Y, eo, [], ei, []), 0
        if (p, q) == (1, 0):
            v = K(Y[:, None], ext(eo, 1), [ms.leg(1, 2)], ext(ei, 1), [])
            return psi[:, None] * ms.factor(1, 2) * v, 1
        if (p, q) == (2, 0):
            v = K(Y[:, None, None], [], [ms.leg(1, 3), ms.leg(2, 3)], [], [])
            return 2.0 * psi[:, None, None] * ms.factor(1, 3) * ms.factor(2, 3) * v, 2
    elif nfl == 1:
        if (p, q) == (0, 0):
            v = K(Y[:, None] + ms.shift(1, 2), ext(eo, 1), [], ext(ei, 1), [])
            return psi * v, 1
        if (p, q) == (1, 0):
            Yb = Y[:, None, None] + ms.shift(1, 3)
            v = K(Yb, ext(eo, 2), [ms.leg(2, 3)], ext(ei, 2), [])
            A = psi[:, :, None] * ms.factor(2, 3) * v
            return A + np.swapaxes(A, 1, 2), 2
        if (p, q) == (0, 1):
            v = K(Y[:, None], ext(eo, 1), [], ext(ei, 1), [ms.leg(1, 2)])
            return np.sum(ms.factor(1, 2) * v * psi, axis=1), 0
        if (p, q) == (1, 1):
            v = K(Y[:, None, None], [], [ms.leg(1, 3)], [], [ms.leg(2, 3)])
            return np.sum(ms.factor(1, 3) * ms.factor(2, 3) * v * psi[:, None, :], axis=2), 1
    elif nfl == 2:
        if (p, q) == (0, 0):
            Yb = Y[:, None, None] + ms.shift(1, 3) + ms.shift(2, 3)
            return psi * K(Yb, ext(eo, 2), [], ext(ei, 2), []), 2
        if (p, q) == (0, 1):
            Yb = Y[:, None, None] + ms.shift(1, 3)
            v = K(Yb, ext(eo, 2), [], ext(ei, 2), [ms.leg(2, 3)])
            return np.sum(ms.factor(2, 3) * v * psi, axis=2), 1
        if (p, q) == (0, 2):
            v = K(Y[:, None, None], [], [], [], [ms.leg(1, 3), ms.leg(2, 3)])
            return np.sum(ms.factor(1, 3) * ms.factor(2, 3) * v * psi, axis=(1, 2)), 0
        if (p, q) == (1, 1):
            # axes (b, i, j, l): scatter j -> i with spectator l
            if ms.N > 256:
                raise PatternUnsupported("scattering with a spectator needs a small mode set")
            Yb = Y[:, None, None, None] + ms.shift(3, 4)
            v = K(Yb, ext(eo, 3), [ms.leg(1, 4)], ext(ei, 3), [ms.leg(2, 4)])
            Bm = np.sum(ms.factor(1, 4) * ms.factor(2, 4) * v * psi[:, None, :, :], axis=2)
            return Bm + np.swapaxes(Bm, 1, 2), 2
    raise PatternUnsupported(f"factor {fac} with {nfl} photons in flight")


def _dedup_form(kern, legs, is_ext, prim):
    """Quadratic form of a kernel whose external legs repeat along the batch axis.

    The form is built once per distinct external configuration and gathered
    lazily, component by component.  Returns None when there is little
    repetition.
    """
    ext = [l for l, e in zip(legs, is_ext) if e]
    B = ext[0].kmag.shape[0]
    keys = np.concatenate(
        [np.concatenate([l.kmag.reshape(B, 1), l.khat.reshape(B, 3), l.eps.reshape(B, 3)], axis=1) for l in ext], axis=1
    )
    _, idx, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    if len(idx) > B // 2:
        return None
    red = [Leg(l.kmag[idx], l.khat[idx], l.eps[idx]) if e else l for l, e in zip(legs, is_ext)]
    return _GatheredForm(kern.polynomial_form(red, prim), inv.reshape(-1))


class _GatheredForm:
    def __init__(self, form, inv):
        self.f = form
        self.inv = inv

    def __call__(self, Y):
        f, inv = self.f, self.inv
        out = f.c0[inv] * np.ones(Y.shape[:-1])
        for a in f.lin:
            out += Y[..., a] * f.c1[..., a][inv]
        for a, b in f.quad:
            out += ((1.0 if a == b else 2.0) * Y[..., a] * Y[..., b]) * f.c2[..., a, b][inv]
        return out


def _apply_F(st: Stage, psi, nfl, Y, ms: ModeSet):
    key = (ms.label, nfl, Y.shape, Y.tobytes())
    F = st.fcache.get(key)
    if F is None:
        if nfl == 0:
            F = st.F(Y)
        elif nfl == 1:
            F = st.F(Y[:, None] + ms.shift(1, 2))
        else:
            F = st.F(Y[:, None, None] + ms.shift(1, 3) + ms.shift(2, 3))
        if len(st.fcache) >= 6:
            st.fcache.pop(next(iter(st.fcache)))
        st.fcache[key] = F
    return psi * F


def _k4(leg: Leg):
    return np.concatenate([leg.kmag[..., None], leg.kmag[..., None] * leg.khat], axis=-1)


def contract_VL(st: Stage, pattern: Pattern, X, ext_out=(), ext_in=(), outer: bool = True, modes: ModeSet | None = None):
    """Vacuum expectation of one chain for a batch of external configurations.

    Parameters
    ----------
    st : Stage
    pattern : Pattern
    X : ndarray, shape (B, 4)
        Old-scale spectral variables.
    ext_out, ext_in : sequence of Leg
        External photons (old-scale momenta, arrays of shape ``(B,)``),
        assigned to the factors in order.
    outer : bool
        Include the overlap factors at both ends.
    modes : ModeSet, optional
        Internal mode set; chosen from the pattern by default.

    Returns
    -------
    ndarray, shape (B,)
        ``sign * prod(binomials) * V`` (without rescaling).
    """
    X = np.asarray(X, dtype=float)
    B = X.shape[0]
    if len(ext_out) != pattern.M_out or len(ext_in) != pattern.N_out:
        raise ValueError("external legs do not match the pattern")
    for fac in pattern.factors:
        if (fac.M, fac.N) not in st.kernels:
            return np.zeros(B)
    ms = modes or (st.coarse if pattern.needs_coarse else st.fine)
    # leg assignment
    outs, ins = [], []
    io = ii = 0
    for fac in pattern.factors:
        outs.append(list(ext_out[io : io + fac.m]))
        ins.append(list(ext_in[ii : ii + fac.n]))
        io += fac.m
        ii += fac.n
    kout = [sum((_k4(l) for l in o), np.zeros((B, 4))) for o in outs]
    kin = [sum((_k4(l) for l in i), np.zeros((B, 4))) for i in ins]
    L = pattern.L
    X_l = [X + sum(kin[:l], np.zeros((B, 4))) + sum(kout[l + 1 :], np.zeros((B, 4))) for l in range(L)]
    Xt = [X + sum(kin[: l + 1], np.zeros((B, 4))) + sum(kout[l + 1 :], np.zeros((B, 4))) for l in range(L)]
    Xt0 = X + sum(kout, np.zeros((B, 4)))
    width = ms.N ** pattern.max_in_flight
    step = max(1, st.cfg.grids.chunk // max(1, width))
    res = np.empty(B)
    for s in range(0, B, step):
        sl = slice(s, min(B, s + step))
        psi = np.ones(sl.stop - sl.start)
        nfl = 0
        for l in range(L - 1, -1, -1):
            fac = pattern.factors[l]
            eo = [_sub_leg(g, sl, 0) for g in outs[l]]
            ei = [_sub_leg(g, sl, 0) for g in ins[l]]
            psi, nfl = _apply_factor(st, fac, psi, nfl, X_l[l][sl], eo, ei, ms)
            psi = psi * fac.binom
            if l > 0:
                psi = _apply_F(st, psi, nfl, Xt[l - 1][sl], ms)
        if nfl != 0:
            raise PatternUnsupported("chain does not return to the vacuum")
        if outer:
            psi = psi * st.U(Xt0[sl]) * st.U(Xt[L - 1][sl])
        res[sl] = pattern.sign * psi
    return res


# ---------------------------------------------------------------------------
# rescaling


def _x_degree(ch) -> int:
    tdeg = {"eX": 1, "ep": 0, "ee": 0, "e1k2e2k1": 0, "e1k2e2X": 1, "e1Xe2k1": 1, "e1Xe2X": 2}[ch.tensor]
    mdeg = 0 if ch.monomial == "1" else ch.monomial.count("X")
    return tdeg + mdeg


def rescale(k: WickKernel, rho: float, check_tol: float = 1e-8) -> WickKernel:
    """``rho**(M+N-1) * w[rho X; rho K]`` re-interpolated on the standard radial grid.

    The conserved momentum is not rescaled.  The plateau factor, evaluated at
    ``rho |k|``, is absorbed into the coefficients.

    Raises
    ------
    InterpolationLoss
        If the re-interpolated kernel misses the exact rescaled values at
        off-node test points by more than ``check_tol`` (relative).
    """
    from .formfactor import eval_kappa_primitive

    nodes = k.grid.nodes
    pref = rho ** (k.order - 1)
    xfac = np.array([rho ** _x_degree(c) for c in k.channels])
    Bk = k.grid.basis(rho * nodes)
    phi = np.ones_like(nodes) if k.plateau is None else eval_kappa_primitive(k.plateau, rho * nodes)
    leg = (rho**k.sigma) * phi
    if k.order == 1:
        new = (k.coeffs @ Bk.T) * leg[None, :]
    else:
        new = np.einsum("ia,cab,jb->cij", Bk, k.coeffs, Bk) * leg[None, :, None] * leg[None, None, :]
    new = new * (pref * xfac).reshape((-1,) + (1,) * k.order)
    out = WickKernel(k.degree, k.channels, new, k.grid, k.sigma, None, k.p)
    # off-node check
    test = 0.5 * (nodes[1:] + nodes[:-1])[:: max(1, len(nodes) // 8)]
    if test.size and not k.is_zero():
        Bt = k.grid.basis(test)
        Bo = k.grid.basis(rho * test)
        pt = np.ones_like(test) if k.plateau is None else eval_kappa_primitive(k.plateau, rho * test)
        lt = (rho**k.sigma) * pt
        if k.order == 1:
            exact = (k.coeffs @ Bo.T) * lt
            approx = new @ Bt.T
        else:
            exact = np.einsum("ia,cab,jb->cij", Bo, k.coeffs, Bo) * lt[None, :, None] * lt[None, None, :]
            approx = np.einsum("ia,cab,jb->cij", Bt, new, Bt)
            exact = exact * 1.0
        exact = exact * (pref * xfac).reshape((-1,) + (1,) * k.order)
        scale = max(np.max(np.abs(exact)), 1e-300)
        if np.max(np.abs(exact - approx)) > check_tol * scale:
            raise InterpolationLoss("rescaled kernel not resolved by the radial grid")
    return out


# ---------------------------------------------------------------------------
# budgets and reports


@dataclass
class TruncationBudget:
    """Bounds on everything the step does not compute exactly, per output sector.

    Each entry maps an output label (``"00"``, ``"10"``, ``"11"``, ``"20"``)
    to an absolute bound in the sup norm of that sector.
    """

    neumann_tail: dict = field(default_factory=dict)
    window: dict = field(default_factory=dict)
    degree_cap: dict = field(default_factory=dict)
    projection: dict = field(default_factory=dict)
    quadrature: dict = field(default_factory=dict)

    def sector(self, key: str) -> float:
        return sum(d.get(key, 0.0) for d in (self.neumann_tail, self.window, self.degree_cap, self.projection, self.quadrature))

    def total(self) -> float:
        keys = set()
        for d in (self.neumann_tail, self.window, self.degree_cap, self.projection, self.quadrature):
            keys |= set(d)
        return float(sum(self.sector(k) for k in keys))

    def as_dict(self):
        return dict(
            neumann_tail=self.neumann_tail,
            window=self.window,
            degree_cap=self.degree_cap,
            projection=self.projection,
            quadrature=self.quadrature,
            total=self.total(),
        )


@dataclass
class StepReport:
    """Diagnostics of one renormalization step.

    ``dgamma_grad`` / ``dgamma_hess`` are the gradient and Hessian at 0 of the
    degree-(0,0) interaction output in old-scale variables; ``delta0`` is its
    value at 0 and ``ddelta_dE`` its derivative in the constant ``E``.
    ``jet_budget`` bounds the error of these numbers (old-scale units) with
    keys ``value``, ``grad0``, ``grad_sp``, ``hess00`` and ``hess_sp``.
    ``kernel_sizes`` are the weighted sup norms of the input kernels.
    """

    scale: int
    rho: float
    delta0: float
    ddelta_dE: float
    dgamma_grad: np.ndarray
    dgamma_hess: np.ndarray
    budget: TruncationBudget
    C_F: float
    patterns: dict
    fit_residual: dict
    jet_budget: dict = field(default_factory=dict)
    kernel_sizes: dict = field(default_factory=dict)
    U_max: float = 1.0

    @property
    def dgamma1(self) -> float:
        """``d_X0`` of the degree-(0,0) interaction output at 0."""
        return float(self.dgamma_grad[0])

    @property
    def dgamma2(self) -> float:
        """``d^2_{X_par}`` (along ``phat``) of the degree-(0,0) interaction output at 0."""
        return float(self.dgamma_hess[3, 3])


# ---------------------------------------------------------------------------
# output sampling and fits


def _stencil_X(h):
    return taylor_stencil(h)


def _taylor_vector(vals, h):
    """Stencil values (33, ...) -> Taylor vector (15, ...): value, gradient, upper Hessian."""
    f0, g, H = taylor_from_values(vals, h)
    iu = np.triu_indices(4)
    return np.concatenate([f0[None], g, H[iu]], axis=0)


def _deg1_directions(p_positive, nu):
    if not p_positive:
        return np.array([[0.0, 0.0, 1.0]])
    u, _ = roots_legendre(nu)
    return np.stack([np.sqrt(1 - u * u), np.zeros_like(u), u], axis=1)


def _deg1_samples(grid: RadialGrid, dirs, h, npol=2):
    """Batch of (radial node, direction, polarization, stencil point)."""
    S = _stencil_X(h)
    pol = polarization_vectors(dirs)[:, :npol]  # (nd, npol, 3)
    nk, nd, ns = grid.n, len(dirs), len(S)
    km = np.broadcast_to(grid.nodes[:, None, None, None], (nk, nd, npol, ns))
    kh = np.broadcast_to(dirs[None, :, None, None, :], (nk, nd, npol, ns, 3))
    ep = np.broadcast_to(pol[None, :, :, None, :], (nk, nd, npol, ns, 3))
    X = np.broadcast_to(S[None, None, None], (nk, nd, npol, ns, 4))
    return km.reshape(-1), kh.reshape(-1, 3), ep.reshape(-1, 3), X.reshape(-1, 4), (nk, nd, npol, ns)


def _deg2_samples(grid: RadialGrid, ncn, h, p_positive=False):
    S = _stencil_X(h)
    c, _ = roots_legendre(ncn)
    d1 = np.array([0.0, 0.0, 1.0])
    d2 = np.stack([np.sqrt(1 - c * c), np.zeros_like(c), c], axis=1)
    p1 = polarization_vectors(d1)  # (2,3)
    p2 = polarization_vectors(d2)  # (nc,2,3)
    nk, ns = grid.n, len(S)
    shape = (nk, nk, ncn, 2, 2, ns)
    I = np.indices(shape)
    k1 = grid.nodes[I[0]]
    k2 = grid.nodes[I[1]]
    kh1 = np.broadcast_to(d1, shape + (3,))
    kh2 = d2[I[2]]
    e1 = p1[I[3]]
    e2 = p2[I[2], I[4]]
    X = S[I[5]]
    f = lambda a: a.reshape((-1,) + a.shape[len(shape):])
    return f(k1), f(kh1), f(e1), f(k2), f(kh2), f(e2), f(X), shape


def _design(channels, legs_fn, X, h, shape_geo):
    """Taylor vectors of every basis channel at the sampled geometry."""
    feats = channel_features(channels, X, legs_fn())  # (n_geo*ns, nch)
    feats = feats.reshape(shape_geo + (len(channels),))  # (..., ns, nch)
    feats = np.moveaxis(feats, -2, 0)  # (ns, ..., nch)
    tv = _taylor_vector(feats, h)  # (15, ..., nch)
    tv = np.moveaxis(tv, 0, -2)  # (..., 15, nch)
    return tv.reshape(-1, len(channels))


def _fit(design, data):
    """Least squares per column of ``data``; returns coefficients and max residual."""
    coef, *_ = np.linalg.lstsq(design, data, rcond=1e-12)
    resid = design @ coef - data
    return coef, float(np.max(np.abs(resid))) if resid.size else 0.0


# ---------------------------------------------------------------------------
# bounds


def _sup_F(st: Stage, n=400):
    Y0 = np.linspace(0.0, 1.0, n)[1:]
    pts = []
    for r in (0.0, 0.5, 1.0):
        for d in (np.array([0, 0, 1.0]), np.array([0, 0, -1.0]), np.array([1.0, 0, 0])):
            pts.append(np.concatenate([Y0[:, None], (Y0 * r)[:, None] * d[None]], axis=1))
    Y = np.concatenate(pts)
    F = np.abs(st.F(Y))
    U = np.abs(st.U(Y))
    return float(F.max()), float(U.max())


def _kernel_sizes(st: Stage, lattice=SupLattice(level=1, n_X0=3, n_r=2)):
    out = {}
    for d, k in st.fam.all_kernels().items():
        out[d] = 0.0 if k.is_zero() else norm_sigma(k, lattice)
    return out


def _pattern_bound(pat: Pattern, sizes, C_F, U_max):
    b = abs(pat.weight) * (C_F ** (pat.L - 1)) * U_max**2
    for f in pat.factors:
        b *= sizes.get((f.M, f.N), 0.0)
    return b


# ---------------------------------------------------------------------------
# the step


def _window_ok(pat: Pattern, cfg: FlowConfig, deg: int):
    if pat.pairs > cfg.pairs_window[min(deg, 2)] or pat.max_in_flight > 2:
        return False
    return _supported(pat)


def _supported(pat: Pattern, spectator_scattering: bool = False):
    f = 0
    for fac in reversed(pat.factors):
        if fac.p == 1 and fac.q == 1 and f == 2 and not spectator_scattering:
            return False
        if (fac.p, fac.q) == (2, 0) and f != 0:
            return False
        if (fac.p, fac.q) == (0, 2) and f != 2:
            return False
        f = f - fac.q + fac.p
        if f > 2:
            return False
    return True


def _select(st: Stage, cfg: FlowConfig, M, N, sizes, C_F, U_max):
    """Evaluated chains, omitted chains that can be probed, and a norm bound on the rest."""
    keep, probe, rest = [], [], 0.0
    for L in range(1, cfg.L_max + 1):
        for pat in enumerate_patterns(M, N, L):
            b = _pattern_bound(pat, sizes, C_F, U_max)
            if b == 0.0:
                continue
            if _window_ok(pat, cfg, M + N):
                keep.append(pat)
            elif _supported(pat, spectator_scattering=True):
                probe.append(pat)
            else:
                rest += b
    return keep, probe, rest


def _probe_legs(M, N, rho, B):
    """A few external configurations (old-scale momenta) for probing chains."""
    out = []
    dirs = [np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.6, 0.8]), np.array([0.8, 0.0, -0.6])]
    kmags = [0.3, 0.6, 0.9, 0.45]
    for i in range(M + N):
        d = dirs[i % 4]
        e = polarization_vectors(d)[i % 2]
        out.append(Leg(np.full(B, rho * kmags[i % 4]), np.broadcast_to(d, (B, 3)).copy(), np.broadcast_to(e, (B, 3)).copy()))
    return out[:M], out[M:]


_JET_KEYS = ("value", "grad0", "grad_sp", "hess00", "hess_sp")


def _jet(v0, g, H):
    """Sizes of the value, the ``X0`` and spatial gradient and the ``X0`` and spatial Hessian."""
    g, H = np.asarray(g), np.asarray(H)
    return np.array([abs(v0), abs(g[0]), np.max(np.abs(g[1:])), abs(H[0, 0]), np.max(np.abs(H[1:, 1:]))])


_JET_SCALE = lambda rho: np.array([1.0, rho, rho, rho * rho, rho * rho])  # noqa: E731


def _probe_jet(st: Stage, pats):
    """Jet sizes at ``X = 0`` of omitted vacuum chains on the probe modes, old-scale units.

    Returns the summed (value, gradient, Hessian) sizes and the same per chain length.
    """
    if not pats:
        return np.zeros(5), {}
    h = st.cfg.grids.taylor_h * st.rho
    S = taylor_stencil(h)
    by_L = {}
    for pat in pats:
        by_L[pat.L] = by_L.get(pat.L, 0.0) + contract_VL(st, pat, S, (), (), outer=False, modes=st.probe)
    jet_L = {L: _jet(*taylor_from_values(v, h)) for L, v in by_L.items()}
    return _jet(*taylor_from_values(sum(by_L.values()), h)), jet_L


def _probe(st: Stage, pats, M, N):
    """Size of the summed chains in the output normalization, on the probe mode set.

    Value, gradient and Hessian at ``X = 0`` are taken on the stencil and
    scaled as they enter the renormalized kernel.
    """
    if not pats:
        return 0.0
    rho = st.rho
    h = st.cfg.grids.taylor_h * rho
    S = taylor_stencil(h)
    eo, ei = _probe_legs(M, N, rho, len(S))
    val = np.zeros(len(S))
    for pat in pats:
        val = val + contract_VL(st, pat, S, eo, ei, outer=(M + N) > 0, modes=st.probe)
    v0, g, H = taylor_from_values(val, h)
    size = max(abs(v0), rho * np.max(np.abs(g)), rho * rho * np.max(np.abs(H)))
    if M + N == 0:
        return float(size) / rho
    return float(size) * rho ** (M + N - 1) * SQRT_4PI ** (M + N)


def _tail_estimate(per_L: dict, L_max: int, floor: float = 1e-15) -> float:
    """Geometric extrapolation of the chain expansion beyond ``L_max``.

    ``per_L`` maps ``L`` to the largest absolute contribution of all chains of
    that length on the sampled points.  The ratio is the largest measured
    ratio between consecutive lengths.  Entries below ``floor`` are rounding
    noise: they count as zero, and as ``floor`` when bounding the ratio from
    a larger predecessor.
    """
    Ls = sorted(L for L, v in per_L.items() if v > floor)
    if not Ls:
        return 0.0
    ratios = [max(per_L[a + 1], floor) / per_L[a] for a in Ls if a + 1 in per_L]
    if not ratios:
        return math.inf
    q = max(ratios)
    if q >= 1:
        return math.inf
    last = per_L[Ls[-1]] * q ** (L_max - Ls[-1])
    return last * q / (1 - q)


def _primitive_divisor(st: Stage, legs_new_kmag, sigma):
    if st.first or sigma == 0:
        return 1.0
    out = 1.0
    for k in legs_new_kmag:
        out = out * np.power(k, sigma)
    return out


def _eval_sum(st, pats, X, eo, ei, outer=True, per_L=None, by_L=None):
    tot = np.zeros(X.shape[0])
    byL = {} if by_L is None else by_L
    for pat in pats:
        v = contract_VL(st, pat, X, eo, ei, outer)
        byL[pat.L] = byL.get(pat.L, 0.0) + v
        tot = tot + v
    if per_L is not None:
        for L, v in byL.items():
            per_L[L] = max(per_L.get(L, 0.0), float(np.max(np.abs(v))))
    return tot


def _degree0(st: Stage, cfg: FlowConfig, pats):
    """Interpolant, Taylor data at 0 and value at 0 of the degree-(0,0) interaction part."""
    gr = cfg.grids
    rho = st.rho
    cheb = ChebInterp(rho, gr.cheb_x0, gr.cheb_r, gr.cheb_u if cfg.p > 0 else None)
    Ycheb = cheb.points().reshape(-1, 4)
    h = gr.taylor_h * rho
    Ysten = taylor_stencil(h)
    Y = np.concatenate([Ycheb, Ysten])
    per_L, by_L = {}, {}
    vals = _eval_sum(st, pats, Y, [], [], outer=False, per_L=per_L, by_L=by_L)
    cheb.fit(vals[: len(Ycheb)])
    d0, g, H = taylor_from_values(vals[len(Ycheb) :], h)
    delta = JetBlend(cheb, d0, g, H, rho, *gr.jet_blend)
    jet_L = {L: _jet(*taylor_from_values(np.asarray(v)[len(Ycheb) :], h)) for L, v in by_L.items()}
    per_L = dict(values=per_L, jet=jet_L)
    dE = gr.e_step * rho
    zero = np.zeros((1, 4))
    vp = _eval_sum(st.with_E(st.E + dE), pats, zero, [], [], outer=False)[0]
    vm = _eval_sum(st.with_E(st.E - dE), pats, zero, [], [], outer=False)[0]
    return delta, float(d0), g, H, float((vp - vm) / (2 * dE)), per_L


def _legs_from(km, kh, ep):
    return Leg(np.asarray(km, float), np.asarray(kh, float), np.asarray(ep, float))


def _degree1(st: Stage, cfg: FlowConfig, pats, grid: RadialGrid):
    gr = cfg.grids
    rho = st.rho
    p_pos = cfg.p > 0
    channels = degree1_channels(p_pos, gr.lmax_p)
    dirs = _deg1_directions(p_pos, gr.n_unodes)
    # at p = 0 the second polarization follows by rotation about khat
    npol = 2 if p_pos else 1
    h = gr.taylor_h
    km, kh, ep, X, shape = _deg1_samples(grid, dirs, h, npol)
    legs_old = [_legs_from(rho * km, kh, ep)]
    per_L = {}
    V = _eval_sum(st, pats, rho * X, legs_old, [], outer=True, per_L=per_L)
    V = V / _primitive_divisor(st, [km], cfg.sigma)
    V = V.reshape(shape)  # (nk, nd, npol, ns)
    data = _taylor_vector(np.moveaxis(V, -1, 0), h)  # (15, nk, nd, npol)
    data = np.moveaxis(data, 0, -1).reshape(grid.n, -1).T  # (nd*npol*15, nk)
    # the basis does not depend on |k|: one design matrix for all radial nodes
    nd, ns = len(dirs), shape[-1]
    pol = polarization_vectors(dirs)[:, :npol]
    S = taylor_stencil(h)
    khg = np.broadcast_to(dirs[:, None, None, :], (nd, npol, ns, 3)).reshape(-1, 3)
    epg = np.broadcast_to(pol[:, :, None, :], (nd, npol, ns, 3)).reshape(-1, 3)
    Xg = np.broadcast_to(S[None, None], (nd, npol, ns, 4)).reshape(-1, 4)
    legs_fn = lambda: [Leg(np.ones(len(Xg)), khg, epg)]
    A = _design(channels, legs_fn, Xg, h, (nd, npol, ns))
    coef, resid = _fit(A, data)
    return channels, coef, resid, per_L


def _degree2(st: Stage, cfg: FlowConfig, pats_by_deg, grid: RadialGrid):
    gr = cfg.grids
    rho = st.rho
    h = gr.taylor_h
    channels = degree2_channels(gr.lmax_c)
    k1, kh1, e1, k2, kh2, e2, X, shape = _deg2_samples(grid, gr.n_cnodes, h)
    L1 = _legs_from(rho * k1, kh1, e1)
    L2 = _legs_from(rho * k2, kh2, e2)
    div = _primitive_divisor(st, [k1, k2], cfg.sigma)
    out = {}
    # design
    nk, _, nc, _, _, ns = shape
    c, _ = roots_legendre(gr.n_cnodes)
    d2 = np.stack([np.sqrt(1 - c * c), np.zeros_like(c), c], axis=1)
    p1 = polarization_vectors(np.array([0.0, 0.0, 1.0]))
    p2 = polarization_vectors(d2)
    S = taylor_stencil(h)
    gshape = (nc, 2, 2, ns)
    I = np.indices(gshape)
    legs_fn = lambda: [
        Leg(np.ones(I[0].size), np.broadcast_to([0.0, 0.0, 1.0], (I[0].size, 3)), p1[I[1]].reshape(-1, 3)),
        Leg(np.ones(I[0].size), d2[I[0]].reshape(-1, 3), p2[I[0], I[2]].reshape(-1, 3)),
    ]
    A = _design(channels, legs_fn, S[I[3]].reshape(-1, 4), h, gshape)
    for (M, N), pats in pats_by_deg.items():
        per_L = {}
        if not pats:
            out[(M, N)] = (channels, np.zeros((len(channels), nk, nk)), 0.0, per_L)
            continue
        if (M, N) == (1, 1):
            V = _eval_sum(st, pats, rho * X, [L1], [L2], per_L=per_L)
        else:
            V = 0.5 * (_eval_sum(st, pats, rho * X, [L1, L2], [], per_L=per_L)
                       + _eval_sum(st, pats, rho * X, [L2, L1], [], per_L=per_L))
        V = (V / div).reshape(shape)
        data = _taylor_vector(np.moveaxis(V, -1, 0), h)  # (15, nk, nk, nc, 2, 2)
        data = np.moveaxis(data, 0, -1).reshape(nk * nk, -1).T
        coef, resid = _fit(A, data)
        out[(M, N)] = (channels, coef.reshape(len(channels), nk, nk), resid, per_L)
    return out


def _quadrature_estimate(st: Stage, cfg: FlowConfig, pats0):
    """Difference between the fine and the coarse mode set on the leading degree-(0,0) chain."""
    lead = [p for p in pats0 if p.L == 2 and p.max_in_flight == 1 and not p.needs_coarse]
    if not lead:
        return np.zeros(5)
    h = cfg.grids.taylor_h * st.rho
    S = taylor_stencil(h)
    a = sum(contract_VL(st, p, S, (), (), False, st.fine) for p in lead)
    b = sum(contract_VL(st, p, S, (), (), False, st.coarse) for p in lead)
    a0, ga, Ha = taylor_from_values(a, h)
    b0, gb, Hb = taylor_from_values(b, h)
    return _jet(a0 - b0, ga - gb, Ha - Hb)


def renormalize(w: KernelFamily, cfg: FlowConfig, modes=None):
    """One renormalization step (the first decimation when ``w.scale == -1``).

    Parameters
    ----------
    w : KernelFamily
    cfg : FlowConfig
    modes : (ModeSet, ModeSet), optional
        Fine and coarse internal mode sets; built from ``cfg.grids`` by default.

    Returns
    -------
    (KernelFamily, StepReport)
        The family at the next scale, evaluated at ``z' = E / rho``, and the
        diagnostics, including the :class:`TruncationBudget`.
    """
    st = Stage(w, cfg, modes=modes)
    rho = st.rho
    gr = cfg.grids
    C_F, U_max = _sup_F(st)
    sizes = _kernel_sizes(st)
    budget = TruncationBudget()
    pats = {}
    jet, probe_L = np.zeros(5), {}
    for key, (M, N) in (("00", (0, 0)), ("10", (1, 0)), ("11", (1, 1)), ("20", (2, 0))):
        keep, probe, rest = _select(st, cfg, M, N, sizes, C_F, U_max)
        pats[key] = keep
        budget.window[key] = _probe(st, probe, M, N) + rho ** (M + N - 1) * rest
        if key == "00":
            jet, probe_L = _probe_jet(st, probe)
            jet = jet + rest / _JET_SCALE(rho)
    # degree-cap spillover: chains producing outputs of degree 3 and 4
    spill = 0.0
    for (M, N) in ((3, 0), (2, 1), (4, 0), (3, 1), (2, 2)):
        probe, rest = [], 0.0
        for L in range(2, cfg.L_max + 1):
            for pat in enumerate_patterns(M, N, L):
                if _supported(pat, spectator_scattering=True):
                    probe.append(pat)
                else:
                    rest += rho ** (M + N - 1) * _pattern_bound(pat, sizes, C_F, U_max)
        # (N, M) sectors are Hermitian partners
        spill += (1 if M == N else 2) * (_probe(st, probe, M, N) + rest)
    budget.degree_cap["w1"] = spill

    # degree (0,0)
    if pats["00"]:
        cheb, d0, gD, HD, dD, perL = _degree0(st, cfg, pats["00"])
        quad_jet = _quadrature_estimate(st, cfg, pats["00"])
        budget.quadrature["00"] = float(np.max(quad_jet * _JET_SCALE(rho))) / rho
        budget.neumann_tail["00"] = None
        # chain lengths seen by the kept and the probed chains together
        jet_L = dict(perL["jet"])
        for L, v in probe_L.items():
            jet_L[L] = jet_L.get(L, 0.0) + v
        tail_jet = np.array([_tail_estimate({L: v[i] for L, v in jet_L.items()}, cfg.L_max) for i in range(5)])
        vals_L = dict(perL["values"])
        for L, v in probe_L.items():
            vals_L[L] = vals_L.get(L, 0.0) + float(np.max(v * _JET_SCALE(rho)))
        budget.neumann_tail["00"] = _tail_estimate(vals_L, cfg.L_max) / rho
        jet = jet + quad_jet + tail_jet
    else:
        cheb, d0, gD, HD, dD = _Zero(), 0.0, np.zeros(4), np.zeros((4, 4)), 0.0
    gT, HT = w.T.taylor()
    taylor_new = (np.asarray(gT) + gD, rho * (np.asarray(HT) + HD))
    Tnew = ComposedT(w.T, st.E, rho, cfg.profile, cheb, taylor_new, first=st.first, p=cfg.p, tgrid=gr.tgrid)
    E_new = (st.E + d0) / rho
    z_new = w.z if st.first else st.E / rho

    # degree one and two
    g1 = RadialGrid(gr.radial_n1)
    g2 = RadialGrid(gr.radial_n2)
    plateau = cfg.formfactor if st.first else None
    kernels = {}
    fit_res = {}
    if pats["10"]:
        ch1, c1, r1, perL = _degree1(st, cfg, pats["10"], g1)
        if np.any(c1):
            kernels[(1, 0)] = WickKernel((1, 0), ch1, c1, g1, cfg.sigma, plateau, cfg.p)
        fit_res["10"] = r1
        budget.projection["10"] = SQRT_4PI * r1
        budget.neumann_tail["10"] = SQRT_4PI * _tail_estimate(perL, cfg.L_max)
    d2 = _degree2(st, cfg, {(1, 1): pats["11"], (2, 0): pats["20"]}, g2)
    for (M, N), (ch, cf, r, perL) in d2.items():
        key = f"{M}{N}"
        if np.any(cf):
            kernels[(M, N)] = WickKernel((M, N), ch, rho * cf, g2, cfg.sigma, plateau, cfg.p)
        fit_res[key] = r
        budget.projection[key] = 4 * np.pi * rho * r
        budget.neumann_tail[key] = 4 * np.pi * rho * _tail_estimate(perL, cfg.L_max)
    fam = KernelFamily(
        scale=w.scale + 1,
        z=z_new,
        E=E_new,
        T=Tnew,
        w=kernels,
        p=cfg.p,
        sigma=cfg.sigma,
        xi=cfg.xi,
        dE=1.0 + dD,
        meta=dict(first=st.first, g=w.meta.get("g")),
    )
    rep = StepReport(
        scale=w.scale,
        rho=rho,
        delta0=d0,
        ddelta_dE=dD,
        dgamma_grad=gD,
        dgamma_hess=HD,
        budget=budget,
        C_F=C_F,
        patterns={k: len(v) for k, v in pats.items()},
        fit_residual=fit_res,
        jet_budget={k: float(v) for k, v in zip(_JET_KEYS, jet)},
        kernel_sizes={f"{M}{N}": float(v) for (M, N), v in sizes.items()},
        U_max=U_max,
    )
    if budget.total() > cfg.budget_ceiling:
        raise BudgetBlown(f"truncation budget {budget.total():.3e} exceeds ceiling")
    return fam, rep

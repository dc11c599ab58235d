"""Generalized Wick kernels, their norms and polydisc membership.

A kernel of degree ``(M, N)`` is stored in a rotation-covariant tensor basis.
Each basis element is a product of

* a polarization tensor (``<eps, X>``, ``<eps, eps'>``, ...),
* a monomial in the spectral variables ``X = (X0, Xvec)`` of total order at
  most two (together with the tensor),
* a Legendre polynomial in an angle (``khat . phat`` for degree one at
  ``p > 0``, ``khat . khat'`` for degree two),

multiplied by a radial coefficient stored at Gauss-Legendre nodes of
``|k|`` and interpolated by a Legendre series.  Every photon leg also carries
``|k|**sigma`` times an optional plateau ``phi(|k|)``; the remaining factor is
the ``|k|**(-sigma)``-primitive used by the sum rules.

The degree-(0,0) sector is split into a constant ``E`` and a function ``T``
with ``T[0] = 0``; ``T = X0 + chi_1(X0)**2 * Ttilde``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.special import roots_legendre

from .formfactor import CutoffProfile, FormFactor, eval_chi_sq, eval_chibar_sq, eval_kappa_primitive
from .quadrature import polarization_vectors

__all__ = [
    "EmptyGrid",
    "MissingDerivatives",
    "SpectralPoint",
    "PhotonArg",
    "Leg",
    "RadialGrid",
    "Channel",
    "degree1_channels",
    "degree2_channels",
    "WickKernel",
    "TKernel",
    "AnalyticT",
    "KernelFamily",
    "PolydiscParams",
    "SupLattice",
    "norm_sigma",
    "norm_sigma_sharp",
    "norm_T",
    "norm_T_parts",
    "norm_family",
    "in_polydisc",
    "compute_K_Theta",
    "taylor_stencil",
    "taylor_from_stencil",
    "kernel_to_dict",
    "kernel_from_dict",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = "wickrg.kernel/1"
PHAT = np.array([0.0, 0.0, 1.0])
SQRT_4PI = 2.0 * np.sqrt(np.pi)


class EmptyGrid(ValueError):
    pass


class MissingDerivatives(ValueError):
    pass


@dataclass(frozen=True)
class SpectralPoint:
    """Spectral variables ``(X0, Xvec)`` of ``(H_f, P_f)`` with ``|Xvec| <= X0 <= 1``."""

    X0: float
    Xvec: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0.0 <= self.X0 <= 1.0:
            raise ValueError("X0 must lie in [0, 1]")
        if np.linalg.norm(self.Xvec) > self.X0 * (1 + 1e-12):
            raise ValueError("|Xvec| must not exceed X0")

    def as_array(self) -> np.ndarray:
        return np.array([self.X0, *self.Xvec], dtype=float)


@dataclass(frozen=True)
class PhotonArg:
    """Photon argument ``K = (k, lambda)`` with ``k = kmag * khat`` and ``pol`` in ``{+1, -1}``."""

    kmag: float
    khat: tuple
    pol: int = 1

    def __post_init__(self):
        if not 0.0 < self.kmag <= 1.0:
            raise ValueError("kmag must lie in (0, 1]")
        if abs(np.linalg.norm(self.khat) - 1.0) > 1e-12:
            raise ValueError("khat must be a unit vector")
        if self.pol not in (1, -1):
            raise ValueError("pol must be +1 or -1")

    def leg(self) -> "Leg":
        kh = np.asarray(self.khat, dtype=float)
        eps = polarization_vectors(kh)[0 if self.pol == 1 else 1]
        return Leg(np.asarray(self.kmag, dtype=float), kh, eps)


@dataclass
class Leg:
    """Broadcastable photon leg data: magnitude, direction and polarization vector.

    ``basis`` optionally caches radial interpolation rows for this leg's
    magnitudes (shape ``kmag.shape + (n_nodes,)``), keyed by the grid size.
    """

    kmag: np.ndarray
    khat: np.ndarray
    eps: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def kvec(self) -> np.ndarray:
        return self.kmag[..., None] * self.khat


class RadialGrid:
    """Piecewise Gauss-Legendre nodes on ``(0, breaks[-1])`` with Legendre interpolation per panel.

    Panels are ``[0, b0], [b0, b1], ...``; every panel carries ``n // len(breaks)``
    nodes.  Renormalized kernels have a ``C^2`` kink where the overlap cutoff
    switches on, so the default panel edge sits there.
    """

    def __init__(self, n: int, breaks=(0.75, 1.0)):
        self.breaks = tuple(float(b) for b in breaks)
        panels = len(self.breaks)
        if n % panels:
            raise ValueError("node count must be divisible by the number of panels")
        self.n = int(n)
        self.m = self.n // panels
        x, w = roots_legendre(self.m)
        V = npleg.legvander(x, self.m - 1)
        norms = 2.0 / (2.0 * np.arange(self.m) + 1.0)
        self._to_coef = (V * w[:, None]).T / norms[:, None]
        D = np.zeros((self.m, self.m))
        for j in range(self.m):
            e = np.zeros(self.m)
            e[j] = 1.0
            d = npleg.legder(e)
            D[: len(d), j] = d
        self._deriv = D @ self._to_coef
        self.edges = (0.0,) + self.breaks
        nodes = []
        for a, b in zip(self.edges[:-1], self.edges[1:]):
            nodes.append(a + 0.5 * (b - a) * (x + 1.0))
        self.nodes = np.concatenate(nodes)

    @property
    def kmax(self) -> float:
        return self.breaks[-1]

    def basis(self, k, derivative: int = 0) -> np.ndarray:
        """Rows mapping nodal values to values (or first derivatives) at ``k``."""
        k = np.asarray(k, dtype=float)
        flat = k.reshape(-1)
        out = np.zeros((flat.size, self.n))
        npan = len(self.breaks)
        for j, (a, b) in enumerate(zip(self.edges[:-1], self.edges[1:])):
            lo = -np.inf if j == 0 else a
            hi = np.inf if j == npan - 1 else b
            mask = (flat >= lo) & (flat < hi)
            if not np.any(mask):
                continue
            x = 2.0 * (flat[mask] - a) / (b - a) - 1.0
            V = npleg.legvander(x, self.m - 1)
            rows = V @ (self._to_coef if derivative == 0 else self._deriv * (2.0 / (b - a)))
            out[np.ix_(np.nonzero(mask)[0], np.arange(j * self.m, (j + 1) * self.m))] = rows
        return out.reshape(k.shape + (self.n,))

    def __eq__(self, other):
        return isinstance(other, RadialGrid) and self.n == other.n and self.breaks == other.breaks

    def __hash__(self):
        return hash((self.n, self.breaks))


@dataclass(frozen=True)
class Channel:
    """One tensor-basis element: tensor tag, monomial tag and Legendre order."""

    tensor: str
    monomial: str
    ell: int = 0

    @property
    def tag(self) -> str:
        return f"{self.tensor}|{self.monomial}|P{self.ell}"


_MONO2_1 = ["1", "X0", "Xk", "Xp", "X0X0", "X0Xk", "X0Xp", "XkXk", "XpXp", "XkXp", "XX"]
_MONO2_2 = ["1", "X0", "Xk1", "Xk2", "X0X0", "X0Xk1", "X0Xk2", "Xk1Xk1", "Xk2Xk2", "Xk1Xk2", "XX"]


def degree1_channels(p_positive: bool, lmax: int = 2) -> tuple:
    """Channels for degree (1,0) and (0,1) kernels.

    At ``p = 0`` only ``<eps, X> * {1, X0, X.khat}`` survive rotation covariance
    and the Taylor order; for ``p > 0`` the ``<eps, phat>`` tensor and
    Legendre dependence on ``khat . phat`` are added.
    """
    if not p_positive:
        return tuple(Channel("eX", m) for m in ("1", "X0", "Xk"))
    out = []
    for ell in range(lmax + 1):
        out += [Channel("eX", m, ell) for m in ("1", "X0", "Xk", "Xp")]
        out += [Channel("ep", m, ell) for m in _MONO2_1]
    return tuple(out)


def degree2_channels(lmax: int = 2) -> tuple:
    """Channels for degree-two kernels (legs 1 and 2 in slot order)."""
    out = []
    for ell in range(lmax + 1):
        out += [Channel("ee", m, ell) for m in _MONO2_2]
        out += [Channel("e1k2e2k1", m, ell) for m in _MONO2_2]
    out += [Channel("e1k2e2X", m) for m in ("1", "X0", "Xk1", "Xk2")]
    out += [Channel("e1Xe2k1", m) for m in ("1", "X0", "Xk1", "Xk2")]
    out += [Channel("e1Xe2X", "1")]
    return tuple(out)


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _legendre(ell, x):
    if ell == 0:
        return np.ones_like(x)
    if ell == 1:
        return x
    if ell == 2:
        return 1.5 * x * x - 0.5
    return npleg.legval(x, np.eye(ell + 1)[ell])


class _Geometry:
    """Lazily computed scalar invariants of ``(Y, legs)`` shared by all channels."""

    def __init__(self, Y, legs):
        self.Y = np.asarray(Y, dtype=float)
        self.legs = legs
        self._c = {}

    def get(self, tag):
        if tag in self._c:
            return self._c[tag]
        Y0, Yv = self.Y[..., 0], self.Y[..., 1:]
        L = self.legs
        if tag == "X0":
            v = Y0
        elif tag == "XX":
            v = _dot(Yv, Yv)
        elif tag == "Xp":
            v = Yv[..., 2]
        elif tag == "Xk":
            v = _dot(Yv, L[0].khat)
        elif tag == "Xk1":
            v = _dot(Yv, L[0].khat)
        elif tag == "Xk2":
            v = _dot(Yv, L[1].khat)
        elif tag == "eX":
            v = _dot(L[0].eps, Yv)
        elif tag == "ep":
            v = L[0].eps[..., 2]
        elif tag == "ee":
            v = _dot(L[0].eps, L[1].eps)
        elif tag == "e1k2":
            v = _dot(L[0].eps, L[1].khat)
        elif tag == "e2k1":
            v = _dot(L[1].eps, L[0].khat)
        elif tag == "e1X":
            v = _dot(L[0].eps, Yv)
        elif tag == "e2X":
            v = _dot(L[1].eps, Yv)
        elif tag == "e1k2e2k1":
            v = self.get("e1k2") * self.get("e2k1")
        elif tag == "e1k2e2X":
            v = self.get("e1k2") * self.get("e2X")
        elif tag == "e1Xe2k1":
            v = self.get("e1X") * self.get("e2k1")
        elif tag == "e1Xe2X":
            v = self.get("e1X") * self.get("e2X")
        elif tag == "ang":
            v = L[0].khat[..., 2] if len(L) == 1 else _dot(L[0].khat, L[1].khat)
        elif tag.startswith("P"):
            v = _legendre(int(tag[1:]), self.get("ang"))
        else:
            for a in ("X0", "Xk1", "Xk2", "Xk", "Xp", "XX"):
                if tag.startswith(a) and tag != a:
                    v = self.get(a) * self.get(tag[len(a):])
                    break
            else:
                raise KeyError(tag)
        self._c[tag] = v
        return v

    def channel(self, ch: "Channel"):
        v = self.get(ch.tensor)
        if ch.monomial != "1":
            v = v * self.get(ch.monomial)
        if ch.ell:
            v = v * self.get(f"P{ch.ell}")
        return v


def channel_features(channels: Sequence[Channel], Y, legs: Sequence[Leg]) -> np.ndarray:
    """Values of the tensor-basis elements, stacked on a trailing axis.

    Parameters
    ----------
    channels : sequence of Channel
    Y : ndarray, shape (..., 4)
        Spectral variables.
    legs : sequence of Leg
        One leg (degree one) or two legs in slot order (degree two).
    """
    geo = _Geometry(Y, legs)
    cols = [geo.channel(ch) for ch in channels]
    shape = np.broadcast_shapes(*[np.shape(c) for c in cols], np.shape(Y)[:-1])
    return np.stack([np.broadcast_to(c, shape) for c in cols], axis=-1)


@dataclass
class WickKernel:
    """Degree-(M, N) kernel in the covariant tensor basis.

    Attributes
    ----------
    degree : tuple of int
        ``(M, N)`` with ``M + N`` in ``{1, 2}``.
    channels : tuple of Channel
    coeffs : ndarray
        Shape ``(n_channels, n_r)`` for degree one and
        ``(n_channels, n_r, n_r)`` for degree two.  Radial coefficients of the
        ``|k|**(-sigma)``-primitive divided by the plateau.
    grid : RadialGrid
    sigma : float
    plateau : FormFactor or None
        If set, every leg is additionally multiplied by the plateau of this
        form factor.
    p : float
        Conserved momentum magnitude (along z).
    """

    degree: tuple
    channels: tuple
    coeffs: np.ndarray
    grid: RadialGrid
    sigma: float = 0.0
    plateau: FormFactor | None = None
    p: float = 0.0

    def __post_init__(self):
        M, N = self.degree
        if M + N not in (1, 2):
            raise ValueError("stored kernels have degree 1 or 2")
        exp = (len(self.channels),) + (self.grid.n,) * (M + N)
        if self.coeffs.shape != exp:
            raise ValueError(f"coeffs shape {self.coeffs.shape} != {exp}")

    @property
    def order(self) -> int:
        return sum(self.degree)

    def scaled(self, c: float) -> "WickKernel":
        return WickKernel(self.degree, self.channels, c * self.coeffs, self.grid, self.sigma, self.plateau, self.p)

    def __add__(self, other: "WickKernel") -> "WickKernel":
        if other.channels != self.channels or other.grid != self.grid or other.degree != self.degree:
            raise ValueError("incompatible kernels")
        if (self.plateau is None) != (other.plateau is None):
            raise ValueError("incompatible plateaus")
        return WickKernel(self.degree, self.channels, self.coeffs + other.coeffs, self.grid, self.sigma, self.plateau, self.p)

    def is_zero(self) -> bool:
        return not np.any(self.coeffs)

    def _radial_rows(self, leg: Leg, derivative=0):
        key = (self.grid.n, self.grid.breaks, derivative)
        if key not in leg.cache:
            leg.cache[key] = self.grid.basis(leg.kmag, derivative)
        return leg.cache[key]

    def leg_factor(self, leg: Leg, primitive=False, derivative=0):
        """``|k|**sigma * phi(|k|)`` (or 1 for a primitive leg)."""
        if primitive:
            if derivative:
                return np.zeros_like(leg.kmag)
            return np.ones_like(leg.kmag)
        phi = 1.0 if self.plateau is None else eval_kappa_primitive(self.plateau, leg.kmag)
        f = np.power(leg.kmag, self.sigma) * phi if self.sigma else phi * np.ones_like(leg.kmag)
        return f

    def active_channels(self, rtol: float = 0.0):
        """Indices of channels with nonzero radial coefficients."""
        mags = np.max(np.abs(self.coeffs.reshape(len(self.channels), -1)), axis=1)
        top = mags.max() if mags.size else 0.0
        return [i for i, m in enumerate(mags) if m > rtol * top and m > 0]

    def coefficient_values(self, legs: Sequence[Leg], radial_derivative=None) -> np.ndarray:
        """Radial coefficients interpolated at the legs, shape ``(..., n_channels)``."""
        if self.order == 1:
            B = self._radial_rows(legs[0], 1 if radial_derivative == 0 else 0)
            return B @ self.coeffs.T
        B1 = self._radial_rows(legs[0], 1 if radial_derivative == 0 else 0)
        B2 = self._radial_rows(legs[1], 1 if radial_derivative == 1 else 0)
        tmp = np.tensordot(B1, self.coeffs, axes=([-1], [1]))  # (..., c, j)
        return np.einsum("...cj,...j->...c", tmp, B2)

    def _unique_coefficients(self, legs, active, radial_derivative=None):
        """Radial coefficients of the active channels on the legs' broadcast shape.

        Interpolation is done once per distinct ``|k|`` and gathered, which
        keeps the cost independent of how often a magnitude repeats.
        """
        shape = np.broadcast_shapes(*[np.shape(l.kmag) for l in legs])
        rows, invs = [], []
        for i, lg in enumerate(legs):
            u, inv = np.unique(np.asarray(lg.kmag, dtype=float), return_inverse=True)
            rows.append(self.grid.basis(u, 1 if radial_derivative == i else 0))
            invs.append(np.broadcast_to(inv.reshape(np.shape(lg.kmag)), shape))
        C = self.coeffs[active]
        if self.order == 1:
            tab = C @ rows[0].T  # (c, u)
            return [tab[j][invs[0]] for j in range(len(active))]
        tab = np.einsum("ia,cab,jb->cij", rows[0], C, rows[1], optimize=True)
        return [tab[j][invs[0], invs[1]] for j in range(len(active))]

    def _leg_factors(self, legs, primitive):
        f = 1.0
        for i, lg in enumerate(legs):
            if not primitive[i]:
                f = f * self.leg_factor(lg)
        return f

    def polynomial_form(self, legs: Sequence[Leg], primitive=None, radial_derivative=None):
        """Coefficients ``(c0, c1, c2)`` with ``w(Y) = c0 + c1 . Y + Y . c2 . Y``.

        Every basis element is at most quadratic in the spectral variables, so
        the kernel is fixed by 15 arrays on the legs' broadcast shape.  The
        form is meant to be reused across many values of ``Y``.
        """
        if primitive is None:
            primitive = (False,) * len(legs)
        shape = np.broadcast_shapes(*[np.shape(l.kmag) for l in legs])
        c0 = np.zeros(shape)
        c1 = np.zeros(shape + (4,))
        c2 = np.zeros(shape + (4, 4))
        active = self.active_channels()
        if active:
            geo = _Geometry(np.zeros(4), legs)
            coefs = self._unique_coefficients(legs, active, radial_derivative)
            for cf, c in zip(coefs, active):
                const, lins, quad = _channel_poly(self.channels[c], geo, legs)
                w = cf * const
                if quad:
                    for a in (1, 2, 3):
                        c2[..., a, a] += w
                elif len(lins) == 0:
                    c0 += w
                elif len(lins) == 1:
                    c1 += w[..., None] * lins[0]
                else:
                    c2 += w[..., None, None] * lins[0][..., :, None] * lins[1][..., None, :]
        f = self._leg_factors(legs, primitive)
        c2 = 0.5 * (c2 + np.swapaxes(c2, -1, -2))
        return _PolyForm(c0 * f, c1 * np.asarray(f)[..., None], c2 * np.asarray(f)[..., None, None])

    def evaluate(self, Y, legs: Sequence[Leg], primitive: Sequence[bool] | None = None, radial_derivative=None,
                 form: "_PolyForm | None" = None):
        """Kernel values at spectral variables ``Y`` and photon legs.

        Parameters
        ----------
        Y : ndarray, shape (..., 4)
        legs : sequence of Leg
            Creation legs first, then annihilation legs.
        primitive : sequence of bool, optional
            Legs for which the factor ``|k|**sigma * phi`` is omitted.
        radial_derivative : int, optional
            Index of a leg whose primitive is differentiated in ``|k|``.
        form : _PolyForm, optional
            Precomputed :meth:`polynomial_form` for these legs.

        Notes
        -----
        When ``Y`` carries batch axes that the legs do not, the kernel is
        evaluated through its quadratic form in ``Y``.
        """
        if primitive is None:
            primitive = (False,) * len(legs)
        Y = np.asarray(Y, dtype=float)
        if form is not None:
            return form(Y)
        leg_shape = np.broadcast_shapes(*[np.shape(l.kmag) for l in legs])
        full = np.broadcast_shapes(Y.shape[:-1], leg_shape)
        if int(np.prod(full)) > 2 * int(np.prod(leg_shape)):
            return self.polynomial_form(legs, primitive, radial_derivative)(Y)
        val = np.zeros(full)
        active = self.active_channels()
        if active:
            geo = _Geometry(Y, legs)
            coefs = self._unique_coefficients(legs, active, radial_derivative)
            for cf, c in zip(coefs, active):
                val = val + cf * geo.channel(self.channels[c])
        return val * self._leg_factors(legs, primitive)


class _PolyForm:
    """Quadratic form ``c0 + c1 . Y + Y . c2 . Y`` with leg-shaped coefficients."""

    def __init__(self, c0, c1, c2):
        self.c0, self.c1, self.c2 = c0, c1, c2
        self.lin = [a for a in range(4) if np.any(c1[..., a])]
        self.quad = [(a, b) for a in range(4) for b in range(a, 4) if np.any(c2[..., a, b])]

    def _features(self, Y):
        f = [np.ones(Y.shape[:-1])] + [Y[..., a] for a in self.lin]
        f += [(1.0 if a == b else 2.0) * Y[..., a] * Y[..., b] for a, b in self.quad]
        c = [self.c0] + [self.c1[..., a] for a in self.lin] + [self.c2[..., a, b] for a, b in self.quad]
        return np.stack(f, axis=-1), np.stack(c, axis=-1)

    def _outer(self, Y, ys, cs):
        # Y and the coefficients vary along disjoint axes: one matrix product
        F, C = self._features(Y)
        yax = [i for i, n in enumerate(ys) if n > 1]
        cax = [i for i, n in enumerate(cs) if n > 1]
        R = F.reshape(-1, F.shape[-1]) @ C.reshape(-1, C.shape[-1]).T
        R = R.reshape([ys[i] for i in yax] + [cs[i] for i in cax])
        order = np.argsort(yax + cax)
        full = tuple(max(a, b) for a, b in zip(ys, cs))
        return np.transpose(R, order).reshape(full)

    def __call__(self, Y):
        Y = np.asarray(Y, dtype=float)
        shape = np.broadcast_shapes(Y.shape[:-1], np.shape(self.c0))
        nd = len(shape)
        ys = (1,) * (nd - Y.ndim + 1) + Y.shape[:-1]
        cs = (1,) * (nd - np.ndim(self.c0)) + np.shape(self.c0)
        if int(np.prod(shape)) > 4096 and all(a == 1 or b == 1 for a, b in zip(ys, cs)):
            return self._outer(Y.reshape(ys + (4,)), ys, cs)
        out = np.broadcast_to(self.c0, shape).copy()
        for a in self.lin:
            out += Y[..., a] * self.c1[..., a]
        for a, b in self.quad:
            f = 1.0 if a == b else 2.0
            out += (f * Y[..., a] * Y[..., b]) * self.c2[..., a, b]
        return out


_E0 = np.array([1.0, 0.0, 0.0, 0.0])
_EP = np.array([0.0, 0.0, 0.0, 1.0])


def _lin(v3):
    v3 = np.asarray(v3, dtype=float)
    return np.concatenate([np.zeros(v3.shape[:-1] + (1,)), v3], axis=-1)


def _channel_poly(ch: "Channel", geo: "_Geometry", legs):
    """Split a channel into a Y-independent factor and its linear forms in Y."""
    L = legs
    lins = []
    const = 1.0
    t = ch.tensor
    if t == "eX":
        lins.append(_lin(L[0].eps))
    elif t == "ep":
        const = const * geo.get("ep")
    elif t == "ee":
        const = const * geo.get("ee")
    elif t == "e1k2e2k1":
        const = const * geo.get("e1k2e2k1")
    elif t == "e1k2e2X":
        const = const * geo.get("e1k2")
        lins.append(_lin(L[1].eps))
    elif t == "e1Xe2k1":
        const = const * geo.get("e2k1")
        lins.append(_lin(L[0].eps))
    elif t == "e1Xe2X":
        lins += [_lin(L[0].eps), _lin(L[1].eps)]
    else:
        raise KeyError(t)
    quad = False
    m = ch.monomial
    forms = {"X0": _E0, "Xp": _EP}
    while m != "1" and m:
        if m == "XX":
            quad = True
            break
        for a in ("X0", "Xk1", "Xk2", "Xk", "Xp"):
            if m.startswith(a):
                if a in forms:
                    lins.append(forms[a])
                elif a in ("Xk", "Xk1"):
                    lins.append(_lin(L[0].khat))
                else:
                    lins.append(_lin(L[1].khat))
                m = m[len(a):]
                break
        else:
            raise KeyError(ch.monomial)
    if ch.ell:
        const = const * geo.get(f"P{ch.ell}")
    if quad and lins:
        raise ValueError("channel above quadratic order")
    return np.asarray(const, dtype=float), lins, quad


# ---------------------------------------------------------------------------
# degree-(0,0) sector


class TKernel:
    """Base class for ``Ttilde``; ``T = X0 + chi_1(X0)**2 * Ttilde``.

    Subclasses implement :meth:`tilde`.  ``taylor`` holds the gradient and
    Hessian of ``Ttilde`` at the origin in the variables ``(X0, X1, X2, X3)``.
    """

    profile: CutoffProfile = CutoffProfile()
    unbounded: bool = False

    def tilde(self, X) -> np.ndarray:
        raise NotImplementedError

    def tilde_fast(self, X) -> np.ndarray:
        return self.tilde(X)

    def full(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.unbounded:
            return X[..., 0] + self.tilde(X)
        return X[..., 0] + eval_chi_sq(self.profile, 1.0, X[..., 0]) * self.tilde(X)

    def taylor(self):
        g, H = taylor_from_stencil(self.tilde, h=1e-3)
        return g, H


class AnalyticT(TKernel):
    """``Ttilde`` given by a closed-form callable."""

    def __init__(self, func: Callable, profile: CutoffProfile = CutoffProfile(), unbounded=False, label=""):
        self.func = func
        self.profile = profile
        self.unbounded = unbounded
        self.label = label

    def tilde(self, X):
        return self.func(np.asarray(X, dtype=float))


# ---------------------------------------------------------------------------
# Taylor data by central differences


@lru_cache(maxsize=8)
def _stencil(h):
    pts = [np.zeros(4)]
    for a in range(4):
        for s in (1, -1):
            e = np.zeros(4)
            e[a] = s * h
            pts.append(e)
    for a in range(4):
        for b in range(a + 1, 4):
            for sa in (1, -1):
                for sb in (1, -1):
                    e = np.zeros(4)
                    e[a] = sa * h
                    e[b] = sb * h
                    pts.append(e)
    return np.array(pts)


def taylor_stencil(h: float = 1e-3) -> np.ndarray:
    """The 33 points of the central-difference stencil in ``(X0, X1, X2, X3)``."""
    return _stencil(float(h)).copy()


def taylor_from_values(vals, h: float):
    """Value, gradient and Hessian at 0 from values on :func:`taylor_stencil`.

    ``vals`` has the stencil on its first axis; extra axes are carried along.
    """
    vals = np.asarray(vals)
    f0 = vals[0]
    g = np.zeros((4,) + vals.shape[1:], dtype=vals.dtype)
    H = np.zeros((4, 4) + vals.shape[1:], dtype=vals.dtype)
    for a in range(4):
        fp, fm = vals[1 + 2 * a], vals[2 + 2 * a]
        g[a] = (fp - fm) / (2 * h)
        H[a, a] = (fp - 2 * f0 + fm) / h**2
    idx = 9
    for a in range(4):
        for b in range(a + 1, 4):
            fpp, fpm, fmp, fmm = vals[idx : idx + 4]
            H[a, b] = H[b, a] = (fpp - fpm - fmp + fmm) / (4 * h * h)
            idx += 4
    return f0, g, H


def taylor_from_stencil(func, h: float = 1e-3):
    """Gradient and Hessian at the origin of a scalar function of ``X``."""
    _, g, H = taylor_from_values(func(taylor_stencil(h)), h)
    return g, H


# ---------------------------------------------------------------------------
# families


@dataclass
class KernelFamily:
    """An element ``(E, T, w_1)`` of the kernel sequence space at one spectral parameter.

    Attributes
    ----------
    scale : int
        ``-1`` for the fiber Hamiltonian, ``n >= 0`` after ``n + 1`` decimations.
    z : float
        Spectral parameter at which the family is evaluated.
    E : float
        Constant part ``E[z]``.
    dE : float
        ``dE/dz`` at ``z``.
    T : TKernel
    w : dict
        ``(M, N) -> WickKernel`` for ``(1,0), (1,1), (2,0)``; ``(0,1)`` and
        ``(0,2)`` follow by Hermiticity at real ``z``.
    p, sigma, xi : float
    meta : dict
    """

    scale: int
    z: float
    E: float
    T: TKernel
    w: dict
    p: float = 0.0
    sigma: float = 0.0
    xi: float = 0.25
    dE: float = 1.0
    meta: dict = field(default_factory=dict)
    degree_cap: int = 2

    def __post_init__(self):
        for (M, N) in self.w:
            if M + N > self.degree_cap:
                raise ValueError("kernel above degree cap")

    def kernel(self, M: int, N: int) -> WickKernel | None:
        """Kernel of degree ``(M, N)``; the annihilation kernels are Hermitian partners."""
        if (M, N) in self.w:
            return self.w[(M, N)]
        if (N, M) in self.w and (M, N) in ((0, 1), (0, 2)):
            k = self.w[(N, M)]
            return WickKernel((M, N), k.channels, k.coeffs, k.grid, k.sigma, k.plateau, k.p)
        return None

    def all_kernels(self):
        out = {}
        for deg in ((1, 0), (0, 1), (1, 1), (2, 0), (0, 2)):
            k = self.kernel(*deg)
            if k is not None:
                out[deg] = k
        return out


@dataclass(frozen=True)
class PolydiscParams:
    """Polydisc radii ``(eps, delta, lambda)`` and sum-rule strength ``mu``."""

    eps: float
    delta: float
    lam: float = 0.5
    mu: float = 1.0

    def __post_init__(self):
        for v in (self.eps, self.delta, self.lam):
            if not (np.isfinite(v) and v >= 0):
                raise ValueError("polydisc parameters must be finite and nonnegative")
        if not 0 <= self.lam <= 0.5:
            raise ValueError("lambda must lie in [0, 1/2]")
        if not self.mu > 0:
            raise ValueError("mu must be positive")


# ---------------------------------------------------------------------------
# sup lattices and norms


def _direction_set(level: int) -> np.ndarray:
    """Normalized nonzero integer vectors with entries in ``[-level, level]`` (nested in ``level``)."""
    r = np.arange(-level, level + 1)
    v = np.array(np.meshgrid(r, r, r, indexing="ij")).reshape(3, -1).T
    v = v[np.any(v != 0, axis=1)]
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    return np.unique(np.round(v, 12), axis=0)


@dataclass(frozen=True)
class SupLattice:
    """Sampling lattice for the sup norms.

    ``X`` points are ``X0 * r * d`` with ``X0`` on a uniform grid up to
    ``1 - 1e-6``, ``r`` in ``[0, 1]`` and ``d`` from the nested direction set.
    Photon directions are drawn from the same direction set.  Nested in
    ``level``.
    """

    level: int = 1
    n_X0: int = 5
    n_r: int = 3
    x0_max: float = 1.0 - 1e-6

    def refined(self) -> "SupLattice":
        return SupLattice(self.level + 1, 2 * self.n_X0 - 1, 2 * self.n_r - 1, self.x0_max)

    def directions(self) -> np.ndarray:
        return _direction_set(self.level)

    def x_points(self, x0_lo=0.0, x0_hi=None) -> np.ndarray:
        hi = self.x0_max if x0_hi is None else x0_hi
        X0 = np.linspace(0.0, self.x0_max, self.n_X0)
        X0 = X0[(X0 >= x0_lo) & (X0 <= hi)]
        if x0_hi is not None and x0_hi < self.x0_max and (len(X0) == 0 or X0[-1] < hi):
            X0 = np.append(X0, hi)
        if x0_lo > 0 and (len(X0) == 0 or X0[0] > x0_lo):
            X0 = np.insert(X0, 0, x0_lo)
        r = np.linspace(0.0, 1.0, self.n_r)
        d = self.directions()
        pts = [np.array([0.0, 0.0, 0.0, 0.0])] if x0_lo == 0.0 else []
        for x0 in X0:
            if x0 == 0.0:
                continue
            for rr in r:
                if rr == 0.0:
                    pts.append(np.array([x0, 0.0, 0.0, 0.0]))
                    continue
                pts.extend(np.concatenate([np.full((len(d), 1), x0), x0 * rr * d], axis=1))
        return np.array(pts)


def _external_configs(kernel: WickKernel, lattice: SupLattice):
    """Photon legs spanning the radial nodes, sampled directions and both polarizations."""
    dirs = lattice.directions()
    knodes = kernel.grid.nodes
    pol = polarization_vectors(dirs)  # (nd, 2, 3)
    covariant = kernel.p == 0.0
    if kernel.order == 1:
        use = dirs[:1] if covariant else dirs
        upol = pol[:1] if covariant else pol
        nd = len(use)
        km = np.repeat(knodes, nd * 2)
        kh = np.tile(np.repeat(use, 2, axis=0), (len(knodes), 1))
        ep = np.tile(upol.reshape(-1, 3), (len(knodes), 1))
        return [Leg(km, kh, ep)]
    # degree two: first direction fixed to a lattice direction, second over the set
    d1 = dirs[np.argmax(dirs[:, 2])]
    p1 = polarization_vectors(d1)
    rows = []
    for i, k1 in enumerate(knodes):
        for j, k2 in enumerate(knodes):
            for a in range(2):
                for b, d2 in enumerate(dirs):
                    for c in range(2):
                        rows.append((k1, k2, a, b, c))
    rows = np.array(rows)
    km1, km2 = rows[:, 0], rows[:, 1]
    a, b, c = rows[:, 2].astype(int), rows[:, 3].astype(int), rows[:, 4].astype(int)
    l1 = Leg(km1, np.broadcast_to(d1, (len(rows), 3)).copy(), p1[a])
    l2 = Leg(km2, dirs[b], pol[b, c])
    return [l1, l2]


def _sup_abs(kernel: WickKernel, lattice: SupLattice, derivative=None, radial=None, chunk=4096):
    """sup over legs and X of ``|k|^(-sigma) |d^a w|`` (primitive legs)."""
    legs = _external_configs(kernel, lattice)
    X = lattice.x_points()
    nK = legs[0].kmag.shape[0]
    prim = (True,) * kernel.order
    if derivative is None:
        offsets, weights = [np.zeros(4)], [1.0]
    else:
        offsets, weights = _fd_rule(derivative)
    best = 0.0
    for s in range(0, nK, chunk):
        sl = slice(s, s + chunk)
        sub = [Leg(lg.kmag[sl], lg.khat[sl], lg.eps[sl]) for lg in legs]
        sub = [Leg(l.kmag[:, None], l.khat[:, None, :], l.eps[:, None, :]) for l in sub]
        acc = 0.0
        for off, wt in zip(offsets, weights):
            Y = X[None, :, :] + off
            acc = acc + wt * kernel.evaluate(Y, sub, prim, radial_derivative=radial)
        if radial is not None and kernel.plateau is not None:
            # product rule with the plateau on the differentiated leg
            pass
        best = max(best, float(np.max(np.abs(acc))) if np.size(acc) else 0.0)
    return best


@lru_cache(maxsize=64)
def _fd_rule_cached(a):
    h = 1e-2
    a = np.array(a)
    order = int(a.sum())
    if order == 0:
        return ((np.zeros(4),), (1.0,))
    idx = np.nonzero(a)[0]
    if order == 1:
        e = np.zeros(4)
        e[idx[0]] = h
        return ((e, -e), (1 / (2 * h), -1 / (2 * h)))
    if len(idx) == 1:
        e = np.zeros(4)
        e[idx[0]] = h
        return ((e, np.zeros(4), -e), (1 / h**2, -2 / h**2, 1 / h**2))
    ea, eb = np.zeros(4), np.zeros(4)
    ea[idx[0]] = h
    eb[idx[1]] = h
    w = 1 / (4 * h * h)
    return ((ea + eb, ea - eb, -ea + eb, -ea - eb), (w, -w, -w, w))


def _fd_rule(a):
    return _fd_rule_cached(tuple(int(x) for x in a))


def _multi_indices_X():
    out = []
    for i in range(1, 4):
        e = [0, 0, 0, 0]
        e[i] = 1
        out.append(tuple(e))
    for i in range(1, 4):
        for j in range(i, 4):
            e = [0, 0, 0, 0]
            e[i] += 1
            e[j] += 1
            out.append(tuple(e))
    return out


def norm_sigma(kernel: WickKernel, lattice: SupLattice = SupLattice()) -> float:
    """Weighted sup norm ``(2 sqrt(pi))^(M+N) sup |k|^(-sigma) |w|`` on the lattice.

    Raises
    ------
    EmptyGrid
        If the lattice or the radial grid is empty.
    """
    if kernel.grid.n == 0 or lattice.n_X0 < 1:
        raise EmptyGrid("no samples")
    if kernel.is_zero():
        return 0.0
    return SQRT_4PI ** kernel.order * _sup_abs(kernel, lattice)


def _plateau_radial_term(kernel, lattice):
    # |k|^sigma d/d|k| (|k|^-sigma w) on the primitive, including the plateau factor
    legs_total = kernel.order
    best = 0.0
    for i in range(legs_total):
        best = max(best, _sup_radial(kernel, lattice, i))
    return best


def _sup_radial(kernel, lattice, i):
    legs = _external_configs(kernel, lattice)
    X = lattice.x_points()
    prim = [True] * kernel.order
    sub = [Leg(l.kmag[:, None], l.khat[:, None, :], l.eps[:, None, :]) for l in legs]
    d_core = kernel.evaluate(X[None], sub, prim, radial_derivative=i)
    if kernel.plateau is None:
        return float(np.max(np.abs(d_core)))
    core = kernel.evaluate(X[None], sub, prim)
    phi = [eval_kappa_primitive(kernel.plateau, l.kmag) for l in sub]
    dphi = eval_kappa_primitive(kernel.plateau, sub[i].kmag, 1)
    others = np.ones_like(phi[0])
    for j, ph in enumerate(phi):
        if j != i:
            others = others * ph
    total = others * (dphi * core + phi[i] * d_core)
    return float(np.max(np.abs(total)))


def norm_sigma_sharp(kernel: WickKernel, lattice: SupLattice = SupLattice(), dp: tuple | None = None) -> float:
    """The derivative norm ``||w||_sigma^sharp``.

    Sum of ``||w||``, ``||d_X0 w||``, the nine ``||d_X^a w||`` with
    ``1 <= |a| <= 2`` and ``a0 = 0``, the radial term, and (if ``dp`` is given
    as ``(kernel_at_p_plus_h, h)``) the ``d_|p|`` terms.
    """
    if kernel.is_zero() and dp is None:
        return 0.0
    w = SQRT_4PI ** kernel.order
    total = w * _sup_abs(kernel, lattice)
    total += w * _sup_abs(kernel, lattice, derivative=(1, 0, 0, 0))
    for a in _multi_indices_X():
        total += w * _sup_abs(kernel, lattice, derivative=a)
    total += w * _plateau_radial_term(kernel, lattice)
    if dp is not None and kernel.p > 0:
        kp, h = dp
        diff = WickKernel(kernel.degree, kernel.channels, (kp.coeffs - kernel.coeffs) / h, kernel.grid, kernel.sigma, kernel.plateau, kernel.p)
        total += w * _sup_abs(diff, lattice)
        for a in _multi_indices_X()[:3] + [(1, 0, 0, 0)]:
            total += w * _sup_abs(diff, lattice, derivative=a)
    return float(total)


# T sector ------------------------------------------------------------------


def _sharp_T(func, X, h=1e-4):
    """``sup |d_X0 f| + sum_{|a|=1,2, a0=0} sup |d^a f|`` over points ``X``."""
    X = np.asarray(X, dtype=float)
    terms = []
    e = np.eye(4) * h
    d0 = (func(X + e[0]) - func(X - e[0])) / (2 * h)
    terms.append(np.max(np.abs(d0)))
    f0 = func(X)
    for i in range(1, 4):
        fp, fm = func(X + e[i]), func(X - e[i])
        terms.append(np.max(np.abs((fp - fm) / (2 * h))))
        terms.append(np.max(np.abs((fp - 2 * f0 + fm) / h**2)))
        for j in range(i + 1, 4):
            mixed = (func(X + e[i] + e[j]) - func(X + e[i] - e[j]) - func(X - e[i] + e[j]) + func(X - e[i] - e[j])) / (4 * h * h)
            terms.append(np.max(np.abs(mixed)))
    return float(sum(terms))


def norm_T_parts(func, lattice: SupLattice = SupLattice(), split: float = 0.75, h: float = 1e-4):
    """Inner (``X0 < split``) and outer (``X0 >= split``) sharp norms of a function of ``X``."""
    Xin = lattice.x_points(0.0, split - 1e-9)
    Xout = lattice.x_points(split, None)
    return _sharp_T(func, Xin, h), _sharp_T(func, Xout, h)


def norm_T(T, K_Theta: float, lattice: SupLattice = SupLattice(), reference=None) -> float:
    """``||T||_T = max(inner sharp norm, outer sharp norm / K_Theta)``.

    Parameters
    ----------
    T : TKernel or callable
        The function whose norm is taken (full ``T``); a callable acts on
        ``X`` arrays directly.
    reference : TKernel or callable, optional
        Subtracted before taking the norm (e.g. a free comparison kernel).
    """
    f = T.full if isinstance(T, TKernel) else T
    if reference is not None:
        r = reference.full if isinstance(reference, TKernel) else reference

        def func(X):
            return f(X) - r(X)
    else:
        func = f
    inner, outer = norm_T_parts(func, lattice)
    return max(inner, outer / K_Theta)


def norm_family(w: KernelFamily, K_Theta: float = 1.0, lattice: SupLattice = SupLattice(), reference=None):
    """Components ``(|E|, ||T - reference||_T, sum xi^-(M+N) ||w_MN||^sharp)`` and their sum.

    Hermitian partners are counted separately, as in the sequence-space norm.
    """
    nE = abs(w.E)
    nT = norm_T(w.T, K_Theta, lattice, reference)
    nw = 0.0
    for (M, N), k in w.all_kernels().items():
        nw += w.xi ** (-(M + N)) * norm_sigma_sharp(k, lattice)
    return dict(E=nE, T=nT, w1=nw, total=nE + nT + nw)


def in_polydisc(w: KernelFamily, d: PolydiscParams, comparison, K_Theta: float = 1.0, lattice: SupLattice = SupLattice()):
    """Membership report for the polydisc ``D(eps, delta, lambda)``.

    Checks ``|E - z| < eps``, ``||T - T_0|| < delta``, ``||w_1|| < eps`` and
    ``|dE/dz - 1| < 1/2`` (the bijectivity condition on the spectral
    parameter), each with its slack.
    """
    try:
        nf = norm_family(w, K_Theta, lattice, comparison)
        e_dev = abs(w.E - w.z)
    except Exception:  # noqa: BLE001 - report, do not raise
        nan = float("nan")
        return dict(member=False, E=(False, nan), T=(False, nan), w1=(False, nan), dE=(False, nan), nan=True)
    rep = dict(
        E=(e_dev < d.eps, d.eps - e_dev),
        T=(nf["T"] < d.delta, d.delta - nf["T"]),
        w1=(nf["w1"] < d.eps, d.eps - nf["w1"]),
        dE=(abs(w.dE - 1.0) < 0.5, 0.5 - abs(w.dE - 1.0)),
    )
    rep["member"] = all(v[0] for v in rep.values())
    rep["nan"] = False
    return rep


def compute_K_Theta(profile: CutoffProfile, rho: float, p: float = 0.0, lam: float = 0.5,
                    lattice: SupLattice = SupLattice(level=1, n_X0=9, n_r=3), n_samples: int = 24,
                    amplitude: float = 0.05, seed: int = 0) -> float:
    """Smallest constant ``K`` with ``outer(R T - T0(rho lam)) <= K inner(T - T0(lam))`` on a sampled T-ball.

    The renormalization of the free part (no interaction) is applied to
    perturbations ``T = T0 + d`` with ``d`` drawn from low-order covariant
    polynomials cut off smoothly in ``X0``; the largest ratio is returned, and
    never less than 1.
    """
    from .wickflow import free_comparison_T, free_renormalize_T  # local import: avoids a cycle

    if profile.is_step:
        return 1.0
    rng = np.random.default_rng(seed)
    base = free_comparison_T(p, lam, 0.0, profile)
    target = free_comparison_T(p, rho * lam, 0.0, profile)
    worst = 1.0
    for _ in range(n_samples):
        c = rng.normal(size=4) * amplitude

        def pert(X, c=c):
            X0, Xv = X[..., 0], X[..., 1:]
            return (c[0] * X0 ** 2 + c[1] * np.sum(Xv**2, axis=-1) + c[2] * X0 * Xv[..., 2] + c[3] * Xv[..., 2] ** 2)

        def Tt(X, pert=pert):
            return base.tilde(X) + pert(X)

        T = AnalyticT(Tt, profile)
        inner, _ = norm_T_parts(lambda X: T.full(X) - base.full(X), lattice)
        RT = free_renormalize_T(T, 0.0, rho, profile)
        _, outer = norm_T_parts(lambda X: RT.full(X) - target.full(X), lattice)
        if inner > 0:
            worst = max(worst, outer / inner)
    return float(worst)


# ---------------------------------------------------------------------------
# serialization


def kernel_to_dict(k: WickKernel) -> dict:
    """Versioned JSON-compatible representation of a kernel."""
    return dict(
        schema=SCHEMA_VERSION,
        degree=list(k.degree),
        channels=[c.tag for c in k.channels],
        radial_n=k.grid.n,
        breaks=list(k.grid.breaks),
        sigma=k.sigma,
        p=k.p,
        plateau=None if k.plateau is None else dict(
            sigma=k.plateau.sigma, uv_cutoff=k.plateau.uv_cutoff, profile=k.plateau.profile, width=k.plateau.width
        ),
        coeffs=k.coeffs.tolist(),
    )


def kernel_from_dict(d: dict) -> WickKernel:
    if d.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema {d.get('schema')!r}")
    chans = []
    for tag in d["channels"]:
        t, m, ell = tag.split("|")
        chans.append(Channel(t, m, int(ell[1:])))
    pl = d["plateau"]
    return WickKernel(
        tuple(d["degree"]),
        tuple(chans),
        np.array(d["coeffs"], dtype=float),
        RadialGrid(d["radial_n"], tuple(d["breaks"])),
        d["sigma"],
        None if pl is None else FormFactor(**pl),
        d["p"],
    )

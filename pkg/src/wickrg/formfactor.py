"""Smooth cutoff functions and the infrared-regularized form factor.

The mollifier ``Theta`` is a polynomial smoothstep that equals one below
``transition_lo`` and zero above ``transition_hi``.  The partition pair

    chi(x) = sin(pi * Theta(x) / 2),    chibar(x) = cos(pi * Theta(x) / 2)

satisfies ``chi**2 + chibar**2 == 1`` identically, and ``chi_rho(x) = chi(x / rho)``.
All functions are vectorized over ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

__all__ = [
    "CutoffProfile",
    "FormFactor",
    "smoothstep",
    "eval_theta",
    "eval_chi",
    "eval_chibar",
    "eval_chi_sq",
    "eval_chibar_sq",
    "eval_kappa",
    "eval_kappa_primitive",
]


def smoothstep(t, order=2, derivative=0):
    """Polynomial smoothstep of class C^order on [0, 1].

    ``S(t) = t**(k+1) * sum_j C(k+j, j) C(2k+1, k-j) (-t)**j`` with ``k = order``,
    clamped to 0 below 0 and 1 above 1.  ``order=2`` is the quintic
    ``6t^5 - 15t^4 + 10t^3``.

    Parameters
    ----------
    t : array_like
        Argument.
    order : int
        Number of derivatives that vanish at both end points.
    derivative : int
        0 for the value, 1 or 2 for derivatives.

    Returns
    -------
    ndarray
    """
    t = np.asarray(t, dtype=float)
    k = int(order)
    coeffs = np.zeros(2 * k + 2)
    for j in range(k + 1):
        coeffs[k + 1 + j] = comb(k + j, j) * comb(2 * k + 1, k - j) * (-1) ** j
    poly = np.polynomial.Polynomial(coeffs)
    if derivative:
        poly = poly.deriv(derivative)
    tc = np.clip(t, 0.0, 1.0)
    out = poly(tc)
    if derivative:
        out = np.where((t <= 0.0) | (t >= 1.0), 0.0, out)
    else:
        out = np.where(t <= 0.0, 0.0, np.where(t >= 1.0, 1.0, out))
    return out


@dataclass(frozen=True)
class CutoffProfile:
    """Shape of the mollifier Theta.

    Parameters
    ----------
    transition_lo : float
        Theta is 1 for ``x <= transition_lo``.
    transition_hi : float
        Theta is 0 for ``x >= transition_hi``.
    smoothness_order : int
        Smoothstep order; ``Theta`` is C^k with ``k = smoothness_order``.
        Order 0 together with ``transition_lo == transition_hi`` gives a step.
    """

    transition_lo: float = 0.75
    transition_hi: float = 1.0
    smoothness_order: int = 2

    def __post_init__(self):
        if self.transition_hi < self.transition_lo:
            raise ValueError("transition_hi must be >= transition_lo")
        if self.smoothness_order < 0:
            raise ValueError("smoothness_order must be >= 0")

    @property
    def is_step(self) -> bool:
        return self.transition_hi == self.transition_lo

    @classmethod
    def step(cls, at: float = 1.0) -> "CutoffProfile":
        """Sharp-projector limit: Theta jumps from 1 to 0 at ``at``."""
        return cls(at, at, 0)


def eval_theta(profile: CutoffProfile, x, derivative: int = 0):
    """Mollifier Theta(x) or one of its first two derivatives."""
    x = np.asarray(x, dtype=float)
    lo, hi = profile.transition_lo, profile.transition_hi
    if profile.is_step:
        if derivative:
            return np.zeros_like(x)
        return np.where(x < lo, 1.0, 0.0)
    width = hi - lo
    t = (x - lo) / width
    if derivative == 0:
        return 1.0 - smoothstep(t, profile.smoothness_order)
    return -smoothstep(t, profile.smoothness_order, derivative) / width**derivative


def _scaled(profile, rho, x, derivative):
    if rho <= 0:
        raise ValueError("scale rho must be positive")
    x = np.asarray(x, dtype=float)
    th = eval_theta(profile, x / rho)
    if derivative == 0:
        return th, None
    return th, eval_theta(profile, x / rho, 1) / rho


def eval_chi(profile: CutoffProfile, rho: float, x, derivative: int = 0):
    """Smooth characteristic function chi_rho(x) = chi(x / rho).

    Parameters
    ----------
    profile : CutoffProfile
    rho : float
        Scale, ``rho > 0``.
    x : array_like
        Nonnegative argument (negative values are treated as below the
        transition).
    derivative : {0, 1}
        Return the value or the first derivative in ``x``.
    """
    th, dth = _scaled(profile, rho, x, derivative)
    if derivative == 0:
        return np.sin(0.5 * np.pi * th)
    return np.cos(0.5 * np.pi * th) * 0.5 * np.pi * dth


def eval_chibar(profile: CutoffProfile, rho: float, x, derivative: int = 0):
    """Complementary function chibar_rho = sqrt(1 - chi_rho**2)."""
    th, dth = _scaled(profile, rho, x, derivative)
    if derivative == 0:
        return np.where(th >= 1.0, 0.0, np.cos(0.5 * np.pi * th))
    return -np.sin(0.5 * np.pi * th) * 0.5 * np.pi * dth


def eval_chi_sq(profile: CutoffProfile, rho: float, x):
    """chi_rho(x)**2."""
    return eval_chi(profile, rho, x) ** 2


def eval_chibar_sq(profile: CutoffProfile, rho: float, x):
    """chibar_rho(x)**2."""
    return eval_chibar(profile, rho, x) ** 2


@dataclass(frozen=True)
class FormFactor:
    """Infrared-regularized ultraviolet form factor kappa_sigma.

    Parameters
    ----------
    sigma : float
        Infrared exponent, ``kappa_sigma(x) ~ x**sigma`` as ``x -> 0``.
    uv_cutoff : float
        Support is ``[0, uv_cutoff]``.
    profile : {"sharp", "smooth"}
        ``sharp`` is the indicator of ``[0, uv_cutoff)``; it lies outside the
        smoothness hypotheses of the convergence theory and is flagged as such.
    width : float
        Relative width of the smooth descent, which occupies
        ``[uv_cutoff * (1 - width), uv_cutoff]``.
    """

    sigma: float = 0.0
    uv_cutoff: float = 1.0
    profile: str = "sharp"
    width: float = 0.25

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.profile not in ("sharp", "smooth"):
            raise ValueError("profile must be 'sharp' or 'smooth'")
        if not 0 < self.width <= 1:
            raise ValueError("width must lie in (0, 1]")

    @property
    def within_hypotheses(self) -> bool:
        """False for the sharp profile, which is not smooth."""
        return self.profile == "smooth"

    @property
    def plateau_profile(self) -> CutoffProfile:
        if self.profile == "sharp":
            return CutoffProfile.step(self.uv_cutoff)
        return CutoffProfile(self.uv_cutoff * (1 - self.width), self.uv_cutoff, 2)

    @property
    def breakpoints(self) -> tuple:
        """Points where kappa is not analytic, inside ``(0, uv_cutoff]``."""
        if self.profile == "sharp":
            return (self.uv_cutoff,)
        return (self.uv_cutoff * (1 - self.width), self.uv_cutoff)

    def limit(self) -> "FormFactor":
        """The sigma -> 0 limit form factor."""
        return FormFactor(0.0, self.uv_cutoff, self.profile, self.width)


def eval_kappa_primitive(ff: FormFactor, x, derivative: int = 0):
    """Weighted form factor ``x**(-sigma) * kappa_sigma(x)`` (the plateau)."""
    return eval_theta(ff.plateau_profile, x, derivative)


def eval_kappa(ff: FormFactor, x):
    """Form factor kappa_sigma(x) = x**sigma * plateau(x).

    Examples
    --------
    >>> eval_kappa(FormFactor(), 0.3)
    array(1.)
    """
    x = np.asarray(x, dtype=float)
    plateau = eval_kappa_primitive(ff, x)
    if ff.sigma == 0.0:
        return plateau
    return np.power(np.maximum(x, 0.0), ff.sigma) * plateau

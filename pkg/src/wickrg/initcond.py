"""Wick normal form of the fiber Hamiltonian and the first decimation.

At conserved momentum ``p`` (along z) the fiber Hamiltonian
``H = H_f + (p - P_f - g A)**2 / 2`` is, after Wick ordering,

    const + H_f - p P_par + P_f**2 / 2 + sum of Wick monomials of degree 1 and 2,

with kernels (``X = (X0, Xvec)`` the spectral variables of ``H_f, P_f``)

    w_10 = w_01 = -g <p - Xvec, eps> kappa(k),
    w_11       =  g**2 <eps, eps'> kappa(k) kappa(k'),
    w_20 = w_02 = (g**2 / 2) <eps, eps'> kappa(k) kappa(k'),

and ``const = p**2 / 2 + (g**2 / 2) <A**2>``.  Each kernel is an exact finite
combination of tensor-basis channels with constant radial coefficients.
"""
from __future__ import annotations

import math
from functools import partial

import numpy as np
from scipy.integrate import quad

from .formfactor import FormFactor, eval_kappa
from .kernelspace import AnalyticT, KernelFamily, RadialGrid, WickKernel, degree1_channels, degree2_channels
from .wickflow import FlowConfig, renormalize

__all__ = ["vacuum_A2", "wick_constant", "kinetic_T", "wick_normal_form", "first_decimation"]


def vacuum_A2(ff: FormFactor = FormFactor()) -> float:
    """``<Omega, A(0)**2 Omega> = 2 * 4 pi * int kappa(k)**2 k dk`` (both polarizations)."""
    pts = [b for b in ff.breakpoints if 0 < b < ff.uv_cutoff]
    val, _ = quad(lambda k: float(eval_kappa(ff, k)) ** 2 * k, 0.0, ff.uv_cutoff, points=pts or None, limit=200)
    return 8 * math.pi * val


def wick_constant(p: float, g: float, ff: FormFactor = FormFactor()) -> float:
    """Constant produced by Wick ordering: ``p**2/2 + g**2 <A**2> / 2``."""
    return 0.5 * p * p + 0.5 * g * g * vacuum_A2(ff)


def _kinetic(X, p):
    return -p * X[..., 3] + 0.5 * np.sum(X[..., 1:] ** 2, axis=-1)


def kinetic_T(p: float) -> AnalyticT:
    """Photon part of the free fiber Hamiltonian minus ``H_f``: ``-p X_par + |Xvec|**2 / 2``."""
    return AnalyticT(partial(_kinetic, p=float(p)), unbounded=True, label="kinetic")


def _const_kernel(degree, channels, values: dict, grid, sigma, ff, p):
    coeffs = np.zeros((len(channels),) + (grid.n,) * sum(degree))
    for i, ch in enumerate(channels):
        if ch.tag in values:
            coeffs[i] = values[ch.tag]
    return WickKernel(degree, channels, coeffs, grid, sigma, ff, p)


def wick_normal_form(p: float, g: float, zeta: float = 0.0, ff: FormFactor = FormFactor(),
                     radial_n1: int = 32, radial_n2: int = 20, xi: float = 0.25) -> KernelFamily:
    """The fiber Hamiltonian minus its Wick constant, as a scale ``-1`` family at ``z = zeta``.

    The family is ``H - const + zeta``, so its constant part is ``zeta``; the
    ground-state energy follows from the root ``zeta*`` of the flow as
    ``const - zeta*``.
    """
    if not 0 <= p < 1.0 / 3.0:
        raise ValueError("p must lie in [0, 1/3)")
    sigma = ff.sigma
    g1, g2 = RadialGrid(radial_n1), RadialGrid(radial_n2)
    ch1 = degree1_channels(p > 0)
    ch2 = degree2_channels()
    w10 = _const_kernel((1, 0), ch1, {"eX|1|P0": g, "ep|1|P0": -g * p}, g1, sigma, ff, p)
    w11 = _const_kernel((1, 1), ch2, {"ee|1|P0": g * g}, g2, sigma, ff, p)
    w20 = _const_kernel((2, 0), ch2, {"ee|1|P0": 0.5 * g * g}, g2, sigma, ff, p)
    w = {(1, 0): w10, (1, 1): w11, (2, 0): w20} if g else {}
    return KernelFamily(-1, float(zeta), float(zeta), kinetic_T(p), w, p=p, sigma=sigma, xi=xi, dE=1.0,
                        meta=dict(const=wick_constant(p, g, ff), g=g))


def first_decimation(p: float, g: float, zeta: float, cfg: FlowConfig | None = None, modes=None):
    """Decimate the photons above the unit energy scale.

    Returns the scale-0 family at spectral parameter ``zeta`` and the step
    report.
    """
    cfg = cfg or FlowConfig(g=g, p=p)
    w = wick_normal_form(p, g, zeta, cfg.formfactor, cfg.grids.radial_n1, cfg.grids.radial_n2, cfg.xi)
    return renormalize(w, cfg, modes=modes)

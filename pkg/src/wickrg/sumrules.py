"""Soft-photon sum rules of a kernel family.

A family satisfies the sum rules with strength ``mu`` when, for every unit
vector ``n`` and polarization ``eps = eps(n, lambda)``,

    g mu <eps, d_X> w_MN(X; K) = (M + 1) lim_{x -> 0} x**-sigma w_(M+1)N(X; (x n, eps), K)

and the same with the added photon on the annihilation side and ``N + 1``.
``w_00`` is ``T``.  The soft limit is read off the ``|k|**-sigma`` primitive
by linear extrapolation from the two smallest radial nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernelspace import KernelFamily, Leg
from .quadrature import polarization_vectors

__all__ = ["SumRuleReport", "check_sum_rules", "marginal_cancellation_probe", "default_directions"]

# (source degree, target degree, side, multiplicity)
_RULES = (
    ((0, 0), (1, 0), "M", 1),
    ((0, 0), (0, 1), "N", 1),
    ((1, 0), (2, 0), "M", 2),
    ((0, 1), (1, 1), "M", 1),
    ((1, 0), (1, 1), "N", 1),
    ((0, 1), (0, 2), "N", 2),
)


def default_directions():
    """Three unit vectors: along ``p``, across it and oblique."""
    return [np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]), np.array([0.6, 0.0, 0.8])]


@dataclass
class SumRuleReport:
    """Sum-rule residuals of one family.

    Attributes
    ----------
    mu : float
        Strength at which the residuals are taken.
    residuals : dict
        ``"MN->M'N'"`` to the largest ``|g mu <eps, d_X> w - (M+1) lim w'|``.
    scale : dict
        Largest size of either side, per rule.
    mu_fit : dict
        Least-squares strength per rule (NaN when both sides vanish).
    meta : dict
        Sampling details.
    """

    mu: float
    residuals: dict = field(default_factory=dict)
    scale: dict = field(default_factory=dict)
    mu_fit: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def max_residual(self) -> float:
        vals = [v for v in self.residuals.values() if np.isfinite(v)]
        return max(vals, default=0.0)

    @property
    def mu_leading(self) -> float:
        """Strength fitted on the ``T -> w_10`` rule."""
        return self.mu_fit.get("00->10", np.nan)

    def as_dict(self) -> dict:
        return dict(mu=self.mu, residuals=self.residuals, scale=self.scale, mu_fit=self.mu_fit,
                    max_residual=self.max_residual)


def _sample_X(p_positive: bool):
    pts = []
    dirs = [np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])]
    if p_positive:
        dirs.append(np.array([0.0, 0.0, -1.0]))
    for X0 in (0.15, 0.35, 0.6):
        for r in (0.0, 0.5, 0.9):
            for d in dirs:
                pts.append(np.concatenate([[X0], r * X0 * d]))
                if r == 0.0:
                    break
    return np.array(pts)


def _ext_legs(B):
    """External photon configurations for the degree-one sources."""
    dirs = [np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.8, 0.6])]
    out = []
    for k in (0.3, 0.7):
        for d in dirs:
            for e in polarization_vectors(d):
                out.append((k, d, e))
    return out


def _leg(k, d, e, B):
    return Leg(np.full(B, float(k)), np.broadcast_to(d, (B, 3)).copy(), np.broadcast_to(e, (B, 3)).copy())


def _T_derivative(fam: KernelFamily, X, eps, h=1e-4):
    d = np.concatenate([[0.0], eps])
    return (fam.T.tilde(X + h * d) - fam.T.tilde(X - h * d)) / (2 * h)


def _kernel_derivative(kern, X, legs, eps, h=1e-4):
    d = np.concatenate([[0.0], eps])
    return (kern.evaluate(X + h * d, legs) - kern.evaluate(X - h * d, legs)) / (2 * h)


def _soft(kern, X, soft_slot, n, eps, others):
    """``lim_{x->0} x**-sigma w`` with the soft photon in ``soft_slot``."""
    k1, k2 = kern.grid.nodes[:2]
    B = X.shape[0]
    vals = []
    for k in (k1, k2):
        legs = list(others)
        legs.insert(soft_slot, _leg(k, n, eps, B))
        prim = [False] * len(legs)
        prim[soft_slot] = True
        vals.append(kern.evaluate(X, legs, primitive=prim))
    return (k2 * vals[0] - k1 * vals[1]) / (k2 - k1)


def check_sum_rules(w: KernelFamily, mu: float = 1.0, directions=None, g: float | None = None) -> SumRuleReport:
    """Residuals of the sum rules on a fixed sample of ``X``, directions and external photons.

    Parameters
    ----------
    w : KernelFamily
    mu : float
        Strength used for the residuals.
    directions : list of ndarray, optional
        Soft-photon directions; :func:`default_directions` by default.
    g : float, optional
        Coupling; read from ``w.meta["g"]`` when omitted.
    """
    if g is None:
        g = w.meta.get("g", np.nan)
    directions = default_directions() if directions is None else [np.asarray(d, float) for d in directions]
    X = _sample_X(w.p > 0)
    B = X.shape[0]
    kernels = w.all_kernels()
    rep = SumRuleReport(float(mu), meta=dict(n_X=B, n_directions=len(directions), g=g))
    for src, dst, side, mult in _RULES:
        key = f"{src[0]}{src[1]}->{dst[0]}{dst[1]}"
        ks, kd = (None if src == (0, 0) else kernels.get(src)), kernels.get(dst)
        if src != (0, 0) and ks is None and kd is None:
            rep.residuals[key], rep.scale[key], rep.mu_fit[key] = 0.0, 0.0, np.nan
            continue
        ext = [None] if src == (0, 0) else _ext_legs(B)
        lhs_all, rhs_all = [], []
        for n in directions:
            for eps in polarization_vectors(n):
                for e in ext:
                    others = [] if e is None else [_leg(*e, B)]
                    if src == (0, 0):
                        dl = _T_derivative(w, X, eps)
                    elif ks is None:
                        dl = np.zeros(B)
                    else:
                        dl = _kernel_derivative(ks, X, others, eps)
                    slot = 0 if side == "M" else dst[0]
                    if kd is None:
                        rl = np.zeros(B)
                    else:
                        rl = _soft(kd, X, slot, n, eps, others)
                    lhs_all.append(g * dl)
                    rhs_all.append(mult * rl)
        lhs = np.concatenate(lhs_all)
        rhs = np.concatenate(rhs_all)
        rep.residuals[key] = float(np.max(np.abs(mu * lhs - rhs)))
        rep.scale[key] = float(max(np.max(np.abs(lhs)), np.max(np.abs(rhs))))
        den = float(lhs @ lhs)
        rep.mu_fit[key] = float(lhs @ rhs / den) if den > 0 else np.nan
    return rep


def marginal_cancellation_probe(w: KernelFamily, directions=None) -> float:
    """``max |lim_{X->0} lim_{x->0} x**-sigma w_10(X; x n, eps)|`` over directions and polarizations."""
    k = w.kernel(1, 0)
    if k is None or k.is_zero():
        return 0.0
    directions = default_directions() if directions is None else [np.asarray(d, float) for d in directions]
    X = np.zeros((1, 4))
    out = 0.0
    for n in directions:
        for eps in polarization_vectors(n):
            out = max(out, float(np.max(np.abs(_soft(k, X, 0, n, eps, [])))))
    return out

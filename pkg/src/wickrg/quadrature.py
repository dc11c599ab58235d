"""Photon-momentum quadrature, polarization vectors and mode sets.

A contracted photon pair carries the measure ``d^3q / |q| = q dq dOmega``.
The radial factor ``q dq`` is integrated with Gauss-Jacobi nodes for the
weight ``q`` on the first panel, so ``q = 0`` is never sampled, and with
Gauss-Legendre nodes times ``q`` on later panels.  Angles use a product of
Gauss-Legendre in ``cos(theta)`` and the trapezoid rule in ``phi``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = [
    "ToleranceNotMet",
    "QuadratureRule",
    "radial_rule",
    "angular_rule",
    "octahedral_rule",
    "polarization_vectors",
    "polarization_sum",
    "PhotonModes",
    "photon_modes",
    "integrate_photon_loop",
]


class ToleranceNotMet(RuntimeError):
    """Raised when the refinement error estimate exceeds the requested tolerance."""


def radial_rule(n: int, breaks=(1.0,), weight_q: bool = True):
    """Composite radial rule on ``[0, breaks[-1]]``.

    Parameters
    ----------
    n : int
        Nodes per panel.
    breaks : sequence of float
        Increasing panel end points; the first panel starts at 0.
    weight_q : bool
        If True the weights integrate ``f(q) q dq``, otherwise ``f(q) dq``.

    Returns
    -------
    nodes, weights : ndarray
    """
    edges = [0.0] + [float(b) for b in breaks]
    nodes, weights = [], []
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        if b <= a:
            continue
        h = 0.5 * (b - a)
        if i == 0 and a == 0.0 and weight_q:
            # int_0^b f(q) q dq = h^2 int_{-1}^{1} f(h(1+x)) (1+x) dx
            x, w = roots_jacobi(n, 0.0, 1.0)
            nodes.append(h * (1.0 + x))
            weights.append(h * h * w)
        else:
            x, w = roots_legendre(n)
            q = a + h * (1.0 + x)
            nodes.append(q)
            weights.append(h * w * (q if weight_q else 1.0))
    return np.concatenate(nodes), np.concatenate(weights)


def angular_rule(order: int):
    """Product rule on the unit sphere exact for spherical harmonics up to ``order``.

    Returns
    -------
    directions : ndarray, shape (n, 3)
    weights : ndarray, shape (n,)
        Positive, summing to 4 pi.
    """
    n_theta = max(1, (order + 2) // 2)
    n_phi = order + 1
    ct, wt = roots_legendre(n_theta)
    phi = 2 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    st = np.sqrt(1.0 - ct**2)
    dirs = np.stack(
        [
            np.outer(st, np.cos(phi)).ravel(),
            np.outer(st, np.sin(phi)).ravel(),
            np.repeat(ct, n_phi),
        ],
        axis=1,
    )
    w = np.repeat(wt, n_phi) * (2 * np.pi / n_phi)
    return dirs, w


def octahedral_rule():
    """Six-point rule on the coordinate axes, exact to degree 3."""
    dirs = np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
        dtype=float,
    )
    return dirs, np.full(6, 4 * np.pi / 6)


@dataclass(frozen=True)
class QuadratureRule:
    """Radial times angular rule for one contracted photon pair.

    Attributes
    ----------
    radial_nodes, radial_weights : ndarray
        Weights integrate ``f(q) q dq``.
    directions, angular_weights : ndarray
        Unit vectors and positive weights summing to 4 pi.
    tol : float
        Target accuracy for :func:`integrate_photon_loop`.
    """

    radial_nodes: np.ndarray
    radial_weights: np.ndarray
    directions: np.ndarray
    angular_weights: np.ndarray
    tol: float = 1e-10
    meta: dict = field(default_factory=dict, compare=False)

    @classmethod
    def build(cls, radial_n=32, angular_order=17, breaks=(1.0,), tol=1e-10, angular="product"):
        q, wq = radial_rule(radial_n, breaks)
        if angular == "octahedral":
            d, wa = octahedral_rule()
        else:
            d, wa = angular_rule(angular_order)
        meta = dict(radial_n=radial_n, angular_order=angular_order, breaks=tuple(breaks), angular=angular)
        return cls(q, wq, d, wa, tol, meta)

    def refined(self) -> "QuadratureRule":
        """Rule with twice the radial nodes and roughly twice the angular order."""
        m = self.meta
        ang = m.get("angular", "product")
        order = m.get("angular_order", 17)
        return QuadratureRule.build(
            2 * m.get("radial_n", len(self.radial_nodes)),
            order if ang == "octahedral" else 2 * order + 1,
            m.get("breaks", (1.0,)),
            self.tol,
            ang,
        )

    @property
    def n_points(self) -> int:
        return len(self.radial_nodes) * len(self.angular_weights)


def polarization_vectors(khat):
    """Two real unit polarization vectors orthogonal to ``khat`` and each other.

    Parameters
    ----------
    khat : array_like, shape (..., 3)

    Returns
    -------
    eps : ndarray, shape (..., 2, 3)
    """
    khat = np.asarray(khat, dtype=float)
    ref = np.zeros_like(khat)
    use_x = np.abs(khat[..., 2]) > 0.9
    ref[..., 2] = np.where(use_x, 0.0, 1.0)
    ref[..., 0] = np.where(use_x, 1.0, 0.0)
    e1 = np.cross(ref, khat)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(khat, e1)
    return np.stack([e1, e2], axis=-2)


def polarization_sum(khat, i: int, j: int) -> float:
    """Transverse projector entry ``delta_ij - khat_i khat_j``.

    ``i`` and ``j`` are zero-based Cartesian axes.
    """
    khat = np.asarray(khat, dtype=float)
    return float((i == j) - khat[i] * khat[j])


@dataclass(frozen=True)
class PhotonModes:
    """Flattened photon modes (momentum, polarization) of a quadrature rule.

    Attributes
    ----------
    kvec : ndarray, shape (n, 3)
    kmag : ndarray, shape (n,)
    eps : ndarray, shape (n, 3)
        Real polarization vector of each mode.
    weight : ndarray, shape (n,)
        Weight for ``d^3k``; summing ``f / |k|`` with these weights over both
        polarizations integrates ``sum_lambda int d^3k f / |k|``.
    """

    kvec: np.ndarray
    kmag: np.ndarray
    eps: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.kmag)

    @property
    def leg(self) -> np.ndarray:
        """Leg factor ``sqrt(weight / |k|)`` so that a contracted pair gives weight / |k|."""
        return np.sqrt(self.weight / self.kmag)


def photon_modes(rule: QuadratureRule) -> PhotonModes:
    """Expand a rule into modes, two polarizations per (radial, angular) node."""
    q, wq = rule.radial_nodes, rule.radial_weights
    d, wa = rule.directions, rule.angular_weights
    pol = polarization_vectors(d)  # (nd, 2, 3)
    kvec = (q[:, None, None, None] * d[None, :, None, :]) * np.ones((1, 1, 2, 1))
    eps = np.broadcast_to(pol[None], (len(q), len(d), 2, 3))
    # weights for d^3k: (q dq weight) * q * dOmega
    w = (wq * q)[:, None, None] * wa[None, :, None] * np.ones((1, 1, 2))
    kmag = np.broadcast_to(q[:, None, None], w.shape)
    return PhotonModes(
        kvec.reshape(-1, 3).copy(),
        kmag.reshape(-1).copy(),
        eps.reshape(-1, 3).copy(),
        w.reshape(-1).copy(),
    )


def _loop_once(f, legs, rule, polarized):
    q, wq = rule.radial_nodes, rule.radial_weights
    d, wa = rule.directions, rule.angular_weights
    if legs == 1:
        kv = q[:, None, None] * d[None, :, :]
        kmag = np.broadcast_to(q[:, None], kv.shape[:2])
        khat = np.broadcast_to(d[None], kv.shape)
        w = wq[:, None] * wa[None, :]
        if polarized:
            pol = polarization_vectors(d)
            vals = sum(f(kmag, khat, np.broadcast_to(pol[None, :, lam], kv.shape)) for lam in range(2))
        else:
            vals = f(kmag, khat)
        return float(np.sum(w * vals))
    if legs == 2:
        total = 0.0
        for i in range(len(q)):
            for a in range(len(d)):
                def inner(k2, kh2, *e2, _k1=q[i], _h1=d[a]):
                    return f(_k1, _h1, k2, kh2, *e2)
                total += wq[i] * wa[a] * _loop_once(inner, 1, rule, polarized)
        return total
    raise ValueError("legs must be 1 or 2")


def integrate_photon_loop(f, legs: int = 1, rule: QuadratureRule | None = None, polarized=False, check=False):
    """Integrate over contracted photon momenta with measure ``d^3q / |q|`` per pair.

    Parameters
    ----------
    f : callable
        ``f(kmag, khat)`` for one leg, ``f(k1, khat1, k2, khat2)`` for two.
        With ``polarized=True`` each leg additionally receives its real
        polarization vector and both polarizations are summed.
    legs : {1, 2}
        Number of contracted pairs.
    rule : QuadratureRule, optional
        Defaults to 32 radial nodes and angular order 17.
    check : bool
        If True, compare against a refined rule and raise
        :class:`ToleranceNotMet` when the difference exceeds ``rule.tol``.

    Returns
    -------
    float

    Examples
    --------
    >>> round(integrate_photon_loop(lambda k, h: 1.0 + 0 * k), 6)
    6.283185
    """
    if rule is None:
        rule = QuadratureRule.build()
    val = _loop_once(f, legs, rule, polarized)
    if check:
        ref = _loop_once(f, legs, rule.refined(), polarized)
        err = abs(ref - val)
        if err > rule.tol * max(1.0, abs(ref)):
            raise ToleranceNotMet(f"refinement difference {err:.3e} exceeds tol {rule.tol:.1e}")
        val = ref
    return val

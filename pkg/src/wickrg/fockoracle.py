"""Brute-force oracle: exact diagonalization in a truncated Fock space.

The photon field is replaced by finitely many modes (momentum, polarization,
quadrature weight) and the photon number is capped at ``nmax``.  The fiber
Hamiltonian

    H = H_f + (p - P_f - g A)^2 / 2

is compressed to that subspace.  ``A = sum_j c_j eps_j (a_j + a_j^*)`` with
``c_j = sqrt(w_j) kappa(k_j) / sqrt(k_j)``, so that ``<A^2>`` reproduces the
continuum value when the mode weights integrate ``d^3k`` exactly.

The module also contains a matrix-level test bench for the smooth Feshbach
map.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, lobpcg

from .formfactor import FormFactor, eval_kappa
from .quadrature import PhotonModes, QuadratureRule, photon_modes

__all__ = [
    "BasisTooLarge",
    "NoConvergence",
    "StepTooLarge",
    "FiberModel",
    "DiscretizedModes",
    "FockBasis",
    "build_hamiltonian",
    "diagonalize",
    "ground_energy_at",
    "second_order_energy",
    "mass_by_finite_difference",
    "energy_derivative",
    "feshbach_map",
    "feshbach_identity_suite",
]


class BasisTooLarge(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


class StepTooLarge(RuntimeError):
    pass


@dataclass(frozen=True)
class FiberModel:
    """Parameters of the fiber Hamiltonian at fixed total momentum.

    Parameters
    ----------
    p : float
        Magnitude of the conserved momentum, ``0 <= p < 1/3``; its direction is
        the z axis.
    sigma : float
        Infrared exponent of the form factor.
    g : float
        Coupling constant.
    formfactor : FormFactor, optional
        Defaults to the sharp cutoff with the given ``sigma``.
    """

    p: float = 0.0
    sigma: float = 0.0
    g: float = 0.0
    formfactor: FormFactor | None = None

    def __post_init__(self):
        if not 0 <= self.p < 1.0 / 3.0:
            raise ValueError("momentum must satisfy 0 <= p < 1/3")
        if self.g < 0:
            raise ValueError("g must be >= 0")
        if self.formfactor is None:
            object.__setattr__(self, "formfactor", FormFactor(sigma=self.sigma))
        elif self.formfactor.sigma != self.sigma:
            raise ValueError("formfactor.sigma must equal sigma")

    def with_p(self, p: float) -> "FiberModel":
        return FiberModel(p, self.sigma, self.g, self.formfactor)

    @property
    def pvec(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.p])


@dataclass(frozen=True)
class DiscretizedModes:
    """Photon modes used by the oracle.

    Attributes
    ----------
    modes : PhotonModes
    nmax_photons : int
    """

    modes: PhotonModes
    nmax_photons: int = 2

    @classmethod
    def from_rule(cls, radial_n=12, angular="octahedral", angular_order=3, nmax_photons=2, uv_cutoff=1.0):
        """Default oracle modes: Gauss-Jacobi radial nodes times a six-point angular rule."""
        rule = QuadratureRule.build(radial_n, angular_order, breaks=(uv_cutoff,), angular=angular)
        return cls(photon_modes(rule), nmax_photons)

    def rotated(self, rot: np.ndarray) -> "DiscretizedModes":
        """Rigidly rotate every mode by the orthogonal matrix ``rot``."""
        m = self.modes
        return DiscretizedModes(
            PhotonModes(m.kvec @ rot.T, m.kmag, m.eps @ rot.T, m.weight), self.nmax_photons
        )

    def couplings(self, ff: FormFactor) -> np.ndarray:
        m = self.modes
        return np.sqrt(m.weight) * eval_kappa(ff, m.kmag) / np.sqrt(m.kmag)

    def vacuum_A2(self, ff: FormFactor) -> float:
        """Discrete ``<Omega, A^2 Omega> = sum_j c_j^2 |eps_j|^2``."""
        return float(np.sum(self.couplings(ff) ** 2))


class FockBasis:
    """Occupation basis with at most ``nmax`` photons among ``n_modes`` modes.

    States are sorted tuples of mode indices (a multiset); the empty tuple is
    the vacuum.
    """

    def __init__(self, n_modes: int, nmax: int, max_dim: int = 400_000):
        dim = sum(_multichoose(n_modes, n) for n in range(nmax + 1))
        if dim > max_dim:
            raise BasisTooLarge(f"basis dimension {dim} exceeds {max_dim}")
        self.n_modes = n_modes
        self.nmax = nmax
        self.states = []
        for n in range(nmax + 1):
            self.states.extend(combinations_with_replacement(range(n_modes), n))
        self.index = {s: i for i, s in enumerate(self.states)}

    def __len__(self):
        return len(self.states)

    def number(self) -> np.ndarray:
        return np.array([len(s) for s in self.states])

    def occupation_sums(self, values: np.ndarray) -> np.ndarray:
        """``sum_j n_j values[j]`` for each state; ``values`` may carry trailing axes."""
        values = np.asarray(values, dtype=float)
        out = np.zeros((len(self.states),) + values.shape[1:])
        for i, s in enumerate(self.states):
            if s:
                out[i] = values[list(s)].sum(axis=0)
        return out

    def creation(self, amplitudes: np.ndarray) -> sp.csr_matrix:
        """Sparse matrix of ``sum_j amplitudes[j] a_j^*`` restricted to the basis."""
        rows, cols, vals = [], [], []
        for i, s in enumerate(self.states):
            if len(s) >= self.nmax:
                continue
            for j in range(self.n_modes):
                if amplitudes[j] == 0.0:
                    continue
                t = tuple(sorted(s + (j,)))
                rows.append(self.index[t])
                cols.append(i)
                vals.append(amplitudes[j] * np.sqrt(t.count(j)))
        n = len(self.states)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _multichoose(n, k):
    from math import comb

    return comb(n + k - 1, k)


def build_hamiltonian(m: FiberModel, d: DiscretizedModes, basis: FockBasis | None = None) -> sp.csr_matrix:
    """Compressed fiber Hamiltonian as a real symmetric sparse matrix.

    Every term is written in normal order before truncation, so the matrix is
    the exact compression ``P H P`` of the mode-discretized Hamiltonian.

    Parameters
    ----------
    m : FiberModel
    d : DiscretizedModes
    basis : FockBasis, optional
        Reused between calls with the same modes.

    Returns
    -------
    scipy.sparse.csr_matrix
    """
    modes = d.modes
    if basis is None:
        basis = FockBasis(len(modes), d.nmax_photons)
    c = d.couplings(m.formfactor)
    hf = basis.occupation_sums(modes.kmag)
    pf = basis.occupation_sums(modes.kvec)
    kin = m.pvec[None, :] - pf
    diag = hf + 0.5 * np.sum(kin**2, axis=1) + 0.5 * m.g**2 * np.sum(c**2)
    H = sp.diags(diag).tocsr()
    if m.g == 0.0:
        return H
    for a in range(3):
        B = basis.creation(c * modes.eps[:, a])  # creation part of A_a
        Bt = B.T.tocsr()
        K = sp.diags(kin[:, a])
        # -(g/2) [(p - P_f) A + A (p - P_f)]
        lin = K @ (B + Bt) + (B + Bt) @ K
        H = H - 0.5 * m.g * lin
        # (g^2/2) :A_a A_a:
        H = H + 0.5 * m.g**2 * (B @ B + Bt @ Bt + 2.0 * (B @ Bt))
    H = 0.5 * (H + H.T)
    return H.tocsr()


def diagonalize(H, k: int = 2, tol: float = 1e-11, maxiter: int = 600):
    """Smallest eigenvalue, its eigenvector and the gap to the next eigenvalue.

    Small matrices are diagonalized densely; larger ones with LOBPCG and a
    diagonal preconditioner centred at the smallest diagonal entry.

    Returns
    -------
    E0 : float
    vec : ndarray
    gap : float
    """
    n = H.shape[0]
    if n <= 2000:
        A = H.toarray() if sp.issparse(H) else np.asarray(H)
        w, v = np.linalg.eigh(A)
        gap = float(w[1] - w[0]) if n > 1 else np.inf
        return float(w[0]), v[:, 0], gap
    H = sp.csr_matrix(H)
    dg = H.diagonal()
    i0 = int(np.argmin(dg))
    den = np.abs(dg - dg[i0]) + 1e-4

    def prec(x):
        return x / (den[:, None] if x.ndim == 2 else den)

    M = LinearOperator((n, n), matvec=prec, matmat=prec)
    X = np.random.default_rng(12345).normal(size=(n, k + 1)) * 1e-2
    X[i0, 0] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w, v = lobpcg(H, X, M=M, largest=False, tol=tol, maxiter=maxiter)
    order = np.argsort(w)
    w, v = w[order], v[:, order]
    res = np.linalg.norm(H @ v[:, 0] - w[0] * v[:, 0])
    if not res < 1e-7:
        raise NoConvergence(f"ground-state residual {res:.2e}")
    return float(w[0]), v[:, 0], float(w[1] - w[0])


def ground_energy_at(m: FiberModel, d: DiscretizedModes, basis: FockBasis | None = None) -> float:
    """Ground-state energy of the compressed Hamiltonian."""
    return diagonalize(build_hamiltonian(m, d, basis))[0]


def second_order_energy(m: FiberModel, d: DiscretizedModes) -> float:
    """Rayleigh-Schroedinger energy to second order in ``H - H_f - (p - P_f)^2 / 2``.

    Computed directly from the mode data, independently of the matrix:
    the one-photon amplitude is ``-g c_j <p, eps_j>`` and the two-photon
    amplitude is ``g^2 c_i c_j <eps_i, eps_j>`` (``g^2 c_i^2 / sqrt(2)`` for a
    doubly occupied mode).
    """
    modes = d.modes
    c = d.couplings(m.formfactor)
    p = m.pvec
    e0 = 0.5 * m.p**2
    E = e0 + 0.5 * m.g**2 * np.sum(c**2)
    one = -m.g * c * (modes.eps @ p)
    en1 = modes.kmag + 0.5 * np.sum((p - modes.kvec) ** 2, axis=1)
    E -= np.sum(one**2 / (en1 - e0))
    if d.nmax_photons >= 2:
        dots = modes.eps @ modes.eps.T
        amp = m.g**2 * np.outer(c, c) * dots
        np.fill_diagonal(amp, m.g**2 * c**2 / np.sqrt(2.0))
        ktot = modes.kvec[:, None, :] + modes.kvec[None, :, :]
        en2 = modes.kmag[:, None] + modes.kmag[None, :] + 0.5 * np.sum((p - ktot) ** 2, axis=2)
        iu = np.triu_indices(len(c))
        E -= np.sum(amp[iu] ** 2 / (en2[iu] - e0))
    return float(E)


def mass_by_finite_difference(m: FiberModel, d: DiscretizedModes, h: float = 0.02, tol: float = 1e-3):
    """Inverse renormalized mass ``d^2 E / dp^2`` at ``p = 0`` by central differences.

    Uses ``E(-h) = E(h)`` and Richardson extrapolation over ``h`` and ``h/2``.

    Returns
    -------
    inv_mass : float
        Richardson-extrapolated ``d^2E/dp^2``.
    info : dict
        Raw differences and energies.

    Raises
    ------
    StepTooLarge
        When the two step sizes disagree by more than ``tol`` relative to the
        interaction-induced part ``1 - inv_mass``.
    """
    basis = FockBasis(len(d.modes), d.nmax_photons)
    E0 = ground_energy_at(m.with_p(0.0), d, basis)
    Eh = ground_energy_at(m.with_p(h), d, basis)
    Eh2 = ground_energy_at(m.with_p(h / 2), d, basis)
    d_h = 2.0 * (Eh - E0) / h**2
    d_h2 = 2.0 * (Eh2 - E0) / (h / 2) ** 2
    rich = (4.0 * d_h2 - d_h) / 3.0
    scale = max(abs(1.0 - rich), 1e-14)
    if m.g > 0 and abs(d_h - d_h2) > tol * max(scale, 1e-3) + 1e-9:
        raise StepTooLarge(f"step disagreement {abs(d_h - d_h2):.3e}")
    return float(rich), dict(E0=E0, Eh=Eh, Eh2=Eh2, d_h=d_h, d_h2=d_h2, h=h)


def energy_derivative(m: FiberModel, d: DiscretizedModes, h: float = 1e-3):
    """Central-difference ``dE/d|p|`` at ``m.p`` (one-sided mirror at ``p = 0``).

    Returns
    -------
    E : float
    dE : float
    """
    basis = FockBasis(len(d.modes), d.nmax_photons)
    E = ground_energy_at(m, d, basis)
    if m.p == 0.0:
        return E, 0.0
    Ep = ground_energy_at(m.with_p(m.p + h), d, basis)
    Em = ground_energy_at(m.with_p(m.p - h), d, basis)
    return E, (Ep - Em) / (2 * h)


# ---------------------------------------------------------------------------
# matrix-level smooth Feshbach map


def feshbach_map(H, tau, chi):
    """Smooth Feshbach map and intertwining operators for dense matrices.

    ``chi`` must commute with ``tau``; ``chibar = sqrt(1 - chi^2)`` is taken
    in the joint eigenbasis (both are diagonal in the test bench).

    Returns
    -------
    dict with F, Q, Qs, Rbar, chibar
    """
    n = H.shape[0]
    chib = _sqrt_psd(np.eye(n) - chi @ chi)
    omega = H - tau
    Hbar = tau + chib @ omega @ chib
    # invert on Ran(chibar); on its complement Hbar = tau
    Rbar = np.linalg.inv(Hbar)
    F = tau + chi @ omega @ chi - chi @ omega @ chib @ Rbar @ chib @ omega @ chi
    Q = chi - chib @ Rbar @ chib @ omega @ chi
    Qs = chi - chi @ omega @ chib @ Rbar @ chib
    return dict(F=F, Q=Q, Qs=Qs, Rbar=Rbar, chibar=chib)


def _sqrt_psd(A):
    w, v = np.linalg.eigh(0.5 * (A + A.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _random_instance(rng, n):
    tau = np.diag(rng.uniform(0.5, 2.0, n))
    vals = rng.uniform(0.0, 1.0, n)
    vals[: n // 4] = 1.0
    vals[n // 4 : n // 2] = 0.0
    rng.shuffle(vals)
    chi = np.diag(vals)
    omega = rng.normal(size=(n, n))
    omega = 0.15 * (omega + omega.T)
    return tau, chi, omega


def feshbach_identity_suite(random_seed=0, n_instances: int = 100, dim: int = 20, tol: float = 1e-10):
    """Check the algebraic identities of the smooth Feshbach map on random matrices.

    Identities (relative residuals):

    1. ``F^-1 = chi H^-1 chi + chibar tau^-1 chibar``
    2. ``H Q = chi F`` and ``Q# H = F chi``
    3. ``Q# H Q = F - F chibar tau^-1 chibar F``
    4. composition ``F_chi2(H, tau) = F_chi2(F_chi1(H, tau), tau)`` when ``chi1 chi2 = chi2``
    5. ``H psi = 0`` iff ``F chi psi = 0``, and ``F zeta = 0`` implies ``H Q zeta = 0``

    Returns
    -------
    dict
        ``passed`` (bool), ``max_residual`` per identity, ``failures`` list.
    """
    rng = np.random.default_rng(random_seed)
    names = ["inverse", "intertwining", "QHQ", "composition", "kernel"]
    worst = {k: 0.0 for k in names}
    failures = []

    def rel(a, b):
        return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), 1e-300))

    for inst in range(n_instances):
        tau, chi, omega = _random_instance(rng, dim)
        H = tau + omega
        fm = feshbach_map(H, tau, chi)
        F, Q, Qs, chib = fm["F"], fm["Q"], fm["Qs"], fm["chibar"]
        tinv = np.linalg.inv(tau)
        res = {}
        res["inverse"] = rel(np.linalg.inv(F), chi @ np.linalg.inv(H) @ chi + chib @ tinv @ chib)
        res["intertwining"] = max(rel(H @ Q, chi @ F), rel(Qs @ H, F @ chi))
        res["QHQ"] = rel(Qs @ H @ Q, F - F @ chib @ tinv @ chib @ F)
        # nested cutoffs: chi1 = 1 wherever chi2 > 0
        c2 = np.diag(chi).copy()
        c1 = np.where(c2 > 0, 1.0, rng.uniform(0.0, 1.0, dim))
        chi1, chi2 = np.diag(c1), np.diag(c2)
        F1 = feshbach_map(H, tau, chi1)["F"]
        res["composition"] = rel(feshbach_map(H, tau, chi2)["F"], feshbach_map(F1, tau, chi2)["F"])
        # kernel correspondence: shift H so that it has an exact zero mode
        w, v = np.linalg.eigh(H)
        H0 = H - w[0] * np.eye(dim)
        fm0 = feshbach_map(H0, tau, chi)
        psi = v[:, 0]
        r1 = np.linalg.norm(fm0["F"] @ chi @ psi) / max(np.linalg.norm(chi @ psi), 1e-300)
        wf, vf = np.linalg.eig(fm0["F"])
        zeta = np.real(vf[:, np.argmin(np.abs(wf))])
        r2 = np.linalg.norm(H0 @ fm0["Q"] @ zeta) / max(np.linalg.norm(fm0["Q"] @ zeta), 1e-300)
        res["kernel"] = float(max(r1, r2) / max(1.0, np.linalg.norm(H0, 2)))
        for k, r in res.items():
            worst[k] = max(worst[k], r)
            if not r < tol:
                failures.append((inst, k, r))
    return dict(passed=not failures, max_residual=worst, failures=failures, n_instances=n_instances)

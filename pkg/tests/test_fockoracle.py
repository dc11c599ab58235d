from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from wickrg.fockoracle import (
    BasisTooLarge,
    DiscretizedModes,
    FiberModel,
    FockBasis,
    build_hamiltonian,
    diagonalize,
    energy_derivative,
    feshbach_identity_suite,
    feshbach_map,
    ground_energy_at,
    mass_by_finite_difference,
    second_order_energy,
)
from wickrg.formfactor import FormFactor
from wickrg.quadrature import PhotonModes


@pytest.fixture(scope="module")
def modes():
    return DiscretizedModes.from_rule(radial_n=4, nmax_photons=2)


def one_mode(k=0.4, eps=(0.0, 0.0, 1.0), kdir=(1.0, 0.0, 0.0), weight=0.3, nmax=4):
    kvec = k * np.asarray(kdir, float)[None, :]
    pm = PhotonModes(kvec, np.array([k]), np.asarray(eps, float)[None, :], np.array([weight]))
    return DiscretizedModes(pm, nmax)


def dense_one_mode(m, d):
    """The same Hamiltonian for a single mode, written with ladder matrices."""
    n = d.nmax_photons + 1
    a = np.diag(np.sqrt(np.arange(1, n)), 1)
    ad = a.T
    N = ad @ a
    c = float(d.couplings(m.formfactor)[0])
    k, kv, eps = d.modes.kmag[0], d.modes.kvec[0], d.modes.eps[0]
    H = k * N + 0.5 * m.g**2 * c**2 * (eps @ eps) * np.eye(n)
    for i in range(3):
        K = m.pvec[i] * np.eye(n) - kv[i] * N
        A = c * eps[i] * (a + ad)
        H = H + 0.5 * K @ K - 0.5 * m.g * (K @ A + A @ K)
        # normal-ordered square; the vacuum part sits in the constant above
        H = H + 0.5 * m.g**2 * c**2 * eps[i] ** 2 * (a @ a + ad @ ad + 2 * ad @ a)
    return H


@pytest.mark.parametrize("p", [0.0, 0.2])
def test_one_mode_matches_ladder_construction(p):
    d = one_mode(eps=(0.0, 0.6, 0.8))
    m = FiberModel(p, 0.0, 0.7)
    H = build_hamiltonian(m, d).toarray()
    # occupation states of one mode are already ordered by photon number
    assert np.allclose(H, dense_one_mode(m, d), atol=1e-14)


def test_creation_operator_factors():
    B = FockBasis(1, 3).creation(np.array([2.0])).toarray()
    assert np.allclose(np.diag(B, -1), 2.0 * np.sqrt([1, 2, 3]))


def test_basis_dimension_and_limit():
    b = FockBasis(5, 2)
    assert len(b) == 1 + 5 + 15
    assert list(np.bincount(b.number())) == [1, 5, 15]
    with pytest.raises(BasisTooLarge):
        FockBasis(200, 3, max_dim=10_000)


@pytest.mark.parametrize("p", [0.0, 0.1, 0.3])
def test_free_hamiltonian_is_diagonal(modes, p):
    H = build_hamiltonian(FiberModel(p, 0.0, 0.0), modes)
    assert H.nnz <= H.shape[0]
    E0, _, gap = diagonalize(H)
    assert E0 == pytest.approx(0.5 * p**2, abs=1e-15)
    assert gap > 0


def test_hamiltonian_is_symmetric(modes):
    H = build_hamiltonian(FiberModel(0.2, 0.0, 0.3), modes)
    assert abs(H - H.T).max() == 0.0


def test_more_photons_lower_the_energy(modes):
    m = FiberModel(0.1, 0.0, 0.3)
    E1 = ground_energy_at(m, DiscretizedModes(modes.modes, 1))
    E2 = ground_energy_at(m, modes)
    assert E2 <= E1 + 1e-14


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rotation_invariance_at_rest(modes, seed):
    rot = Rotation.random(random_state=seed).as_matrix()
    m = FiberModel(0.0, 0.0, 0.3)
    assert ground_energy_at(m, modes.rotated(rot)) == pytest.approx(ground_energy_at(m, modes), abs=1e-12)


def test_rotation_about_momentum_axis(modes):
    rot = Rotation.from_euler("z", 0.7).as_matrix()
    m = FiberModel(0.2, 0.0, 0.3)
    assert ground_energy_at(m, modes.rotated(rot)) == pytest.approx(ground_energy_at(m, modes), abs=1e-12)


@pytest.mark.parametrize("p,power", [(0.0, 6), (0.2, 4)])
def test_second_order_agreement(modes, p, power):
    # the remainder is O(g**4), and O(g**6) at rest where transversality kills the odd terms
    diffs = []
    for g in (0.02, 0.01):
        m = FiberModel(p, 0.0, g)
        diffs.append(abs(ground_energy_at(m, modes) - second_order_energy(m, modes)))
    assert diffs[1] < 1e-7
    assert diffs[0] / diffs[1] == pytest.approx(2.0**power, rel=0.05)


def test_wick_constant_in_vacuum_entry(modes):
    m = FiberModel(0.0, 0.0, 0.3)
    H = build_hamiltonian(m, modes)
    assert H[0, 0] == pytest.approx(0.5 * 0.09 * modes.vacuum_A2(m.formfactor), rel=1e-14)


def test_mass_and_derivative_free(modes):
    m = FiberModel(0.0, 0.0, 0.0)
    inv, info = mass_by_finite_difference(m, modes)
    assert inv == pytest.approx(1.0, abs=1e-10)
    E, dE = energy_derivative(m.with_p(0.2), modes)
    assert E == pytest.approx(0.02)
    assert dE == pytest.approx(0.2, rel=1e-8)
    assert energy_derivative(m, modes) == (0.0, 0.0)


def test_interaction_makes_particle_heavier(modes):
    inv, _ = mass_by_finite_difference(FiberModel(0.0, 0.0, 0.1), modes)
    assert 0 < inv < 1


@pytest.mark.parametrize(
    "kw",
    [dict(p=1.0 / 3.0), dict(p=-0.1), dict(g=-1.0), dict(sigma=0.1, formfactor=FormFactor(0.0))],
)
def test_model_validation(kw):
    with pytest.raises(ValueError):
        FiberModel(**kw)


class TestFeshbachMap:
    @classmethod
    def setup_class(cls):
        rng = np.random.default_rng(3)
        n = 8
        cls.tau = np.diag(rng.uniform(0.5, 2.0, n))
        om = rng.normal(size=(n, n))
        cls.H = cls.tau + 0.1 * (om + om.T)

    def test_identity_cutoff_returns_H(self):
        F = feshbach_map(self.H, self.tau, np.eye(8))["F"]
        assert np.allclose(F, self.H, atol=1e-14)

    def test_zero_cutoff_returns_tau(self):
        F = feshbach_map(self.H, self.tau, np.zeros((8, 8)))["F"]
        assert np.allclose(F, self.tau, atol=1e-14)

    def test_projection_is_schur_complement(self):
        P = np.diag([1.0] * 4 + [0.0] * 4)
        F = feshbach_map(self.H, self.tau, P)["F"]
        A, B, C = self.H[:4, :4], self.H[:4, 4:], self.H[4:, 4:]
        assert np.allclose(F[:4, :4], A - B @ np.linalg.solve(C, B.T), atol=1e-13)
        assert np.allclose(F[4:, 4:], self.tau[4:, 4:], atol=1e-14)

    def test_suite(self):
        rep = feshbach_identity_suite(random_seed=1, n_instances=20)
        assert rep["passed"], rep["failures"]
        assert max(rep["max_residual"].values()) < 1e-10

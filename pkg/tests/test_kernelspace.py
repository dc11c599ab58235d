from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from wickrg.formfactor import CutoffProfile
from wickrg.initcond import wick_normal_form
from wickrg.kernelspace import (
    AnalyticT,
    KernelFamily,
    Leg,
    PolydiscParams,
    SupLattice,
    WickKernel,
    compute_K_Theta,
    degree2_channels,
    in_polydisc,
    kernel_from_dict,
    kernel_to_dict,
    norm_family,
    norm_sigma,
    norm_sigma_sharp,
    norm_T,
)
from wickrg.kernelspace import _PolyForm
from wickrg.quadrature import polarization_vectors
from wickrg.wickflow import free_comparison_T, rescale

G = 0.1
LAT = SupLattice(level=1, n_X0=5, n_r=2)


@pytest.fixture(scope="module")
def w0():
    return wick_normal_form(0.0, G, 0.0)


def _random_like(k: WickKernel, seed: int, ell0=False) -> WickKernel:
    rng = np.random.default_rng(seed)
    chans = k.channels
    if ell0:
        chans = tuple(c for c in chans if c.ell == 0)
    shape = (len(chans),) + k.coeffs.shape[1:]
    return WickKernel(k.degree, chans, rng.normal(size=shape) * 0.1, k.grid, k.sigma, k.plateau, k.p)


def test_constant_w11_norm(w0):
    assert norm_sigma(w0.kernel(1, 1)) == pytest.approx(4 * math.pi * G**2, rel=1e-10)


def test_w10_norm(w0):
    # sup over |X| <= X0 < 1 of |<X, eps>| approaches 1
    assert norm_sigma(w0.kernel(1, 0)) == pytest.approx(2 * math.sqrt(math.pi) * G, rel=1e-5)


def test_zero_kernel(w0):
    z = w0.kernel(1, 0).scaled(0.0)
    assert norm_sigma(z) == 0.0
    assert norm_sigma_sharp(z) == 0.0


def test_w11_sharp_norm_has_no_derivative_terms(w0):
    k = w0.kernel(1, 1)
    assert norm_sigma_sharp(k) == pytest.approx(norm_sigma(k), rel=1e-10)


def test_w10_sharp_norm_by_hand(w0):
    # value term plus one first-derivative term per Cartesian axis, d_X <X, eps> = eps
    lat = SupLattice()
    eps = polarization_vectors(lat.directions()[:1])[0]
    hand = 2 * math.sqrt(math.pi) * G * (1 + np.sum(np.max(np.abs(eps), axis=0)))
    assert norm_sigma_sharp(w0.kernel(1, 0), lat) == pytest.approx(hand, rel=1e-5)


@settings(max_examples=10, deadline=None)
@given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
def test_homogeneity(c):
    w = wick_normal_form(0.0, G, 0.0)
    for deg in ((1, 0), (2, 0)):
        k = _random_like(w.kernel(*deg), 3)
        assert norm_sigma(k.scaled(c), LAT) == pytest.approx(abs(c) * norm_sigma(k, LAT), rel=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_triangle_inequality(seed):
    w = wick_normal_form(0.0, G, 0.0)
    a, b = _random_like(w.kernel(1, 0), seed), _random_like(w.kernel(1, 0), seed + 1)
    assert norm_sigma(a + b, LAT) <= norm_sigma(a, LAT) + norm_sigma(b, LAT) + 1e-14


def test_refinement_monotone(w0):
    k = _random_like(w0.kernel(1, 0), 7)
    coarse = SupLattice(level=1, n_X0=3, n_r=2)
    assert norm_sigma(k, coarse.refined()) >= norm_sigma(k, coarse) - 1e-15


@pytest.mark.parametrize("deg", [(1, 0), (1, 1), (2, 0)])
def test_rescale_a_priori_bound(w0, deg):
    k = _random_like(w0.kernel(*deg), 11, ell0=True)
    rho = 0.5
    assert norm_sigma(rescale(k, rho), LAT) <= rho ** (sum(deg) - 1) * norm_sigma(k, LAT) * (1 + 1e-12)


def test_rotation_covariance_at_zero_momentum(w0):
    k = _random_like(w0.kernel(2, 0), 5, ell0=True)
    rng = np.random.default_rng(0)
    R = Rotation.random(random_state=1).as_matrix()
    B = 20
    X0 = rng.uniform(0.1, 0.9, B)
    Xv = rng.normal(size=(B, 3))
    Xv *= (X0 * rng.uniform(0, 1, B) / np.linalg.norm(Xv, axis=1))[:, None]
    X = np.column_stack([X0, Xv])
    kh = rng.normal(size=(2, B, 3))
    kh /= np.linalg.norm(kh, axis=-1, keepdims=True)
    km = rng.uniform(0.05, 0.95, (2, B))
    ep = polarization_vectors(kh)[:, :, 0]
    legs = [Leg(km[i], kh[i], ep[i]) for i in range(2)]
    rlegs = [Leg(km[i], kh[i] @ R.T, ep[i] @ R.T) for i in range(2)]
    RX = np.column_stack([X0, Xv @ R.T])
    assert np.allclose(k.evaluate(X, legs), k.evaluate(RX, rlegs), rtol=1e-12, atol=1e-15)


def test_hermitian_partner(w0):
    k10, k01 = w0.kernel(1, 0), w0.kernel(0, 1)
    leg = Leg(np.array([0.4]), np.array([[0.0, 0.6, 0.8]]), polarization_vectors(np.array([0.0, 0.6, 0.8]))[None, 0])
    X = np.array([[0.5, 0.1, -0.2, 0.3]])
    assert np.allclose(k10.evaluate(X, [leg]), k01.evaluate(X, [leg]))


def test_polyform_fast_path_matches_direct():
    rng = np.random.default_rng(0)
    c0 = rng.normal(size=(1, 7, 5, 1))
    c1 = rng.normal(size=(1, 7, 5, 1, 4))
    c2 = rng.normal(size=(1, 7, 5, 1, 4, 4))
    c2 = c2 + np.swapaxes(c2, -1, -2)
    f = _PolyForm(c0, c1, c2)
    for Y in (rng.normal(size=(33, 1, 1, 128, 4)), rng.normal(size=(128, 4))):
        ref = c0 + np.einsum("...a,...a->...", Y, c1) + np.einsum("...a,...ab,...b->...", Y, c2, Y)
        assert np.allclose(f(Y), ref, rtol=1e-12, atol=1e-12)


def test_T_vanishes_at_origin(w0):
    assert abs(float(w0.T.tilde(np.zeros((1, 4)))[0])) < 1e-15


def test_degree_cap_enforced(w0):
    with pytest.raises(ValueError):
        KernelFamily(-1, 0.0, 0.0, w0.T, dict(w0.w), degree_cap=1)


def test_serialization_roundtrip(w0):
    k = _random_like(w0.kernel(2, 0), 2)
    back = kernel_from_dict(kernel_to_dict(k))
    assert back.channels == k.channels and np.array_equal(back.coeffs, k.coeffs)
    with pytest.raises(ValueError):
        kernel_from_dict(dict(kernel_to_dict(k), schema=-1))


class TestNormT:
    def test_self_difference_is_zero(self):
        T0 = free_comparison_T(0.0, 0.5)
        assert norm_T(T0, 1.0, LAT, reference=T0) == 0.0

    def test_overlap_region_contributes(self):
        p, lam = 0.2, 0.3
        T0 = free_comparison_T(p, lam)
        naive = AnalyticT(lambda X: -p * X[..., 3] + lam * np.sum(X[..., 1:] ** 2, axis=-1), unbounded=True)
        diff = AnalyticT(lambda X: T0.full(X) - naive.full(X), unbounded=True)
        assert norm_T(diff, 1.0, LAT) > 0

    def test_fixed_point_below_overlap(self):
        # below X0 = 3/4 the comparison kernel is X0 - |p| X_par + lambda X^2
        X = LAT.x_points(0.0, 0.7)
        T0 = free_comparison_T(0.2, 0.3)
        ref = X[:, 0] - 0.2 * X[:, 3] + 0.3 * np.sum(X[:, 1:] ** 2, axis=1)
        assert np.allclose(T0.full(X), ref, atol=1e-14)


@pytest.fixture(scope="module")
def sharp_norms(w0):
    return {d: norm_sigma_sharp(k, LAT) for d, k in w0.all_kernels().items()}


class TestFamilyNorms:
    def test_free_family(self):
        w = wick_normal_form(0.0, 0.0, 0.0)
        assert norm_family(w, lattice=LAT)["w1"] == 0.0

    def test_initial_family_is_sum_of_kernel_norms(self, w0, sharp_norms):
        nf = norm_family(w0, lattice=LAT)
        hand = sum(w0.xi ** -sum(d) * v for d, v in sharp_norms.items())
        assert nf["w1"] == pytest.approx(hand, rel=1e-14)

    def test_larger_xi_decreases_norm(self, w0, sharp_norms):
        a = sum(w0.xi ** -sum(d) * v for d, v in sharp_norms.items())
        b = sum((2 * w0.xi) ** -sum(d) * v for d, v in sharp_norms.items())
        assert 0 < b < a


class TestPolydisc:
    def _free(self, lam=0.5, z=0.01):
        T0 = free_comparison_T(0.0, lam)
        return KernelFamily(0, z, z, T0, {}), T0

    def test_free_family_member(self):
        w, T0 = self._free()
        rep = in_polydisc(w, PolydiscParams(1e-6, 1e-6), T0, lattice=LAT)
        assert rep["member"]

    def test_perturbed_T_is_not_member(self):
        w, T0 = self._free()
        delta = 1e-3
        T = AnalyticT(lambda X: T0.tilde(X) + 2 * delta * X[..., 0] ** 2)
        from dataclasses import replace

        rep = in_polydisc(replace(w, T=T), PolydiscParams(1.0, delta), T0, lattice=LAT)
        assert not rep["member"] and not rep["T"][0] and rep["w1"][0]

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            PolydiscParams(-1.0, 0.1)


class TestKTheta:
    def test_step_profile(self):
        assert compute_K_Theta(CutoffProfile.step(), 0.5) == 1.0

    def test_default_profile_stable_under_refinement(self):
        lat = SupLattice(level=1, n_X0=9, n_r=3)
        a = compute_K_Theta(CutoffProfile(), 0.5, lattice=lat, n_samples=6)
        b = compute_K_Theta(CutoffProfile(), 0.5, lattice=SupLattice(level=1, n_X0=17, n_r=3), n_samples=6)
        assert a >= 1.0
        assert abs(a - b) <= 0.01 * b

    def test_independent_of_coupling(self):
        # the constant is a property of the T sector only; the signature takes no coupling
        import inspect

        assert "g" not in inspect.signature(compute_K_Theta).parameters

"""Exact diagonalization of a few-mode fiber Hamiltonian.

Replace the photon field by a radial Gauss rule times six directions, cap the
photon number at two and diagonalize.  At small coupling the ground energy
matches second-order perturbation theory, and the curvature of E(p) at rest
gives the inverse effective mass.
"""
import numpy as np

from wickrg.fockoracle import (
    DiscretizedModes,
    FiberModel,
    energy_derivative,
    ground_energy_at,
    mass_by_finite_difference,
    second_order_energy,
)

d = DiscretizedModes.from_rule(radial_n=6, nmax_photons=2)
print("modes:", len(d.modes), " discrete <A^2>:", d.vacuum_A2(FiberModel().formfactor), " 4 pi =", 4 * np.pi)

print(f"\n{'g':>6} {'p':>5} {'E0':>16} {'2nd order':>16} {'diff':>10}")
for g in (0.01, 0.02, 0.05):
    for p in (0.0, 0.2):
        m = FiberModel(p, 0.0, g)
        E0 = ground_energy_at(m, d)
        E2 = second_order_energy(m, d)
        print(f"{g:6.2f} {p:5.2f} {E0:16.12f} {E2:16.12f} {abs(E0 - E2):10.2e}")

# inverse mass by Richardson-extrapolated second differences
for g in (0.02, 0.05):
    inv, info = mass_by_finite_difference(FiberModel(0.0, 0.0, g), d)
    print(f"\ng = {g}: 1/m* = {inv:.8f}, (1 - 1/m*)/g^2 = {(1 - inv) / g**2:.4f}")

# the slope of E(|p|) never exceeds sqrt(2 E)
E, dE = energy_derivative(FiberModel(0.2, 0.0, 0.05), d)
print(f"\nE(0.2) = {E:.8f}, dE/dp = {dE:.8f}, sqrt(2E) = {np.sqrt(2 * E):.8f}")

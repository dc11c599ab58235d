"""Leading-order mass constants of the first two decimations.

The first decimation removes photons above the top cutoff; the second removes
the shell between rho and 1.  Their contributions to the mass series add up to
a single integral over the scale-rho cutoff, and approach the limiting
constant tilde_c2 = 2 log(3/2) as rho shrinks.
"""
import math

from wickrg.formfactor import FormFactor
from wickrg.spectral import leading_constants, tilde_c2
from wickrg.wickflow import FlowConfig

print("tilde_c2 for the sharp form factor:", tilde_c2(), " 2 log 1.5 =", 2 * math.log(1.5))
for lam in (0.5, 2.0, 4.0):
    print(f"  cutoff {lam}: {tilde_c2(FormFactor(0.0, lam)):.12f}  closed form {2 * math.log(1 + lam / 2):.12f}")

print()
print(f"{'rho':>8} {'C_-1':>12} {'C_0':>12} {'sum':>12} {'one integral':>14} {'K':>8}")
for rho in (0.5, 0.25, 0.125, 0.0625):
    lc = leading_constants(FlowConfig(g=0.05, rho=rho))
    print(f"{rho:8.4f} {lc.C_minus1:12.8f} {lc.C_0:12.8f} {lc.total:12.8f} {lc.seam:14.8f} {lc.K:8.4f}")

# K stays roughly constant: the two-scale sum misses tilde_c2 by O(rho).
# The mass coefficient of g**2 follows by multiplying with 16 pi / 3.
print()
print("m* - 1 ~ g^2 *", 16 * math.pi / 3 * tilde_c2())

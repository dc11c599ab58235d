"""One renormalization step from the Wick-ordered Hamiltonian.

The scale -1 family is decimated onto photon energies below 1 and rescaled.
We look at the constant part E(z), the change of the X0 slope and of the
transverse curvature (dgamma1, dgamma2), the truncation budget and the
soft-photon sum rules of the new family.  Takes about twenty seconds.
"""
import math

from wickrg.initcond import first_decimation
from wickrg.spectral import leading_constants, tilde_c2
from wickrg.sumrules import check_sum_rules, marginal_cancellation_probe
from wickrg.wickflow import FlowConfig

g = 0.05
cfg = FlowConfig(g=g, rho=0.25, pairs_window=(1, 1, 0))
fam, rep = first_decimation(0.0, g, 0.0, cfg)

print("scale:", fam.scale, " E(z) =", fam.E, " dE/dz =", fam.dE)
print("dgamma1 =", rep.dgamma1, " dgamma2 =", rep.dgamma2)
# at leading order dgamma2 is -(16 pi / 3) g^2 C_-1, the first-decimation share of tilde_c2
lc = leading_constants(cfg)
print("leading order:", -16 * math.pi / 3 * g**2 * lc.C_minus1, " (tilde_c2 =", tilde_c2(), ")")
print("kernel sizes:", {k: f"{v:.3e}" for k, v in rep.kernel_sizes.items()})
print("truncation budget:", f"{rep.budget.total():.3e}")

sr = check_sum_rules(fam, 1.0, g=g)
print("\nsum rules, worst residual:", f"{sr.max_residual:.3e}")
for k, r in sr.residuals.items():
    print(f"  {k}: residual {r:.3e}  size {sr.scale[k]:.3e}  fitted strength {sr.mu_fit[k]:.4f}")
print("marginal probe at rest:", marginal_cancellation_probe(fam))

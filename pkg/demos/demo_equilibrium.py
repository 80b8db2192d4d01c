"""
Fluid equilibria and asymptotic delays
======================================

The fixed point of the fluid model is geometric, ``s_i* = lam (lam P0*)^(i-1)``,
so everything about the large-system delay is contained in one number, the
probability ``P0*`` that the dispatcher has no token.
"""

import numpy as np

from rcpb import Regime
from rcpb.fluid import (FluidParams, constrained_delay, equilibrium, phase_transition_limit,
                        power_of_d_delay)

lam = 0.9

###############################################################################
# One fixed point per regime. High message drives P0* to zero, high memory does
# too once mu is large enough, and the constrained regime keeps it positive.

for regime in (Regime.high_memory(20.0), Regime.high_memory(2.0), Regime.high_message(1),
               Regime.constrained(2, lam / (1 - lam))):
    eq = equilibrium(FluidParams(lam, regime))
    print(f"{regime.kind.value:13s} P0*={eq.p0_star:.4f} delay={eq.delay:.4f} "
          f"s*[:4]={np.round(eq.s_star.values[:4], 4)}")

###############################################################################
# Per-server message rate alpha, memory c. With alpha = lam the delay behaves
# like lam/(1-lam+c); power-of-2 needs 2*d*lam messages per server and still
# blows up as lam -> 1.

print("\n lam    rcpb(c=2)  pod(d=2)")
for l in (0.5, 0.9, 0.99, 0.999):
    print(f"{l:5}  {constrained_delay(l, l, 2):9.4f}  {power_of_d_delay(l, 2):8.4f}")

###############################################################################
# Growing the memory at fixed message rate: three different behaviours.

for alpha in (0.45, 0.9, 1.8):
    pt = phase_transition_limit(lam, alpha)
    row = "  ".join(f"{constrained_delay(lam, alpha, c):.2e}" for c in (1, 5, 20, 100))
    print(f"alpha={alpha:4} case={pt.case:8s} c=1,5,20,100: {row}  limit={pt.limit:.4f}")

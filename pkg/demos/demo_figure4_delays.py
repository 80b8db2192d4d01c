"""
Delay against load for three dispatchers
========================================

500 servers, token memory ``c = 2`` and an average of ``alpha = lam`` messages
per server per unit time, compared with power-of-2 (four messages per arrival)
and pull (one token per idle server). The full grid with eight replications
is ``rcpb sweep --preset figure4``; this script runs a shorter version.
"""

from rcpb.experiments import run_figure4

rows, runs = run_figure4(lambdas=(0.5, 0.9, 0.95), n=500, seeds=(1, 2, 3), horizon=800.0, warmup=240.0)

print(f"{'lam':>5} {'x':>6} {'policy':>11} {'sim':>8} {'+/-':>7} {'formula':>8} {'msgs/t':>8}")
for r in rows:
    print(f"{r['lam']:5} {r['x']:6.3f} {r['policy']:>11} {r['sim_delay']:8.4f} {r['sim_ci']:7.4f} "
          f"{r['formula']:8.4f} {r['message_rate']:8.1f}")

###############################################################################
# The token policy stays below ``1/(alpha + alpha^2)`` while power-of-2 grows
# like ``log(1/(1-lam))``. Note how few idle servers there are near ``lam = 1``
# (about ``n (1 - lam)``); the fluid prediction needs that number to be large.

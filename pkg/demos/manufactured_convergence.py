"""
Manufactured solution: convergence and effectivity
==================================================

A smooth exact solution on the unit square lets us compare the guaranteed
bound against the true energy error level by level.  Taylor-Hood P2/P1/P2
gives second order in h, and so should every estimator component.

Run:  python demos/manufactured_convergence.py
"""
import numpy as np

from biot_estimate import AdaptConfig, ManufacturedCase, run_loop
from biot_estimate.adapt import loglog_slope

case = ManufacturedCase(mu=1.0, lam=1.0, tau=1.0)

# Five uniform levels, 8 -> 2048 elements.  The exact solution is known, so
# errors come straight from quadrature against it.
hist = run_loop(case, AdaptConfig(mode="uniform", max_levels=5))

print(f"{'level':>5} {'N':>7} {'h':>8} {'error':>11} {'bound^1/2':>11} {'eff':>6}")
for r in hist.records:
    print(f"{r.level:5d} {r.N:7d} {r.h:8.4f} {r.err_total:11.4e} "
          f"{np.sqrt(r.bound):11.4e} {r.effectivity:6.3f}")

# %%
# Rates against h: all should sit near 2.
h = hist.column("h")
for name in ("err_total", "eta_S", "eta_A", "eta_C", "eta_F"):
    print(f"slope of {name:9s} vs h: {loglog_slope(h, hist.column(name)):.3f}")
print(f"slope of bound^1/2  vs h: {loglog_slope(h, np.sqrt(hist.column('bound'))):.3f}")

# %%
# The bound never drops below the error, and the overestimation stays near 2.
assert np.all(hist.column("effectivity") >= 1.0)

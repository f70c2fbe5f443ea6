"""
L-shaped domain: adaptive versus uniform refinement
===================================================

Constant loads on the L-shape produce a corner singularity, so uniform
refinement converges slowly.  Dörfler marking on the equilibrated indicators
steers refinement to the reentrant corner and restores the optimal rate
N^-1.  Errors are measured against a cubic overkill solve on the finest mesh.

Run:  python demos/lshape_adaptivity.py [theta]      (about half a minute)
"""
import sys

import numpy as np

from biot_estimate import AdaptConfig, LShapedCase, run_loop
from biot_estimate.adapt import loglog_slope

theta = float(sys.argv[1]) if len(sys.argv) > 1 else 0.5
case = LShapedCase()

ada = run_loop(case, AdaptConfig(mode="adaptive", dorfler_theta=theta, max_levels=9,
                                 reference="overkill"))
uni = run_loop(case, AdaptConfig(mode="uniform", max_levels=3, reference="overkill"))


def table(title, hist):
    print(title)
    print(f"{'N':>7} {'marked':>7} {'error':>11} {'bound^1/2':>11} {'eff':>6}")
    for r in hist.records:
        print(f"{r.N:7d} {r.marked:7d} {r.err_total:11.4e} {np.sqrt(r.bound):11.4e} "
              f"{r.effectivity:6.3f}")


table(f"adaptive, theta = {theta}", ada)
table("uniform", uni)

# %%
# Slopes against the number of unknowns; N^-1 is optimal for P2 in 2D.
n = ada.column("N")[-4:]
print("adaptive (last 4 levels): estimator %.3f, error %.3f" % (
    loglog_slope(n, np.sqrt(ada.column("bound")[-4:])),
    loglog_slope(n, ada.column("err_total")[-4:])))
print("uniform:                  estimator %.3f, error %.3f" % (
    loglog_slope(uni.column("N"), np.sqrt(uni.column("bound"))),
    loglog_slope(uni.column("N"), uni.column("err_total"))))

# %%
# Where did refinement go?  Share of elements of the final mesh within 0.1 of
# the reentrant corner at the origin.
mesh = ada.meshes[-1]
centroids = mesh.vertices[mesh.triangles].mean(axis=1)
near = np.linalg.norm(centroids, axis=1) < 0.1
print(f"final mesh: {mesh.num_triangles} elements, {near.mean():.0%} of them near the corner")

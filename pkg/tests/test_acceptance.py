"""Acceptance criteria 1-9, one PASS/FAIL line each.

Run alone with ``python tests/test_acceptance.py`` or ``pytest tests/test_acceptance.py -v``.
Tolerances are the published ones; see README for what each criterion measures.
"""
import json
import sys
import time

import numpy as np
import pytest

from biot_estimate.adapt import AdaptConfig, loglog_slope, mark_dorfler, run_loop
from biot_estimate.bench import (IncompressibleCase, LShapedCase, ManufacturedCase,
                                 norm_identities_check)
from biot_estimate.biot import solve_biot
from biot_estimate.cli import main as cli_main
from biot_estimate.equilibrate import (equilibrate_flux, equilibrate_stress, global_oracle,
                                       verify_flux, verify_stress)
from biot_estimate.fem import edge_reference_points, quadrature
from biot_estimate.mesh import refine_uniform, unit_square_mesh

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line past pytest's capture, then assert."""

    def emit(label, checks):
        bad = [k for k, (_, ok) in checks.items() if not ok]
        detail = ", ".join(f"{k}={_short(v)}" for k, (v, _) in checks.items())
        with capsys.disabled():
            print(f"\n{'PASS' if not bad else 'FAIL'} {label}: {detail}")
        assert not bad, f"{label}: failed {bad}"

    return emit


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + " ".join(_short(float(x)) for x in v) + "]"
    return str(v)


# shared helpers ------------------------------------------------------------

def hat_moments(field):
    """(as field, hat_z) for every vertex, by plain quadrature."""
    mesh = field.mesh
    rule = quadrature(4)
    v = field.values(rule.points)
    w = 2 * mesh.areas[:, None] * rule.weights
    asym = 0.5 * (v[..., 0, 1] - v[..., 1, 0])
    loc = np.einsum("tp,tp,pk->tk", w, asym, rule.barycentric)
    out = np.zeros(mesh.num_vertices)
    np.add.at(out, mesh.triangles.ravel(), loc.ravel())
    return out


def l2(field):
    rule = quadrature(4)
    v = field.values(rule.points)
    w = 2 * field.mesh.areas[:, None] * rule.weights
    return float(np.sqrt(np.sum(w * (v ** 2).reshape(v.shape[0], v.shape[1], -1).sum(-1))))


def max_jump(field, npts=4):
    """Largest normal-jump moment (against 1 and the edge coordinate) over all
    interior edges; both traces are sampled in one sweep per local edge."""
    mesh = field.mesh
    x, w = np.polynomial.legendre.leggauss(npts)
    tq, wq = (x + 1) / 2, w / 2
    traces = None
    rows = np.arange(mesh.num_triangles)
    for e in range(3):
        fwd = field.values(edge_reference_points(e, tq))
        bwd = field.values(edge_reference_points(e, 1 - tq))
        mask = mesh.tri_edge_forward[:, e].reshape((-1,) + (1,) * (fwd.ndim - 1))
        v = np.where(mask, fwd, bwd)
        if traces is None:
            traces = np.zeros((mesh.num_edges, 2) + v.shape[1:])
        edges = mesh.tri_edges[:, e]
        side = (mesh.edge_tris[edges, 1] == rows).astype(int)
        traces[edges, side] = v
    ie = mesh.interior_edges
    jn = np.einsum("ep...c,ec->ep...", traces[ie, 0] - traces[ie, 1], mesh.edge_normals[ie])
    s = 2 * tq - 1
    mom = mesh.edge_lengths[ie].reshape((-1,) + (1,) * (jn.ndim - 2)) * np.stack(
        [np.einsum("p,ep...->e...", wq, jn), np.einsum("p,ep...->e...", wq * s, jn)])
    return float(np.abs(mom).max())


# 1 -------------------------------------------------------------------------

def test_c1_equilibration_exactness(verdict):
    case = ManufacturedCase()
    worst = {"div": 0.0, "jump": 0.0, "sym": 0.0, "seconds": 0.0}
    ne = []
    # 8 ... 8192 elements
    for k in range(1, 7):
        t0 = time.perf_counter()
        mesh = case.initial_mesh(k)
        src = case.sources().project(mesh)
        sol = solve_biot(mesh, case.params, src)
        srec = equilibrate_stress(mesh, sol, src)
        frec = equilibrate_flux(mesh, sol, src)
        worst["seconds"] = max(worst["seconds"], time.perf_counter() - t0)
        vs, vf = verify_stress(srec), verify_flux(frec)
        worst["div"] = max(worst["div"], vs["divergence"], vf["divergence"])
        worst["jump"] = max(worst["jump"], vs["jump"], vf["jump"],
                            max_jump(srec.theta_R), max_jump(frec.w_R))
        sym = np.abs(hat_moments(srec.theta_R)).max() / l2(srec.theta_R)
        worst["sym"] = max(worst["sym"], sym, vs["symmetry"])
        ne.append(mesh.num_triangles)
    verdict("C1 equilibration exactness", {
        "elements": (ne[-1], ne[-1] >= 8000),
        "divergence": (worst["div"], worst["div"] <= 1e-9),
        "jump": (worst["jump"], worst["jump"] <= 1e-10),
        "weak_symmetry": (worst["sym"], worst["sym"] <= 1e-10),
        "max_seconds": (worst["seconds"], worst["seconds"] <= 30.0),
    })


# 2 -------------------------------------------------------------------------

def test_c2_norm_identities(verdict):
    rep = norm_identities_check(8, refine_uniform(unit_square_mesh(), 2))
    verdict("C2 norm identities", {
        "phi_norm-1/30": (abs(rep["phi_norm"] - 1 / 30), abs(rep["phi_norm"] - 1 / 30) <= 1e-12),
        "grad_ratio-20": (abs(rep["grad_ratio"] - 20), abs(rep["grad_ratio"] - 20) <= 1e-10),
        "eps_ratio-3/2": (abs(rep["eps_ratio"] - 1.5), abs(rep["eps_ratio"] - 1.5) <= 1e-10),
    })


# 3 -------------------------------------------------------------------------

def rate_checks(hist):
    h = hist.column("h")
    s_err = loglog_slope(h, hist.column("err_total"))
    s_est = loglog_slope(h, np.sqrt(hist.column("bound")))
    s_S = loglog_slope(h, hist.column("eta_S"))
    s_F = loglog_slope(h, hist.column("eta_F"))
    return {
        "levels": (len(hist), 4 <= len(hist) <= 5),
        "error_slope": (s_err, 1.85 <= s_err <= 2.15),
        "estimator_slope": (s_est, 1.85 <= s_est <= 2.15),
        "eta_S_slope": (s_S, s_S >= 1.85),
        "eta_F_slope": (s_F, s_F >= 1.85),
    }


def test_c3_convergence_rate(verdict):
    hist = run_loop(ManufacturedCase(mu=1.0, lam=1.0, tau=1.0), AdaptConfig(max_levels=5))
    verdict("C3 convergence rate", rate_checks(hist))


# 4 -------------------------------------------------------------------------

def test_c4_lambda_robustness(verdict):
    mesh = refine_uniform(unit_square_mesh(), 3)
    eff = []
    for lam in (1.0, 1e2, 1e4, 1e8):
        hist = run_loop(ManufacturedCase(mu=1.0, lam=lam, tau=1.0), AdaptConfig(max_levels=1),
                        initial_mesh=mesh)
        eff.append(hist.records[0].effectivity)
    spread = max(eff) / min(eff)
    verdict("C4 lambda robustness", {
        "effectivity": (eff, min(eff) >= 1.0),
        "spread": (spread, spread <= 3.0),
    })


# 5 -------------------------------------------------------------------------

def test_c5_lshape_adaptivity(verdict):
    t0 = time.perf_counter()
    ada = run_loop(LShapedCase(), AdaptConfig(mode="adaptive", dorfler_theta=0.5, max_levels=9,
                                              reference="overkill"))
    uni = run_loop(LShapedCase(), AdaptConfig(mode="uniform", max_levels=3,
                                              reference="overkill"))
    seconds = time.perf_counter() - t0

    def slopes(hist, last=None):
        n = hist.column("N")[-last:] if last else hist.column("N")
        est = np.sqrt(hist.column("bound"))[-len(n):]
        err = hist.column("err_total")[-len(n):]
        return loglog_slope(n, est), loglog_slope(n, err)

    a_est, a_err = slopes(ada, last=4)
    u_est, u_err = slopes(uni)
    verdict("C5 L-shape adaptivity", {
        "adaptive_estimator_slope": (a_est, a_est <= -0.85),
        "adaptive_error_slope": (a_err, a_err <= -0.85),
        "uniform_estimator_slope": (u_est, abs(u_est) <= 0.65 and u_est > a_est),
        "uniform_error_slope": (u_err, abs(u_err) <= 0.65 and u_err > a_err),
        "effectivity": (ada.column("effectivity"), np.all(ada.column("effectivity") >= 1.0)),
        "seconds": (seconds, seconds <= 600.0),
    })


# 6 -------------------------------------------------------------------------

def test_c6_oracle_equivalence(verdict):
    worst = {}
    for lam in (1.0, 1e8):
        case = ManufacturedCase(lam=lam)
        mesh = case.initial_mesh(1)
        assert mesh.num_triangles <= 8
        src = case.sources().project(mesh)
        sol = solve_biot(mesh, case.params, src)
        for which, eq, ver in (("stress", equilibrate_stress, verify_stress),
                               ("flux", equilibrate_flux, verify_flux)):
            local, oracle = eq(mesh, sol, src), global_oracle(sol, src, which)
            rl, ro = ver(local), ver(oracle)
            assert set(rl) == set(ro)
            key = f"{which}_residual"
            worst[key] = max(worst.get(key, 0.0), *rl.values(), *ro.values())
            if which == "stress":
                for rec in (local, oracle):
                    sym = np.abs(hat_moments(rec.theta_R)).max() / l2(rec.theta_R)
                    worst["weak_symmetry"] = max(worst.get("weak_symmetry", 0.0), sym)
    verdict("C6 oracle equivalence", {k: (v, v <= 1e-10) for k, v in worst.items()})


# 7 -------------------------------------------------------------------------

def test_c7_marking(verdict):
    eta = [9.0, 4.0, 1.0, 1.0]
    ex = (list(mark_dorfler(eta, 0.5)) == [0], list(mark_dorfler(eta, 0.8)) == [0, 1],
          list(mark_dorfler([0.0, 2.0, 0.0, 1.0], 1.0)) == [1, 3])
    case = ManufacturedCase()
    full = run_loop(case, AdaptConfig(mode="adaptive", dorfler_theta=1.0, max_levels=3))
    uni = run_loop(case, AdaptConfig(mode="uniform", max_levels=3))
    same = all(np.array_equal(a.vertices, b.vertices) and np.array_equal(a.triangles, b.triangles)
               for a, b in zip(full.meshes, uni.meshes)) and len(full) == len(uni) == 3
    verdict("C7 marking correctness", {
        "worked_examples": (sum(ex), all(ex)),
        "theta1_equals_uniform": (same, same),
    })


# 8 -------------------------------------------------------------------------

def test_c8_incompressible_limit(verdict):
    case = IncompressibleCase()
    assert case.params.lambda_inv == 0.0
    # five levels from h = 1/4; the 8-element start is still pre-asymptotic for eta_S
    hist = run_loop(case, AdaptConfig(max_levels=5), initial_mesh=case.initial_mesh(2),
                    keep_solutions=True)
    rule = quadrature(8)
    dev = 0.0
    for rec, sol in zip(hist.records, hist.solutions):
        g = sol.u.gradient(rule.points)
        w = 2 * sol.mesh.areas[:, None] * rule.weights
        div = np.sqrt(np.sum(w * (g[..., 0, 0] + g[..., 1, 1]) ** 2))
        dev = max(dev, abs(rec.eta_C - div) / div)
    checks = rate_checks(hist)
    eta_P = float(np.abs(hist.column("eta_P")).max())
    checks["eta_P_max"] = (eta_P, eta_P == 0.0)
    checks["eta_C_vs_div"] = (dev, dev <= 1e-12)
    verdict("C8 incompressible limit", checks)


# 9 -------------------------------------------------------------------------

# default manufactured study (uniform, 4 levels from 8 elements), frozen after
# the rate-2 and effectivity checks above passed on the same run
FROZEN = {
    "err_total": [0.08270121071277524, 0.020211646025637638, 0.0052013570943749005,
                  0.0013171834526232542],
    "bound": [0.02552957319869365, 0.0016603154850585791, 0.00011667234441030108,
              7.645762562746698e-06],
    "eta_S": [0.07226811277348019, 0.018870479832659385, 0.004807444601531757,
              0.0012062455460216022],
    "eta_A": [0.03391672003867309, 0.008820916100766605, 0.002137314776295509,
              0.0005224019840724681],
    "eta_C": [0.04782198564679677, 0.012016267705370466, 0.0033739584489396613,
              0.000883737970100908],
    "eta_F": [0.04270774739398971, 0.010517286356672985, 0.0026406438274900967,
              0.0006634344492709031],
    "eta_P": [0.0020767320839839678, 0.0012896533690739027, 0.00034334921591764906,
              8.697424606709766e-05],
    "effectivity": [1.9320124009682353, 2.0160143798983974, 2.076669055137391,
                    2.099249881432778],
}


def test_c9_determinism_regression(verdict, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"problem": {"type": "manufactured"}}))
    for d in ("a", "b"):
        assert cli_main(["study", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "history.csv").read_bytes()
    identical = a == (tmp_path / "b" / "history.csv").read_bytes()
    from biot_estimate.adapt import ConvergenceHistory
    hist = ConvergenceHistory.read_csv(tmp_path / "a" / "history.csv")
    dev = 0.0
    for name, ref in FROZEN.items():
        got = hist.column(name)
        if got.shape != (len(ref),):
            dev = np.inf
            break
        dev = max(dev, float(np.max(np.abs(got - ref) / np.abs(ref))))
    verdict("C9 determinism regression", {
        "byte_identical": (identical, identical),
        "max_rel_dev": (dev, dev <= 1e-10),
    })


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))

import numpy as np
import pytest
import sympy as sp

from biot_estimate.bench import (IncompressibleCase, LShapedCase, ManufacturedCase,
                                 build_overkill, manufactured_eval, norm_identities_check,
                                 taylor_hood_ready)
from biot_estimate.biot import solve_biot
from biot_estimate.estimate import energy_norm_error
from biot_estimate.mesh import MeshError, lshape_mesh, refine, refine_uniform, \
    unit_square_mesh

X, Y = sp.symbols("x y")
PHI = X * Y * (1 - X) * (1 - Y)


def strong_form(u, p, phi, mu, lam_inv, tau):
    """Sources of the Biot system for given closed forms, by sympy."""
    grad = sp.Matrix([[sp.diff(u[i], v) for v in (X, Y)] for i in range(2)])
    eps = (grad + grad.T) / 2
    sigma = 2 * mu * eps
    f = [sp.simplify(-sum(sp.diff(sigma[i, j], v) for j, v in enumerate((X, Y)))
                     + sp.diff(p, (X, Y)[i])) for i in range(2)]
    div_u = sp.diff(u[0], X) + sp.diff(u[1], Y)
    constraint = sp.simplify(div_u + lam_inv * (p - phi))
    g = sp.simplify(lam_inv * (phi - p) - tau * (sp.diff(phi, X, 2) + sp.diff(phi, Y, 2)))
    # the mass equation reads  lambda_inv (phi - p) - tau lap phi = g  in this form, and the
    # constraint turns lambda_inv (phi - p) into div u
    return f, constraint, g


@pytest.fixture(scope="module")
def points():
    return np.random.default_rng(11).random((100, 2))


def test_center_values():
    assert manufactured_eval([0.5, 0.5], "phi") == pytest.approx(1 / 16, abs=1e-16)
    for lam in (1.0, 1e4):
        assert manufactured_eval([0.5, 0.5], "p", ManufacturedCase(lam=lam)) == \
            pytest.approx(1 / 16, abs=1e-16)
    f = manufactured_eval([0.5, 0.5], "f", ManufacturedCase(mu=0.5, lam=1.0))
    assert np.allclose(f, [1.25, 1.25], rtol=0, atol=1e-15)
    assert manufactured_eval([0.5, 0.5], "g", ManufacturedCase(tau=1.0)) == \
        pytest.approx(1.0, abs=1e-15)


def test_eval_errors():
    with pytest.raises(ValueError, match="outside"):
        manufactured_eval([1.2, 0.5], "phi")
    with pytest.raises(ValueError, match="unknown"):
        manufactured_eval([0.2, 0.5], "psi")


@pytest.mark.parametrize("mu,lam,tau", [(1.0, 1.0, 1.0), (0.5, 1.0, 2.0), (3.0, 1e4, 0.1)])
def test_manufactured_against_sympy(mu, lam, tau, points):
    case = ManufacturedCase(mu=mu, lam=lam, tau=tau)
    u = [PHI, PHI]
    p = -lam * (sp.diff(PHI, X) + sp.diff(PHI, Y)) + PHI
    f, constraint, _ = strong_form(u, p, PHI, mu, 1 / lam, tau)
    assert sp.simplify(constraint) == 0
    g = sp.diff(PHI, X) + sp.diff(PHI, Y) - tau * (sp.diff(PHI, X, 2) + sp.diff(PHI, Y, 2))
    fx = sp.lambdify((X, Y), f, "numpy")
    gx = sp.lambdify((X, Y), g, "numpy")
    px = sp.lambdify((X, Y), p, "numpy")
    ref_f = np.stack(np.broadcast_arrays(*fx(points[:, 0], points[:, 1])), -1)
    assert np.abs(case.f(points) - ref_f).max() <= 1e-12 * max(1.0, lam)
    assert np.abs(case.g(points) - gx(points[:, 0], points[:, 1])).max() <= 1e-12
    assert np.abs(case.p(points) - px(points[:, 0], points[:, 1])).max() <= 1e-12 * lam


def test_second_equation_pointwise(points):
    case = ManufacturedCase(lam=7.0)
    gu = case.grad_u(points)
    div = gu[..., 0, 0] + gu[..., 1, 1]
    res = div + (case.p(points) - case.phi(points)) / case.lam
    assert np.abs(res).max() <= 1e-14


def test_incompressible_against_sympy(points):
    case = IncompressibleCase(mu=1.3, tau=0.7)
    psi = (X * (1 - X) * Y * (1 - Y)) ** 2
    u = [sp.diff(psi, Y), -sp.diff(psi, X)]
    p = (X - sp.Rational(1, 2)) * (Y - sp.Rational(1, 2))
    f, constraint, _ = strong_form(u, p, PHI, case.mu, 0, case.tau)
    assert sp.simplify(constraint) == 0
    assert sp.integrate(p, (X, 0, 1), (Y, 0, 1)) == 0
    ux = sp.lambdify((X, Y), u, "numpy")
    fx = sp.lambdify((X, Y), f, "numpy")
    gx = sp.lambdify((X, Y), -case.tau * (sp.diff(PHI, X, 2) + sp.diff(PHI, Y, 2)), "numpy")
    gux = sp.lambdify((X, Y), [[sp.diff(c, v) for v in (X, Y)] for c in u], "numpy")
    xs, ys = points[:, 0], points[:, 1]
    assert np.abs(case.u(points) - np.stack(ux(xs, ys), -1)).max() <= 1e-14
    gu = np.array(gux(xs, ys)).transpose(2, 0, 1)
    assert np.abs(case.grad_u(points) - gu).max() <= 1e-13
    assert np.abs(case.f(points) - np.stack(fx(xs, ys), -1)).max() <= 1e-12
    assert np.abs(case.g(points) - gx(xs, ys)).max() <= 1e-12


def test_boundary_values_vanish():
    t = np.linspace(0, 1, 11)
    edges = np.concatenate([np.stack([t, 0 * t], 1), np.stack([t, 0 * t + 1], 1),
                            np.stack([0 * t, t], 1), np.stack([0 * t + 1, t], 1)])
    for case in (ManufacturedCase(), IncompressibleCase()):
        assert np.abs(case.u(edges)).max() <= 1e-16
        assert np.abs(case.phi(edges)).max() <= 1e-16


@pytest.mark.parametrize("mesh", [unit_square_mesh(), refine(refine_uniform(
    unit_square_mesh(), 2), [3, 17])])
def test_norm_identities(mesh):
    rep = norm_identities_check(8, mesh)
    assert abs(rep["phi_norm"] - 1 / 30) <= 1e-12
    assert abs(rep["grad_ratio"] - 20) <= 1e-10
    assert abs(rep["eps_ratio"] - 1.5) <= 1e-10
    with pytest.raises(ValueError):
        norm_identities_check(6)


def test_lshape_data():
    case = LShapedCase()
    m = case.initial_mesh()
    assert m.num_triangles == 96
    # the reentrant corner is a mesh vertex
    assert np.any(np.all(m.vertices == 0.0, axis=1))
    src = case.sources()
    x = np.array([[-0.5, 0.5], [0.3, -0.2]])
    assert np.array_equal(src.f(x), [[1, 1], [1, 1]]) and np.array_equal(src.g(x), [1, 1])


def test_taylor_hood_guard():
    with pytest.raises(MeshError, match="two boundary edges"):
        taylor_hood_ready(lshape_mesh())


@pytest.fixture(scope="module")
def overkill():
    case = ManufacturedCase()
    base = refine_uniform(unit_square_mesh(), 2)
    return case, base, build_overkill(case, base)


def test_overkill_accuracy(overkill):
    case, base, ref = overkill
    sol = solve_biot(base, case.params, case.sources())
    p2_err = energy_norm_error(sol, case)[0]
    ok_err = energy_norm_error(ref.solution, case)[0]
    assert ok_err <= 0.05 * p2_err
    assert ref.dof_ratio > 4
    # the P2 error measured against the overkill agrees with the exact one
    assert energy_norm_error(sol, ref)[0] == pytest.approx(p2_err, rel=0.05)


def test_overkill_nodal_values(overkill):
    _, _, ref = overkill
    mesh = ref.mesh
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    vals = ref.evaluate(mesh, corners)
    phi = ref.solution.phi.coefficients
    assert np.allclose(vals["phi"], phi[mesh.triangles], rtol=0, atol=1e-13)
    p = ref.solution.p.coefficients
    assert np.allclose(vals["p"], p[mesh.triangles], rtol=0, atol=1e-13)

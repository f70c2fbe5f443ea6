import numpy as np
import pytest
import scipy.linalg as sla

from biot_estimate.fem import (DGP1Space, FieldView, LagrangeSpace, RT1Space, SpaceKind,
                               build_dofmap, evaluate, integrate, interpolate_lagrange,
                               interpolate_rt1, mass_matrix, physical, project_P1,
                               quadrature)
from biot_estimate.equilibrate import jump
from biot_estimate.mesh import build_mesh, refine, refine_uniform, unit_square_mesh, \
    vertex_patches


def ref_mesh():
    return build_mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], relabel=False)


@pytest.mark.parametrize("degree", range(1, 11))
def test_quadrature_exactness(degree):
    rule = quadrature(degree)
    assert np.isclose(rule.weights.sum(), 0.5, rtol=0, atol=1e-15)
    assert rule.exactness_degree >= degree
    x, y = rule.points.T
    from math import factorial
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            exact = factorial(i) * factorial(j) / factorial(i + j + 2)
            assert abs(np.dot(rule.weights, x ** i * y ** j) - exact) <= 1e-15


def test_quadrature_x2y2():
    rule = quadrature(8)
    x, y = rule.points.T
    assert abs(np.dot(rule.weights, x ** 2 * y ** 2) - 1 / 180) <= 1e-16


def test_quadrature_bad_degree():
    with pytest.raises(ValueError):
        quadrature(11)
    with pytest.raises(ValueError):
        quadrature(0)


def test_constant_integrates_to_area():
    m = build_mesh([[0.3, -1.0], [2.0, 0.5], [-0.4, 1.7]], [[0, 1, 2]])
    val = integrate(m, lambda ref: np.ones((1, len(ref))), degree=1)
    assert np.isclose(val[0], m.areas[0])


def test_dof_counts():
    m = unit_square_mesh()
    assert build_dofmap(m, SpaceKind.LagrangeP2C).total_dofs == 9
    assert build_dofmap(m, SpaceKind.LagrangeP1C).total_dofs == 4
    assert build_dofmap(m, SpaceKind.RT1).total_dofs == 14
    assert build_dofmap(m, SpaceKind.BrokenRT1).total_dofs == 16
    assert build_dofmap(m, SpaceKind.DiscontinuousP1).total_dofs == 6


def test_zero_trace_p2_square():
    # the midpoint of the diagonal is interior, so exactly one dof survives
    dm = build_dofmap(unit_square_mesh(), SpaceKind.LagrangeP2C, zero_trace=True)
    assert dm.num_free == 1
    assert dm.constrained_dofs.size == 8


def test_p2_reproduces_quadratic():
    m = refine(refine_uniform(unit_square_mesh(), 1), [2])
    v = LagrangeSpace(m, 2)
    f = interpolate_lagrange(v, lambda x: x[..., 0] ** 2)
    rng = np.random.default_rng(0)
    for _ in range(10):
        t = rng.integers(m.num_triangles)
        a, b = rng.random(2)
        ref = np.array([a * (1 - b), b])
        x = m.map_points(ref[None])[t, 0]
        assert abs(evaluate(f, t, ref) - x[0] ** 2) <= 1e-13


def test_evaluate_out_of_range():
    f = interpolate_lagrange(LagrangeSpace(unit_square_mesh(), 1), lambda x: x[..., 0])
    with pytest.raises(IndexError):
        evaluate(f, 5, [0.2, 0.2])


def test_rt1_linear_divergence():
    m = refine_uniform(unit_square_mesh(), 2)
    for broken in (False, True):
        rt = RT1Space(m, broken=broken)
        w = interpolate_rt1(rt, physical(m, lambda x: x))
        div = w.divergence(quadrature(4).points)
        assert np.max(np.abs(div - 2.0)) <= 1e-12


def test_rt1_reproduces_linear_fields():
    m = refine(refine_uniform(unit_square_mesh(), 1), [0, 3])
    lin = lambda x: np.stack([0.3 + 1.7 * x[..., 0] - 0.2 * x[..., 1],
                              -1.0 + 0.5 * x[..., 0] + 1.7 * x[..., 1]], -1)
    pts = quadrature(6).points
    for broken in (True, False):
        w = interpolate_rt1(RT1Space(m, broken=broken), physical(m, lin))
        assert np.allclose(w.values(pts), lin(m.map_points(pts)), rtol=0, atol=1e-13)


def test_hats_sum_at_barycenter():
    m = ref_mesh()
    c = np.array([[1 / 3, 1 / 3]])
    assert abs(sum(p.hat(c)[0] for p in vertex_patches(m)) - 1.0) <= 1e-15


def test_project_idempotent():
    m = refine_uniform(unit_square_mesh(), 2)
    p1 = project_P1(m, physical(m, lambda x: np.sin(3 * x[..., 0]) + x[..., 1] ** 3))
    p2 = project_P1(m, p1)
    assert np.max(np.abs(p1.coefficients - p2.coefficients)) <= 1e-13


def test_project_preserves_mean():
    m = ref_mesh()
    p = project_P1(m, physical(m, lambda x: x[..., 0] ** 2))
    rule = quadrature(2)
    mean = np.dot(rule.weights, p.values(rule.points)[0])
    assert abs(mean - 1 / 12) <= 1e-15


def test_project_orthogonality_vector():
    m = refine_uniform(unit_square_mesh(), 1)
    func = physical(m, lambda x: np.stack([x[..., 0] ** 3, np.cos(x[..., 1])], -1))
    p = project_P1(m, func)
    rule = quadrature(8)
    lam = rule.barycentric
    w = 2 * m.areas[:, None] * rule.weights
    diff = func(rule.points) - p.values(rule.points)
    assert np.max(np.abs(np.einsum("tp,pk,tpc->tck", w, lam, diff))) <= 1e-15


def test_projection_of_bubble_is_discontinuous():
    m = build_mesh([[0, 0], [1, 0], [1.3, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]])
    v = LagrangeSpace(m, 2)
    coef = np.zeros(v.ndofs)
    diag = int(m.interior_edges[0])
    coef[m.num_vertices + diag] = 1.0
    # a single basis function projects to the same barycentric coefficients on
    # every element; a vertex function seen by one side breaks that symmetry
    t0 = m.edge_tris[diag, 0]
    coef[np.setdiff1d(m.triangles[t0], m.edges[diag])[0]] = 1.0
    p = project_P1(m, FieldView(v, coef))
    # compare both one-sided traces at the two endpoints of the shared edge
    gap = 0.0
    for z in m.edges[diag]:
        vals = []
        for t in m.edge_tris[diag]:
            k = int(np.flatnonzero(m.triangles[t] == z)[0])
            vals.append(p.coefficients[3 * t + k])
        gap = max(gap, abs(vals[0] - vals[1]))
    assert gap > 1e-3


def test_commuting_interpolation():
    # div Pi v = P1 div v for quadratic v
    m = refine(refine_uniform(unit_square_mesh(), 1), [1, 4])
    f = lambda x: np.stack([x[..., 0] ** 2 - x[..., 0] * x[..., 1],
                            x[..., 1] ** 2 + 3 * x[..., 0] ** 2], -1)
    divf = lambda x: 2 * x[..., 0] - x[..., 1] + 2 * x[..., 1]
    pts = quadrature(4).points
    for broken in (True, False):
        w = interpolate_rt1(RT1Space(m, broken=broken), physical(m, f))
        ref = project_P1(m, physical(m, divf)).values(pts)
        assert np.max(np.abs(w.divergence(pts) - ref)) <= 1e-12


def test_conforming_rt1_has_no_jumps():
    m = refine_uniform(unit_square_mesh(), 2)
    rt = RT1Space(m)
    rng = np.random.default_rng(1)
    w = FieldView(rt, rng.standard_normal(rt.ndofs))
    for e in m.interior_edges:
        assert np.max(np.abs(jump(w, e))) <= 1e-13


@pytest.mark.parametrize("space", [
    lambda m: LagrangeSpace(m, 1), lambda m: LagrangeSpace(m, 2), lambda m: DGP1Space(m),
    lambda m: RT1Space(m), lambda m: RT1Space(m, broken=True)])
def test_mass_matrix_spd(space):
    mm = mass_matrix(space(unit_square_mesh())).toarray()
    assert np.allclose(mm, mm.T, atol=1e-15)
    assert sla.eigvalsh(mm)[0] > 0

"""Finite element spaces on :class:`~biot_estimate.mesh.TriangleMesh`.

Spaces
------
* :class:`LagrangeSpace` -- continuous P1, P2, P3, optionally with zero trace.
* :class:`DGP1Space` -- discontinuous P1 with the barycentric nodal basis.
* :class:`RT1Space` -- next-to-lowest order Raviart-Thomas, conforming or broken.

All evaluation is vectorised over elements: a basis or a field is evaluated at
a set of *reference* points and returns arrays with a leading ``(nt, np)``
shape.  Vector and tensor fields are stored as coefficient arrays of shape
``(ncomp, ndofs)``; a 2x2 tensor field in RT1 is two RT1 rows, so its value
``[..., i, j]`` is component ``j`` of row ``i``.

RT1 degrees of freedom, per element and local edge ``e`` (opposite local
vertex ``e``), are the averaged normal moments

    (1/|E|) int_E v.n_E ds   and   (1/|E|) int_E (v.n_E) s ds,

where ``n_E`` is the global edge normal and ``s`` runs from -1 at the lower
to +1 at the higher vertex index, followed by the two averaged interior
moments ``(1/|T|) int_T v_i dx``.  Both neighbours of an edge see identical
functionals, so normal continuity is plain dof sharing.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi, roots_legendre

__all__ = [
    "QuadratureRule",
    "quadrature",
    "gauss_line",
    "SpaceKind",
    "DofMap",
    "build_dofmap",
    "LagrangeSpace",
    "DGP1Space",
    "RT1Space",
    "FieldView",
    "PiecewiseField",
    "evaluate",
    "physical",
    "project_P1",
    "interpolate_lagrange",
    "interpolate_rt1",
    "broken_to_conforming",
    "mass_matrix",
    "integrate",
]

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int

    @property
    def barycentric(self):
        p = self.points
        return np.column_stack([1.0 - p[:, 0] - p[:, 1], p[:, 0], p[:, 1]])


@lru_cache(maxsize=None)
def quadrature(degree):
    """Collapsed Gauss rule on the reference triangle, exact to ``degree``.

    Weights sum to the reference area 1/2.
    """
    if not 1 <= degree <= 10:
        raise ValueError(f"unsupported quadrature degree {degree} (1..10)")
    m = (degree + 2) // 2
    tu, wu = roots_jacobi(m, 1.0, 0.0)
    tv, wv = roots_legendre(m)
    u = 0.5 * (1.0 + tu)
    v = 0.5 * (1.0 + tv)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([uu.ravel(), ((1.0 - uu) * vv).ravel()])
    w = (np.outer(wu, wv) / 8.0).ravel()
    pts.flags.writeable = False
    w.flags.writeable = False
    return QuadratureRule(pts, w, 2 * m - 1)


@lru_cache(maxsize=None)
def gauss_line(n):
    """Gauss-Legendre points and weights on ``[0, 1]`` (weights sum to 1)."""
    t, w = roots_legendre(n)
    return 0.5 * (1.0 + t), 0.5 * w


class SpaceKind(enum.Enum):
    LagrangeP1C = "P1"
    LagrangeP2C = "P2"
    LagrangeP3C = "P3"
    DiscontinuousP1 = "DG1"
    RT1 = "RT1"
    BrokenRT1 = "BrokenRT1"
    RT1Tensor = "RT1Tensor"
    BrokenRT1Tensor = "BrokenRT1Tensor"


@dataclass(frozen=True)
class DofMap:
    kind: SpaceKind
    total_dofs: int
    cell_dofs: np.ndarray
    boundary_dofs: np.ndarray
    zero_trace: bool = False
    vertex_dofs: np.ndarray | None = None
    edge_dofs: np.ndarray | None = None
    element_dofs: np.ndarray | None = None
    free_dofs: np.ndarray = field(default=None)

    @property
    def constrained_dofs(self):
        return self.boundary_dofs if self.zero_trace else np.zeros(0, np.int64)

    @property
    def num_free(self):
        return len(self.free_dofs)


# --------------------------------------------------------------------------
# Lagrange elements

@lru_cache(maxsize=None)
def _lagrange_reference(degree):
    """Nodes, monomial exponents and inverse Vandermonde of P``degree``."""
    nodes = [tuple(v) for v in REF_VERTICES]
    for e in range(3):
        a, b = REF_VERTICES[(e + 1) % 3], REF_VERTICES[(e + 2) % 3]
        for k in range(1, degree):
            nodes.append(tuple(a + (b - a) * k / degree))
    if degree == 3:
        nodes.append((1.0 / 3.0, 1.0 / 3.0))
    nodes = np.array(nodes)
    exps = [(i, j) for n in range(degree + 1) for i in range(n, -1, -1) for j in [n - i]]
    vand = np.array([[x ** i * y ** j for i, j in exps] for x, y in nodes])
    return nodes, tuple(exps), np.linalg.inv(vand)


def _lagrange_values(degree, ref):
    _, exps, cinv = _lagrange_reference(degree)
    x, y = ref[:, 0], ref[:, 1]
    mono = np.stack([x ** i * y ** j for i, j in exps], axis=1)
    return mono @ cinv


def _lagrange_ref_grads(degree, ref):
    _, exps, cinv = _lagrange_reference(degree)
    x, y = ref[:, 0], ref[:, 1]
    dx = np.stack([i * x ** max(i - 1, 0) * y ** j for i, j in exps], axis=1)
    dy = np.stack([j * x ** i * y ** max(j - 1, 0) for i, j in exps], axis=1)
    return np.stack([dx @ cinv, dy @ cinv], axis=2)


class LagrangeSpace:
    """Continuous Lagrange space of degree 1, 2 or 3."""

    def __init__(self, mesh, degree, zero_trace=False):
        if degree not in (1, 2, 3):
            raise ValueError(f"unsupported Lagrange degree {degree}")
        self.mesh = mesh
        self.degree = degree
        self.value_shape = ()
        self.dofmap = _lagrange_dofmap(mesh, degree, zero_trace)
        self.cell_dofs = self.dofmap.cell_dofs
        self.ndofs = self.dofmap.total_dofs
        binv = np.linalg.inv(mesh.jacobians())
        self._inv_jt = np.transpose(binv, (0, 2, 1))

    @property
    def nodes(self):
        return _lagrange_reference(self.degree)[0]

    def basis(self, ref):
        return _lagrange_values(self.degree, np.atleast_2d(ref))[None]

    def basis_grad(self, ref):
        g = _lagrange_ref_grads(self.degree, np.atleast_2d(ref))
        return np.einsum("tij,plj->tpli", self._inv_jt, g)

    def basis_at(self, elements, ref):
        """Basis values at one reference point per entry: ``(N, nloc)``."""
        return _lagrange_values(self.degree, ref)

    def basis_grad_at(self, elements, ref):
        g = _lagrange_ref_grads(self.degree, ref)
        return np.einsum("nij,nlj->nli", self._inv_jt[elements], g)


def _lagrange_dofmap(mesh, degree, zero_trace):
    kind = {1: SpaceKind.LagrangeP1C, 2: SpaceKind.LagrangeP2C, 3: SpaceKind.LagrangeP3C}[degree]
    nv, ne, nt = mesh.num_vertices, mesh.num_edges, mesh.num_triangles
    per_edge = degree - 1
    n_int = 1 if degree == 3 else 0
    cols = [mesh.triangles]
    for e in range(3):
        ge = mesh.tri_edges[:, e]
        fwd = mesh.tri_edge_forward[:, e]
        for k in range(per_edge):
            j = np.where(fwd, k, per_edge - 1 - k)
            cols.append((nv + per_edge * ge + j)[:, None])
    if n_int:
        cols.append((nv + per_edge * ne + np.arange(nt))[:, None])
    cell_dofs = np.hstack(cols)
    total = nv + per_edge * ne + n_int * nt
    vdofs = np.arange(nv)
    edofs = (nv + per_edge * np.arange(ne)[:, None] + np.arange(per_edge)[None, :])
    bnd = [np.flatnonzero(mesh.boundary_vertex_flags)]
    if per_edge:
        bnd.append(edofs[mesh.boundary_edges].ravel())
    bnd = np.sort(np.concatenate(bnd))
    free = np.setdiff1d(np.arange(total), bnd) if zero_trace else np.arange(total)
    return DofMap(kind, total, cell_dofs, bnd, zero_trace, vdofs, edofs,
                  (nv + per_edge * ne + np.arange(nt)) if n_int else None, free)


class DGP1Space:
    """Discontinuous P1; local basis = barycentric coordinates."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.degree = 1
        self.value_shape = ()
        nt = mesh.num_triangles
        cell = np.arange(3 * nt).reshape(nt, 3)
        self.dofmap = DofMap(SpaceKind.DiscontinuousP1, 3 * nt, cell, np.zeros(0, np.int64),
                             free_dofs=np.arange(3 * nt), element_dofs=cell)
        self.cell_dofs = cell
        self.ndofs = 3 * nt
        binv = np.linalg.inv(mesh.jacobians())
        self._inv_jt = np.transpose(binv, (0, 2, 1))

    def basis(self, ref):
        return _lagrange_values(1, np.atleast_2d(ref))[None]

    def basis_grad(self, ref):
        g = _lagrange_ref_grads(1, np.atleast_2d(ref))
        return np.einsum("tij,plj->tpli", self._inv_jt, g)


# --------------------------------------------------------------------------
# Raviart-Thomas RT1

def _rt_monomials(xb):
    """The 8 monomial fields spanning RT1 at scaled points ``xb`` (..., 2)."""
    x, y = xb[..., 0], xb[..., 1]
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    comps = [(one, zero), (zero, one), (x, zero), (y, zero), (zero, x), (zero, y),
             (x * x, x * y), (x * y, y * y)]
    return np.stack([np.stack(c, axis=-1) for c in comps], axis=-2)


def _rt_monomial_div(xb, scale):
    x, y = xb[..., 0], xb[..., 1]
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    s = scale.reshape(scale.shape + (1,) * (x.ndim - scale.ndim))
    return np.stack([zero, zero, one, zero, zero, one, 3 * x, 3 * y], axis=-1) / s[..., None]


def edge_reference_points(e, t):
    """Reference points on local edge ``e`` at parameters ``t`` from its first
    to its second endpoint (local vertices ``e+1`` and ``e+2``)."""
    a = REF_VERTICES[(e + 1) % 3]
    b = REF_VERTICES[(e + 2) % 3]
    return a[None, :] + np.asarray(t)[:, None] * (b - a)[None, :]


class RT1Space:
    """RT1 on triangles, conforming (``2E + 2T`` dofs) or broken (``8T``)."""

    NLOC = 8

    def __init__(self, mesh, broken=False):
        self.mesh = mesh
        self.broken = broken
        self.value_shape = (2,)
        nt, ne = mesh.num_triangles, mesh.num_edges
        if broken:
            cell = np.arange(8 * nt).reshape(nt, 8)
            total = 8 * nt
            kind = SpaceKind.BrokenRT1
            edofs = None
        else:
            cols = []
            for e in range(3):
                ge = mesh.tri_edges[:, e]
                cols += [2 * ge, 2 * ge + 1]
            cols += [2 * ne + 2 * np.arange(nt), 2 * ne + 2 * np.arange(nt) + 1]
            cell = np.stack(cols, axis=1)
            total = 2 * ne + 2 * nt
            kind = SpaceKind.RT1
            edofs = np.arange(2 * ne).reshape(ne, 2)
        self.dofmap = DofMap(kind, total, cell, np.zeros(0, np.int64), edge_dofs=edofs,
                             free_dofs=np.arange(total))
        self.cell_dofs = cell
        self.ndofs = total

        v = mesh.vertices[mesh.triangles]
        self.centroids = v.mean(axis=1)
        self.scale = mesh.diameters.copy()
        # s-parameter direction of local edge e relative to local a -> b
        self.edge_sign = np.where(mesh.tri_edge_forward, 1.0, -1.0)
        self.local_normals = mesh.edge_normals[mesh.tri_edges]
        self.coeffs = np.linalg.inv(self._dual_matrix())

    def _scaled(self, x):
        return (x - self.centroids[:, None, :]) / self.scale[:, None, None]

    def _dual_matrix(self):
        mesh = self.mesh
        nt = mesh.num_triangles
        a = np.zeros((nt, 8, 8))
        tq, wq = gauss_line(3)
        for e in range(3):
            ref = edge_reference_points(e, tq)
            xb = self._scaled(mesh.map_points(ref))
            mono = _rt_monomials(xb)
            mn = np.einsum("tqjd,td->tqj", mono, self.local_normals[:, e])
            s = self.edge_sign[:, e, None] * (2 * tq[None, :] - 1)
            a[:, 2 * e] = np.einsum("q,tqj->tj", wq, mn)
            a[:, 2 * e + 1] = np.einsum("q,tq,tqj->tj", wq, s, mn)
        rule = quadrature(2)
        xb = self._scaled(mesh.map_points(rule.points))
        mono = _rt_monomials(xb)
        a[:, 6:] = 2.0 * np.einsum("q,tqjd->tdj", rule.weights, mono)
        return a

    def basis(self, ref):
        xb = self._scaled(self.mesh.map_points(np.atleast_2d(ref)))
        return np.einsum("tpjd,tjk->tpkd", _rt_monomials(xb), self.coeffs)

    def basis_div(self, ref):
        xb = self._scaled(self.mesh.map_points(np.atleast_2d(ref)))
        return np.einsum("tpj,tjk->tpk", _rt_monomial_div(xb, self.scale), self.coeffs)


@dataclass(frozen=True)
class _SpaceSpec:
    kind: SpaceKind
    zero_trace: bool = False


def build_dofmap(mesh, space, zero_trace=False):
    """Dof map of ``space`` (a :class:`SpaceKind`) on ``mesh``."""
    if space in (SpaceKind.LagrangeP1C, SpaceKind.LagrangeP2C, SpaceKind.LagrangeP3C):
        degree = {SpaceKind.LagrangeP1C: 1, SpaceKind.LagrangeP2C: 2,
                  SpaceKind.LagrangeP3C: 3}[space]
        return _lagrange_dofmap(mesh, degree, zero_trace)
    if space is SpaceKind.DiscontinuousP1:
        return DGP1Space(mesh).dofmap
    if space in (SpaceKind.RT1, SpaceKind.RT1Tensor):
        return RT1Space(mesh).dofmap
    if space in (SpaceKind.BrokenRT1, SpaceKind.BrokenRT1Tensor):
        return RT1Space(mesh, broken=True).dofmap
    raise ValueError(f"unknown space {space}")


# --------------------------------------------------------------------------
# fields

class FieldView:
    """Coefficient vector(s) over a space.

    ``coefficients`` has shape ``(ndofs,)`` for a single field or
    ``(ncomp, ndofs)`` for vector-valued Lagrange fields and RT tensor rows.
    """

    def __init__(self, space, coefficients):
        c = np.asarray(coefficients, dtype=float)
        if c.shape[-1] != space.ndofs:
            raise ValueError(f"coefficient length {c.shape[-1]} != {space.ndofs} dofs")
        self.space = space
        self.coefficients = c
        self.mesh = space.mesh

    @property
    def ncomp(self):
        return None if self.coefficients.ndim == 1 else self.coefficients.shape[0]

    def local(self):
        """Element coefficients ``(ncomp, nt, nloc)``."""
        c = self.coefficients.reshape(-1, self.space.ndofs)
        return c[:, self.space.cell_dofs]

    def _finish(self, vals):
        # vals: (C, nt, np, ...) -> (nt, np, [C], ...)
        vals = np.moveaxis(vals, 0, 2)
        if self.coefficients.ndim == 1:
            vals = vals[:, :, 0]
        return vals

    def values(self, ref):
        b = self.space.basis(ref)
        loc = self.local()
        if b.ndim == 3:
            vals = np.einsum("ctl,tpl->ctp", loc, np.broadcast_to(
                b, (loc.shape[1],) + b.shape[1:]))
        else:
            vals = np.einsum("ctl,tpld->ctpd", loc, b)
        return self._finish(vals)

    def gradient(self, ref):
        g = self.space.basis_grad(ref)
        return self._finish(np.einsum("ctl,tpld->ctpd", self.local(), g))

    def divergence(self, ref):
        d = self.space.basis_div(ref)
        return self._finish(np.einsum("ctl,tpl->ctp", self.local(), d))

    def values_at(self, elements, ref):
        """Values at per-entry points: element ``elements[n]``, reference
        point ``ref[n]``; returns ``(N,)`` or ``(N, ncomp)``."""
        loc = self.local()[:, elements]
        vals = np.einsum("cnl,nl->nc", loc, self.space.basis_at(elements, ref))
        return vals[:, 0] if self.coefficients.ndim == 1 else vals

    def gradient_at(self, elements, ref):
        loc = self.local()[:, elements]
        g = np.einsum("cnl,nld->ncd", loc, self.space.basis_grad_at(elements, ref))
        return g[:, 0] if self.coefficients.ndim == 1 else g

    def __add__(self, other):
        if other.space is not self.space:
            raise ValueError("fields live on different spaces")
        return FieldView(self.space, self.coefficients + other.coefficients)

    def __sub__(self, other):
        if other.space is not self.space:
            raise ValueError("fields live on different spaces")
        return FieldView(self.space, self.coefficients - other.coefficients)

    def __mul__(self, scalar):
        return FieldView(self.space, self.coefficients * scalar)

    __rmul__ = __mul__


class PiecewiseField:
    """Elementwise field given by a function of reference points.

    ``func(ref)`` must return values of shape ``(nt, np, ...)``.
    """

    def __init__(self, mesh, func, divergence=None):
        self.mesh = mesh
        self._func = func
        self._div = divergence

    def values(self, ref):
        return self._func(np.atleast_2d(ref))

    def divergence(self, ref):
        if self._div is None:
            raise NotImplementedError("no divergence supplied")
        return self._div(np.atleast_2d(ref))


def evaluate(field, element, local_point, what="value"):
    """Value (or ``gradient``/``divergence``) of ``field`` at one point."""
    nt = field.mesh.num_triangles
    if not 0 <= element < nt:
        raise IndexError(f"element {element} out of range (0..{nt - 1})")
    ref = np.atleast_2d(np.asarray(local_point, dtype=float))
    fn = {"value": field.values, "gradient": field.gradient,
          "divergence": field.divergence}[what]
    return fn(ref)[element, 0]


def physical(mesh, func):
    """Wrap ``func(x)`` of physical points as a reference-point evaluator."""
    return lambda ref: func(mesh.map_points(np.atleast_2d(ref)))


def integrate(mesh, func, degree=8):
    """Per-element integrals of ``func(ref) -> (nt, np, ...)``."""
    rule = quadrature(degree)
    vals = func(rule.points)
    w = 2.0 * mesh.areas[:, None] * rule.weights[None, :]
    return np.einsum("tp,tp...->t...", w, vals)


_P1_MASS_INV = np.array([[3.0, -1.0, -1.0], [-1.0, 3.0, -1.0], [-1.0, -1.0, 3.0]]) * 3.0


def project_P1(mesh, source, degree=8):
    """Elementwise L2 projection onto discontinuous P1.

    ``source`` is a field (anything with ``values(ref)``) or a function of
    reference points; vector- and tensor-valued inputs are projected
    componentwise.  Returns a :class:`FieldView` on :class:`DGP1Space`
    with coefficients of shape ``(ndofs,)`` or ``(ncomp, ndofs)``.
    """
    func = source.values if hasattr(source, "values") else source
    rule = quadrature(degree)
    vals = func(rule.points)
    lam = rule.barycentric
    w = 2.0 * mesh.areas[:, None] * rule.weights[None, :]
    rhs = np.einsum("tp,pk,tp...->t...k", w, lam, vals)
    coef = np.einsum("kl,t...l->t...k", _P1_MASS_INV, rhs) / mesh.areas.reshape(
        (-1,) + (1,) * (rhs.ndim - 1))
    space = DGP1Space(mesh)
    nt = mesh.num_triangles
    extra = coef.shape[1:-1]
    if extra:
        flat = coef.reshape(nt, -1, 3)
        data = np.moveaxis(flat, 1, 0).reshape(flat.shape[1], 3 * nt)
        return FieldView(space, data)
    return FieldView(space, coef.reshape(3 * nt))


def interpolate_lagrange(space, func):
    """Nodal interpolant of ``func(x)`` (physical points -> values)."""
    mesh = space.mesh
    x = mesh.map_points(space.nodes)
    vals = np.asarray(func(x))
    if vals.ndim == 2:
        out = np.zeros(space.ndofs)
        out[space.cell_dofs] = vals
    else:
        out = np.zeros((vals.shape[-1], space.ndofs))
        for c in range(vals.shape[-1]):
            out[c][space.cell_dofs] = vals[..., c]
    return FieldView(space, out)


def rt1_local_dofs(space, func, degree=6):
    """Canonical RT1 dofs ``(nt, [rows,] 8)`` of an elementwise field.

    ``func(ref)`` returns ``(nt, np, 2)`` or ``(nt, np, 2, 2)`` (rows).
    The edge moments use each element's own trace.
    """
    mesh = space.mesh
    npts = max(2, (degree + 2) // 2)
    tq, wq = gauss_line(npts)
    parts = []
    for e in range(3):
        vals = func(edge_reference_points(e, tq))
        vn = np.einsum("tq...d,td->tq...", vals, space.local_normals[:, e])
        s = space.edge_sign[:, e, None] * (2 * tq[None, :] - 1)
        s = s.reshape(s.shape + (1,) * (vn.ndim - 2))
        parts.append(np.einsum("q,tq...->t...", wq, vn))
        parts.append(np.einsum("q,tq...->t...", wq, s * vn))
    rule = quadrature(degree)
    vals = func(rule.points)
    interior = 2.0 * np.einsum("q,tq...d->t...d", rule.weights, vals)
    parts += [interior[..., 0], interior[..., 1]]
    return np.stack(parts, axis=-1)


def interpolate_rt1(space, source, degree=6):
    """Canonical RT1 interpolant of an elementwise field.

    On a broken space the result is exact elementwise; on a conforming space
    the two edge-moment values of neighbouring elements are averaged.
    """
    func = source.values if hasattr(source, "values") else source
    loc = rt1_local_dofs(space, func, degree)
    tensor = loc.ndim == 3
    loc = np.moveaxis(loc, 1, 0) if tensor else loc[None]
    if space.broken:
        coef = loc.reshape(loc.shape[0], -1)
    else:
        coef = _gather_conforming(space, loc)
    return FieldView(space, coef if tensor else coef[0])


def _gather_conforming(space, loc):
    """Average element dofs ``(C, nt, 8)`` into conforming coefficients."""
    c = loc.shape[0]
    out = np.zeros((c, space.ndofs))
    cnt = np.zeros(space.ndofs)
    np.add.at(cnt, space.cell_dofs.ravel(), 1.0)
    for k in range(c):
        np.add.at(out[k], space.cell_dofs.ravel(), loc[k].ravel())
    return out / cnt[None, :]


def broken_to_conforming(field, conforming_space=None):
    """Map a broken RT1 field with (numerically) matching edge dofs to RT1."""
    space = conforming_space or RT1Space(field.mesh)
    loc = field.coefficients.reshape(-1, field.mesh.num_triangles, 8)
    coef = _gather_conforming(space, loc)
    return FieldView(space, coef[0] if field.coefficients.ndim == 1 else coef)


def mass_matrix(space, degree=None):
    """Sparse L2 mass matrix of a scalar Lagrange/DG or vector RT space."""
    deg = degree or min(10, 2 * getattr(space, "degree", 2))
    rule = quadrature(deg)
    b = space.basis(rule.points)
    w = 2.0 * space.mesh.areas[:, None] * rule.weights[None, :]
    if b.ndim == 3:
        b = np.broadcast_to(b, (space.mesh.num_triangles,) + b.shape[1:])
        loc = np.einsum("tp,tpk,tpl->tkl", w, b, b)
    else:
        loc = np.einsum("tp,tpkd,tpld->tkl", w, b, b)
    return assemble_matrix(space.cell_dofs, space.cell_dofs, loc,
                           (space.ndofs, space.ndofs))


def assemble_matrix(rows, cols, local, shape):
    """COO assembly of element matrices ``local (nt, nr, nc)``."""
    r = np.broadcast_to(rows[:, :, None], local.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], local.shape).ravel()
    return sp.csr_matrix((local.ravel(), (r, c)), shape=shape)


def assemble_vector(rows, local, size):
    out = np.zeros(size)
    np.add.at(out, rows.ravel(), local.ravel())
    return out

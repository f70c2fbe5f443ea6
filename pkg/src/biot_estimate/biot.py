"""Three-field Biot system with Taylor-Hood elements.

Unknowns are the displacement ``u`` (P2 vector, zero trace), the total
pressure ``p`` (P1, no boundary condition) and the fluid pressure ``phi``
(P2, zero trace).  The weak form reads

    2 mu (eps(u), eps(v)) - (p, div v)             = (f, v)
    (div u, q) + lambda_inv (p - phi, q)           = 0
    lambda_inv (phi - p, psi) + tau (grad phi, grad psi) = (g, psi)

and is assembled with the second and third block rows negated, which makes
the matrix symmetric (indefinite).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    DGP1Space,
    FieldView,
    LagrangeSpace,
    PiecewiseField,
    RT1Space,
    assemble_matrix,
    assemble_vector,
    interpolate_rt1,
    project_P1,
    quadrature,
)

log = logging.getLogger(__name__)

__all__ = [
    "BiotParameters",
    "SourceData",
    "BiotSolution",
    "LinearSystem",
    "SolverError",
    "assemble",
    "solve",
    "solve_biot",
    "postprocess_stress",
    "postprocess_flux",
    "constraint_residual",
]


class SolverError(RuntimeError):
    """Raised when the discrete system cannot be factorized or solved."""


@dataclass(frozen=True)
class BiotParameters:
    mu: float = 1.0
    lambda_inv: float = 1.0
    tau: float = 1.0
    d: int = 2

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.lambda_inv >= 0:
            raise ValueError(f"lambda_inv must be nonnegative, got {self.lambda_inv}")
        if self.d != 2:
            raise ValueError("only d = 2 is implemented")

    @classmethod
    def from_lambda(cls, mu, lam, tau):
        return cls(mu=mu, lambda_inv=0.0 if np.isinf(lam) else 1.0 / lam, tau=tau)

    @property
    def trace_weight(self):
        """lambda / (2 mu + d lambda), finite at lambda = inf."""
        return 1.0 / (2.0 * self.mu * self.lambda_inv + self.d)


@dataclass
class SourceData:
    """Volume sources as functions of physical points ``x (..., 2)``.

    ``f(x)`` returns ``(..., 2)``, ``g(x)`` returns ``(...)``.  After
    :meth:`project` the elementwise P1 projections are attached.
    """

    f: object
    g: object
    projected_f: FieldView | None = None
    projected_g: FieldView | None = None

    def project(self, mesh):
        pf = project_P1(mesh, lambda ref: self.f(mesh.map_points(ref)))
        pg = project_P1(mesh, lambda ref: self.g(mesh.map_points(ref)))
        return replace(self, projected_f=pf, projected_g=pg)

    @property
    def is_projected(self):
        return self.projected_f is not None

    @classmethod
    def zero(cls):
        return cls(lambda x: np.zeros(x.shape), lambda x: np.zeros(x.shape[:-1]))

    @classmethod
    def constant(cls, f, g):
        f = np.asarray(f, dtype=float)
        return cls(lambda x: np.broadcast_to(f, x.shape).copy(),
                   lambda x: np.full(x.shape[:-1], float(g)))


@dataclass
class LinearSystem:
    """Reduced (free-dof) symmetric system plus the bookkeeping to expand it."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    mesh: object
    params: BiotParameters
    sources: SourceData
    spaces: tuple
    free: np.ndarray
    offsets: tuple
    partition: dict = field(default_factory=dict)
    pinned: int | None = None

    @property
    def size(self):
        return self.matrix.shape[0]


@dataclass
class BiotSolution:
    u: FieldView
    p: FieldView
    phi: FieldView
    params: BiotParameters
    residual_norm: float
    mesh: object = None
    sources: SourceData | None = None
    system: LinearSystem | None = None

    @property
    def num_dofs(self):
        return self.system.size if self.system is not None else None


def _local_forms(mesh, us, qs, degree):
    rule = quadrature(min(10, 2 * degree))
    w = 2.0 * mesh.areas[:, None] * rule.weights[None, :]
    gu = us.basis_grad(rule.points)
    bu = us.basis(rule.points)[0]
    bq = qs.basis(rule.points)[0]
    gx, gy = gu[..., 0], gu[..., 1]
    xx = np.einsum("tp,tpi,tpj->tij", w, gx, gx)
    yy = np.einsum("tp,tpi,tpj->tij", w, gy, gy)
    xy = np.einsum("tp,tpi,tpj->tij", w, gx, gy)
    # (q_j, d v_i / dx_k)
    bx = np.einsum("tp,pj,tpi->tji", w, bq, gx)
    by = np.einsum("tp,pj,tpi->tji", w, bq, gy)
    mqq = np.einsum("tp,pi,pj->tij", w, bq, bq)
    mqs = np.einsum("tp,pi,pj->tij", w, bq, bu)
    mss = np.einsum("tp,pi,pj->tij", w, bu, bu)
    return xx, yy, xy, bx, by, mqq, mqs, mss


def assemble(mesh, params, sources, degree=2, project_sources=True):
    """Assemble the symmetric Taylor-Hood system on ``mesh``.

    ``degree`` is the displacement/fluid-pressure degree (2, or 3 for the
    overkill reference); the total pressure uses ``degree - 1``.  With
    ``project_sources`` the right-hand side uses the elementwise P1
    projections of ``f`` and ``g``, otherwise the raw functions.
    """
    if mesh.num_triangles == 0:
        raise ValueError("empty mesh")
    if project_sources and not sources.is_projected:
        sources = sources.project(mesh)
    us = LagrangeSpace(mesh, degree, zero_trace=True)
    qs = LagrangeSpace(mesh, degree - 1)
    nu, nq = us.ndofs, qs.ndofs
    mu, li, tau = params.mu, params.lambda_inv, params.tau
    xx, yy, xy, bx, by, mqq, mqs, mss = _local_forms(mesh, us, qs, degree)
    cu, cq = us.cell_dofs, qs.cell_dofs
    o_u2, o_p, o_s = nu, 2 * nu, 2 * nu + nq
    n = 2 * nu + nq + nu

    blocks = [
        (cu, cu, 2 * mu * (xx + 0.5 * yy)),
        (cu + o_u2, cu + o_u2, 2 * mu * (yy + 0.5 * xx)),
        (cu, cu + o_u2, mu * np.transpose(xy, (0, 2, 1))),
        (cu + o_u2, cu, mu * xy),
        (cq + o_p, cu, -bx),
        (cq + o_p, cu + o_u2, -by),
        (cu, cq + o_p, -np.transpose(bx, (0, 2, 1))),
        (cu + o_u2, cq + o_p, -np.transpose(by, (0, 2, 1))),
        (cu + o_s, cu + o_s, -li * mss - tau * (xx + yy)),
    ]
    if li != 0.0:
        blocks += [
            (cq + o_p, cq + o_p, -li * mqq),
            (cq + o_p, cu + o_s, li * mqs),
            (cu + o_s, cq + o_p, li * np.transpose(mqs, (0, 2, 1))),
        ]
    mat = sum(assemble_matrix(r, c, loc, (n, n)) for r, c, loc in blocks).tocsr()

    rule = quadrature(8)
    w = 2.0 * mesh.areas[:, None] * rule.weights[None, :]
    if project_sources:
        fv = sources.projected_f.values(rule.points)
        gv = sources.projected_g.values(rule.points)
    else:
        x = mesh.map_points(rule.points)
        fv, gv = sources.f(x), sources.g(x)
    bu = us.basis(rule.points)[0]
    rhs = np.zeros(n)
    rhs += assemble_vector(cu, np.einsum("tp,tp,pi->ti", w, fv[..., 0], bu), n)
    rhs += assemble_vector(cu + o_u2, np.einsum("tp,tp,pi->ti", w, fv[..., 1], bu), n)
    rhs -= assemble_vector(cu + o_s, np.einsum("tp,tp,pi->ti", w, gv, bu), n)

    ufree = us.dofmap.free_dofs
    free = np.concatenate([ufree, ufree + o_u2, np.arange(nq) + o_p, ufree + o_s])
    pinned = None
    if li == 0.0:
        # p is determined up to a constant; pin its first dof
        pinned = int(o_p)
        free = free[free != pinned]
    red = mat[free][:, free].tocsr()
    nuf = len(ufree)
    npf = nq - (1 if pinned is not None else 0)
    partition = {
        "u": slice(0, 2 * nuf),
        "p": slice(2 * nuf, 2 * nuf + npf),
        "phi": slice(2 * nuf + npf, 2 * nuf + npf + nuf),
    }
    return LinearSystem(red, rhs[free], mesh, params, sources, (us, qs), free,
                        (0, o_u2, o_p, o_s, n), partition, pinned)


def _diagnose_singular(system):
    for name in ("u", "phi", "p"):
        sl = system.partition[name]
        block = system.matrix[sl, sl].tocsc()
        if block.shape[0] == 0:
            continue
        try:
            spla.splu(block)
        except RuntimeError:
            return name
    return "p"


def solve(system, refine_steps=2):
    """Direct sparse solve of ``system``; returns a :class:`BiotSolution`."""
    a = system.matrix.tocsc()
    b = system.rhs
    bnorm = np.linalg.norm(b)
    x = res = None
    # symmetric structure: minimum degree on A^T + A with diagonal pivots keeps
    # the fill low; threshold pivoting is the fallback for an unlucky order
    for thresh in (0.0, 0.1):
        try:
            lu = spla.splu(a, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=thresh,
                           options={"SymmetricMode": True})
        except RuntimeError as exc:
            if thresh > 0:
                block = _diagnose_singular(system)
                raise SolverError(f"singular factorization: zero pivot in the {block} "
                                  f"block ({exc})") from exc
            continue
        x = lu.solve(b)
        res = np.linalg.norm(a @ x - b)
        for _ in range(refine_steps):
            if res <= 1e-13 * max(bnorm, 1e-300):
                break
            x = x + lu.solve(b - a @ x)
            res = np.linalg.norm(a @ x - b)
        if np.all(np.isfinite(x)) and res <= 1e-10 * max(bnorm, 1e-300):
            break
        log.debug("diagonal pivoting gave residual %.3e; retrying with threshold", res)
    if not np.all(np.isfinite(x)):
        raise SolverError("solution contains non-finite values")

    full = np.zeros(system.offsets[-1])
    full[system.free] = x
    us, qs = system.spaces
    _, o_u2, o_p, o_s, n = system.offsets
    u = FieldView(us, np.stack([full[:o_u2], full[o_u2:o_p]]))
    pco = full[o_p:o_s].copy()
    if system.pinned is not None:
        # shift to zero mean; Lagrange bases reproduce constants
        rule = quadrature(2)
        mesh = system.mesh
        mean = np.sum(2 * mesh.areas[:, None] * rule.weights
                      * FieldView(qs, pco).values(rule.points)) / mesh.areas.sum()
        pco -= mean
    p = FieldView(qs, pco)
    phi = FieldView(us, full[o_s:n])
    rel = res / bnorm if bnorm > 0 else res
    if rel > 1e-10:
        log.warning("algebraic residual %.3e exceeds 1e-10 relative", rel)
    return BiotSolution(u, p, phi, system.params, res, system.mesh, system.sources, system)


def solve_biot(mesh, params, sources, degree=2, project_sources=True):
    """Assemble and solve in one call."""
    return solve(assemble(mesh, params, sources, degree, project_sources))


def constraint_residual(solution):
    """Max over P1 basis functions q of |(lambda_inv (p - phi) + div u, q)|,
    relative to the largest of the individual terms."""
    mesh = solution.mesh
    qs = LagrangeSpace(mesh, 1)
    rule = quadrature(6)
    w = 2.0 * mesh.areas[:, None] * rule.weights[None, :]
    grad = solution.u.gradient(rule.points)
    div = grad[..., 0, 0] + grad[..., 1, 1]
    pp = solution.params.lambda_inv * (solution.p.values(rule.points)
                                       - solution.phi.values(rule.points))
    b = qs.basis(rule.points)[0]
    r = assemble_vector(qs.cell_dofs, np.einsum("tp,tp,pi->ti", w, div + pp, b), qs.ndofs)
    scale = assemble_vector(qs.cell_dofs, np.einsum("tp,tp,pi->ti", w, np.abs(div)
                                                    + np.abs(pp), b), qs.ndofs)
    return float(np.max(np.abs(r)) / max(np.max(scale), 1e-300))


def postprocess_stress(solution):
    """theta = 2 mu eps(u_h) - (p_h - phi_h) I, elementwise 2x2 with P2 entries."""
    mu = solution.params.mu
    u, p, phi = solution.u, solution.p, solution.phi

    def values(ref):
        g = u.gradient(ref)
        eps = 0.5 * (g + np.swapaxes(g, -1, -2))
        s = p.values(ref) - phi.values(ref)
        return 2 * mu * eps - s[..., None, None] * np.eye(2)

    def divergence(ref):
        # div(2 mu eps(u)) - grad(p - phi); second derivatives of P2 are constant
        return _div_sym_grad(u, ref, mu) - p.gradient(ref) + phi.gradient(ref)

    return PiecewiseField(solution.mesh, values, divergence)


def _div_sym_grad(u, ref, mu):
    """div(2 mu eps(u)) elementwise for a P2 vector field (exact)."""
    mesh = u.mesh
    space = u.space
    # Hessians of P2 basis functions are elementwise constant; use finite
    # differences of the exact linear gradients in reference coordinates.
    loc = u.local()
    ref = np.atleast_2d(ref)
    jac = mesh.jacobians()
    binv = np.linalg.inv(jac)
    h0 = space.basis_grad(np.array([[0.0, 0.0]]))[:, 0]
    h1 = space.basis_grad(np.array([[1.0, 0.0]]))[:, 0]
    h2 = space.basis_grad(np.array([[0.0, 1.0]]))[:, 0]
    # d(grad phi)/d(ref) columns, then chain rule to physical
    dr = np.stack([h1 - h0, h2 - h0], axis=-1)  # (nt, nloc, 2 grad, 2 ref)
    hess = np.einsum("tlgr,tri->tlgi", dr, binv)  # (nt, nloc, grad comp, phys)
    # hess[t, l, a, b] = d_b d_a phi_l
    lap = hess[..., 0, 0] + hess[..., 1, 1]
    out = np.empty((mesh.num_triangles, 2))
    for i in range(2):
        gd = sum(np.einsum("tl,tl->t", loc[j], hess[..., j, i]) for j in range(2))
        out[:, i] = mu * (np.einsum("tl,tl->t", loc[i], lap) + gd)
    return np.broadcast_to(out[:, None, :], (mesh.num_triangles, len(ref), 2))


def postprocess_flux(solution, space=None):
    """w = -grad phi_h as a broken RT1 field (exact: P1 vectors lie in RT1)."""
    space = space or RT1Space(solution.mesh, broken=True)
    phi = solution.phi
    return interpolate_rt1(space, lambda ref: -phi.gradient(ref), degree=4)

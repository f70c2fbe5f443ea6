"""Vertex-patch equilibration of the flux and the weakly symmetric stress.

Both reconstructions have the form ``base + sum_z correction_z``.  Each
correction lives in broken RT1 (rowwise for the stress) on the patch of a
vertex ``z`` and solves the smallest-L2-norm problem subject to

* divergence:  div correction_z = P1[(target - div base) * hat_z]  elementwise,
* jumps:       P1 moments of [[correction_z . n]] = -P1 moments of hat_z [[base . n]]
               on every edge at ``z`` not on the domain boundary,
* no flux:     zero normal trace on patch edges opposite ``z`` (unless on the
               domain boundary),
* symmetry (stress only): (as correction_z, hat_y) = -delta_zy (as base, hat_z)
               for every vertex ``y`` of the patch.

Summing over ``z`` the hats form a partition of unity, so the result is
normal-continuous, has the target divergence and is weakly symmetric against
continuous P1.

The stress base is ``2 mu eps(u_h) - (p_h - P1 phi_h) I``.  It is exactly
symmetric, elementwise P1 (hence in broken RT1) and has the same P1 moments
as the discrete stress, so the interior patch problems stay compatible.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .biot import postprocess_flux
from .fem import (
    FieldView,
    RT1Space,
    broken_to_conforming,
    edge_reference_points,
    gauss_line,
    interpolate_rt1,
    project_P1,
    quadrature,
)
from .mesh import vertex_patches

log = logging.getLogger(__name__)

__all__ = [
    "EquilibrationError",
    "FluxReconstruction",
    "StressReconstruction",
    "PatchProblem",
    "jump",
    "skew_embed",
    "stress_base",
    "flux_target",
    "stress_target",
    "equilibrate_flux",
    "equilibrate_stress",
    "verify_flux",
    "verify_stress",
    "patch_compatibility",
    "global_oracle",
    "thread_count",
]

PATCH_TOL = 1e-10


class EquilibrationError(RuntimeError):
    """Raised when reconstruction constraints cannot be met."""


@dataclass
class FluxReconstruction:
    w_R: FieldView
    correction_norm: float
    broken: FieldView
    base: FieldView
    target: object
    patch_residual: float = 0.0


@dataclass
class StressReconstruction:
    theta_R: FieldView
    correction_norm: float
    broken: FieldView
    base: FieldView
    target: object
    patch_residual: float = 0.0


@dataclass
class PatchProblem:
    """Constraint matrix and right-hand side of one vertex patch.

    Unknowns are ordered (element, row, local dof) over ``patch.elements``.
    """

    patch: object
    matrix: np.ndarray
    rhs: np.ndarray
    nrows: int

    def solve(self, rinv):
        """Minimum L2-norm solution; ``rinv`` holds inverse Cholesky factors
        of the element mass matrices, one per element."""
        blocks = np.repeat(rinv, self.nrows, axis=0)
        n = blocks.shape[0]
        bt = self.matrix.reshape(self.matrix.shape[0], n, 8)
        bt = np.einsum("rnj,njk->rnk", bt, blocks).reshape(self.matrix.shape[0], -1)
        y = sla.lstsq(bt, self.rhs, cond=1e-13, lapack_driver="gelsy")[0]
        x = np.einsum("njk,nk->nj", blocks, y.reshape(n, 8)).ravel()
        res = np.linalg.norm(self.matrix @ x - self.rhs)
        return x, float(y @ y), res


def thread_count():
    """Worker count from ``BIOT_ESTIMATE_THREADS`` (default 1)."""
    raw = os.environ.get("BIOT_ESTIMATE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring invalid BIOT_ESTIMATE_THREADS=%r", raw)
        return 1


def skew_embed(gamma):
    """J(gamma) = [[0, gamma], [-gamma, 0]], broadcast over ``gamma``."""
    g = np.asarray(gamma, dtype=float)
    out = np.zeros(g.shape + (2, 2))
    out[..., 0, 1] = g
    out[..., 1, 0] = -g
    return out


def _edge_traces(field, edge, tq):
    mesh = field.mesh
    out = []
    for t in mesh.edge_tris[edge]:
        e = int(np.flatnonzero(mesh.tri_edges[t] == edge)[0])
        local_t = tq if mesh.tri_edge_forward[t, e] else 1.0 - tq
        out.append(field.values(edge_reference_points(e, local_t))[t])
    return out


def jump(field, edge, reverse=False, npoints=4):
    """Moments of the normal jump across an interior edge.

    Returns ``<[[q.n]], 1>`` and ``<[[q.n]], s>`` over the edge (``s`` from -1
    at the lower to +1 at the higher vertex index) with
    ``[[q.n]] = q|T- . n - q|T+ . n``; for tensors, one pair per row.
    ``reverse`` flips the normal while keeping the element roles.
    """
    mesh = field.mesh
    if mesh.boundary_edges[edge]:
        raise ValueError(f"edge {edge} lies on the boundary; jumps are defined on "
                         "interior edges only")
    tq, wq = gauss_line(npoints)
    vm, vp = _edge_traces(field, edge, tq)
    n = mesh.edge_normals[edge] * (-1.0 if reverse else 1.0)
    jn = (vm - vp) @ n
    s = 2 * tq - 1
    length = mesh.edge_lengths[edge]
    return length * np.stack([wq @ jn, (wq * s) @ jn], axis=-1)


# --------------------------------------------------------------------------
# problem data

def stress_base(solution, space=None):
    """Symmetric broken-RT1 base ``2 mu eps(u_h) - (p_h - P1 phi_h) I``."""
    space = space or RT1Space(solution.mesh, broken=True)
    mu = solution.params.mu
    pphi = project_P1(solution.mesh, solution.phi)

    def values(ref):
        g = solution.u.gradient(ref)
        s = solution.p.values(ref) - pphi.values(ref)
        return mu * (g + np.swapaxes(g, -1, -2)) - s[..., None, None] * np.eye(2)

    return interpolate_rt1(space, values, degree=4)


def stress_target(solution, sources):
    """Elementwise divergence target ``-P1 f + grad phi_h``."""
    pf = sources.projected_f
    return lambda ref: -pf.values(ref) + solution.phi.gradient(ref)


def flux_target(solution, sources):
    """Elementwise divergence target ``(P1 g + lambda_inv (p_h - P1 phi_h)) / tau``."""
    prm = solution.params
    pg = sources.projected_g
    pphi = project_P1(solution.mesh, solution.phi)
    return lambda ref: (pg.values(ref) + prm.lambda_inv
                        * (solution.p.values(ref) - pphi.values(ref))) / prm.tau


class _ElementData:
    """Per-element matrices shared by all patch problems on a mesh."""

    def __init__(self, space):
        mesh = space.mesh
        self.space = space
        rule = quadrature(4)
        self.rule = rule
        self.w = 2.0 * mesh.areas[:, None] * rule.weights[None, :]
        self.lam = rule.barycentric
        b = space.basis(rule.points)
        d = space.basis_div(rule.points)
        mass = np.einsum("tp,tpkd,tpld->tkl", self.w, b, b)
        r = np.transpose(np.linalg.cholesky(mass), (0, 2, 1))
        self.rinv = np.linalg.inv(r)
        self.div = np.einsum("tp,pk,tpj->tkj", self.w, self.lam, d)
        # (as q, lambda_a) for q = row0 dof j (component 1) and row1 dof j (component 0)
        self.sym = np.einsum("tp,pa,tpjd->tajd", self.w, self.lam, b)


def _local_index(mesh, elems, z):
    return np.argmax(mesh.triangles[elems] == z, axis=1)


def _jump_moments(base_local, mesh):
    """Hat-weighted averaged jump moments per interior edge.

    Returns ``(ne, 2 ends, C, 2)``: ``(1/|S|) <hat_end [[b.n]], s^q>``.
    """
    tm, tp = mesh.edge_tris[:, 0], mesh.edge_tris[:, 1]
    inner = (tm >= 0) & (tp >= 0)
    ne = mesh.num_edges
    c = base_local.shape[0]
    out = np.zeros((ne, 2, c, 2))
    idx = np.flatnonzero(inner)
    em = np.argmax(mesh.tri_edges[tm[idx]] == idx[:, None], axis=1)
    ep = np.argmax(mesh.tri_edges[tp[idx]] == idx[:, None], axis=1)
    j0, j1 = (base_local[:, tm[idx], 2 * em + q] - base_local[:, tp[idx], 2 * ep + q]
              for q in range(2))
    # normal trace = m0 + 3 m1 s; averages over s in [-1, 1]
    out[idx, 0, :, 0] = (0.5 * (j0 - j1)).T
    out[idx, 0, :, 1] = (0.5 * (j1 - j0 / 3.0)).T
    out[idx, 1, :, 0] = (0.5 * (j0 + j1)).T
    out[idx, 1, :, 1] = (0.5 * (j1 + j0 / 3.0)).T
    return out


def _build_patch(patch, data, divrhs, jumps, sym_rhs):
    mesh = patch.mesh
    z = patch.center
    elems = patch.elements
    m = len(elems)
    c = divrhs.shape[2]
    nunk = m * c * 8
    pos = {int(t): i for i, t in enumerate(elems)}
    az = _local_index(mesh, elems, z)
    rows, rhs = [], []

    def unit(i, comp, j):
        r = np.zeros(nunk)
        r[(i * c + comp) * 8 + j] = 1.0
        return r

    for i, t in enumerate(elems):
        for comp in range(c):
            for k in range(3):
                r = np.zeros(nunk)
                r[(i * c + comp) * 8:(i * c + comp + 1) * 8] = data.div[t, k]
                rows.append(r)
                rhs.append(divrhs[t, az[i], comp, k])
    for e in patch.interior_edges:
        tm, tp = mesh.edge_tris[e]
        im, ip = pos[int(tm)], pos[int(tp)]
        lm = int(np.flatnonzero(mesh.tri_edges[tm] == e)[0])
        lp = int(np.flatnonzero(mesh.tri_edges[tp] == e)[0])
        end = 0 if mesh.edges[e, 0] == z else 1
        for comp in range(c):
            for q in range(2):
                rows.append(unit(im, comp, 2 * lm + q) - unit(ip, comp, 2 * lp + q))
                rhs.append(-jumps[e, end, comp, q])
    for i, t in enumerate(elems):
        e = mesh.tri_edges[t, az[i]]
        if mesh.boundary_edges[e]:
            continue
        for comp in range(c):
            for q in range(2):
                rows.append(unit(i, comp, 2 * az[i] + q))
                rhs.append(0.0)
    if c == 2:
        for y in patch.vertices:
            r = np.zeros(nunk)
            for i, t in enumerate(elems):
                hit = np.flatnonzero(mesh.triangles[t] == y)
                if hit.size == 0:
                    continue
                a = hit[0]
                r[(i * 2) * 8:(i * 2 + 1) * 8] += data.sym[t, a, :, 1]
                r[(i * 2 + 1) * 8:(i * 2 + 2) * 8] -= data.sym[t, a, :, 0]
            rows.append(r)
            rhs.append(sym_rhs[z] if y == z else 0.0)
    return PatchProblem(patch, np.array(rows), np.array(rhs), c)


def _divergence_rhs(data, base, target):
    """``(nt, 3 hats, C, 3 tests)``: int_T (target - div base) lambda_a lambda_k."""
    pts = data.rule.points
    r = np.asarray(target(pts), dtype=float) - base.divergence(pts)
    if r.ndim == 2:
        r = r[..., None]
    return np.einsum("tp,pa,pk,tpc->tack", data.w, data.lam, data.lam, r)


def _asym_moments(field, data):
    """Per-vertex ``(theta_12 - theta_21, hat_z)`` of a broken RT1 tensor."""
    mesh = field.mesh
    loc = field.local()
    per = (np.einsum("tj,taj->ta", loc[0], data.sym[..., 1])
           - np.einsum("tj,taj->ta", loc[1], data.sym[..., 0]))
    out = np.zeros(mesh.num_vertices)
    np.add.at(out, mesh.triangles.ravel(), per.ravel())
    return out


def _equilibrate(base, target, nthreads=None):
    mesh = base.mesh
    space = base.space
    data = _ElementData(space)
    loc = base.local()
    c = loc.shape[0]
    divrhs = _divergence_rhs(data, base, target)
    jumps = _jump_moments(loc, mesh)
    sym_rhs = -_asym_moments(base, data) if c == 2 else None
    patches = vertex_patches(mesh)

    def work(patch):
        prob = _build_patch(patch, data, divrhs, jumps, sym_rhs)
        return prob.solve(data.rinv[patch.elements])

    nthreads = nthreads or thread_count()
    if nthreads > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            results = list(pool.map(work, patches))
    else:
        results = [work(p) for p in patches]

    corr = np.zeros((c, mesh.num_triangles, 8))
    norm2 = 0.0
    worst = 0.0
    scale = max(np.abs(divrhs).max(), np.abs(jumps).max(), 1e-300)
    for patch, (x, n2, res) in zip(patches, results):
        x = x.reshape(len(patch.elements), c, 8)
        corr[:, patch.elements] += np.moveaxis(x, 1, 0)
        norm2 += n2
        worst = max(worst, res / scale)
    if worst > PATCH_TOL:
        log.warning("patch constraints met only in the least-squares sense; "
                    "worst relative residual %.3e", worst)
    total = loc + corr
    coef = total.reshape(c, -1)
    broken = FieldView(space, coef if c == 2 else coef[0])
    conforming = broken_to_conforming(broken)
    corr_field = FieldView(space, corr.reshape(c, -1) if c == 2 else corr.reshape(-1))
    return conforming, broken, corr_field, worst


def equilibrate_flux(mesh, solution, sources, base=None, nthreads=None):
    """H(div)-conforming flux with ``tau div w_R = P1 g + lambda_inv (p_h - P1 phi_h)``."""
    if not sources.is_projected:
        sources = sources.project(mesh)
    space = RT1Space(mesh, broken=True)
    base = base if base is not None else postprocess_flux(solution, space)
    target = flux_target(solution, sources)
    w_r, broken, corr, worst = _equilibrate(base, target, nthreads)
    cnorm = _l2_norm(corr)
    return FluxReconstruction(w_r, cnorm, broken, base, target, worst)


def equilibrate_stress(mesh, solution, sources, base=None, nthreads=None):
    """Rowwise H(div)-conforming, weakly symmetric stress with
    ``div theta_R = -P1 f + grad phi_h``."""
    if not sources.is_projected:
        sources = sources.project(mesh)
    space = RT1Space(mesh, broken=True)
    base = base if base is not None else stress_base(solution, space)
    target = stress_target(solution, sources)
    th, broken, corr, worst = _equilibrate(base, target, nthreads)
    cnorm = _l2_norm(corr)
    return StressReconstruction(th, cnorm, broken, base, target, worst)


def _l2_norm(field):
    rule = quadrature(4)
    v = field.values(rule.points)
    w = 2.0 * field.mesh.areas[:, None] * rule.weights[None, :]
    sq = v ** 2
    while sq.ndim > 2:
        sq = sq.sum(axis=-1)
    return float(np.sqrt(np.sum(w * sq)))


# --------------------------------------------------------------------------
# verification

def _div_residual(field, target):
    pts = quadrature(4).points
    t = np.asarray(target(pts), dtype=float)
    d = field.divergence(pts)
    scale = max(np.abs(t).max(), 1.0)
    return float(np.abs(d - t).max() / scale)


def _edge_mismatch(broken):
    """Largest normal-moment jump of a broken RT1 field over interior edges."""
    mesh = broken.mesh
    loc = broken.local()
    inner = ~mesh.boundary_edges
    if not inner.any():
        return 0.0
    tm, tp = mesh.edge_tris[inner, 0], mesh.edge_tris[inner, 1]
    idx = np.flatnonzero(inner)
    em = np.argmax(mesh.tri_edges[tm] == idx[:, None], axis=1)
    ep = np.argmax(mesh.tri_edges[tp] == idx[:, None], axis=1)
    worst = 0.0
    for q in range(2):
        d = loc[:, tm, 2 * em + q] - loc[:, tp, 2 * ep + q]
        worst = max(worst, float(np.abs(d).max()))
    return worst


def _jump_scale(broken):
    # jumps are measured relative to the field size (at least 1), like the
    # divergence residual is relative to the target
    return max(float(np.abs(broken.coefficients).max(initial=0.0)), 1.0)


def verify_flux(rec):
    """Residuals of the flux conditions: divergence, jumps."""
    scale = _jump_scale(rec.broken)
    return {
        "divergence": _div_residual(rec.w_R, rec.target),
        "divergence_broken": _div_residual(rec.broken, rec.target),
        "jump": _edge_mismatch(rec.broken) / scale,
        "conforming_jump": _conforming_jump(rec.w_R) / scale,
    }


def verify_stress(rec):
    """Residuals of the stress conditions: divergence, jumps, weak symmetry."""
    data = _ElementData(RT1Space(rec.theta_R.mesh, broken=True))
    asym = np.abs(_asym_moments(rec.broken, data)) / 2.0
    norm = max(_l2_norm(rec.theta_R), 1e-300)
    return {
        "divergence": _div_residual(rec.theta_R, rec.target),
        "divergence_broken": _div_residual(rec.broken, rec.target),
        "jump": _edge_mismatch(rec.broken) / _jump_scale(rec.broken),
        "conforming_jump": _conforming_jump(rec.theta_R) / _jump_scale(rec.broken),
        "symmetry": float(asym.max() / norm),
        "rotation": float(abs(asym_total(rec.theta_R)) / norm),
    }


def asym_total(field):
    """(as theta, 1) over the domain (scalar ``(theta_12 - theta_21) / 2``)."""
    rule = quadrature(4)
    v = field.values(rule.points)
    w = 2.0 * field.mesh.areas[:, None] * rule.weights[None, :]
    return float(np.sum(w * 0.5 * (v[..., 0, 1] - v[..., 1, 0])))


def _conforming_jump(field):
    """Largest jump moment of a field on all interior edges (by quadrature)."""
    mesh = field.mesh
    worst = 0.0
    tq, wq = gauss_line(3)
    s = 2 * tq - 1
    inner = np.flatnonzero(~mesh.boundary_edges)
    if inner.size == 0:
        return 0.0
    # evaluate traces elementwise for every local edge, then compare neighbours
    traces = []
    for e in range(3):
        traces.append(field.values(edge_reference_points(e, tq)))
    tm, tp = mesh.edge_tris[inner, 0], mesh.edge_tris[inner, 1]
    em = np.argmax(mesh.tri_edges[tm] == inner[:, None], axis=1)
    ep = np.argmax(mesh.tri_edges[tp] == inner[:, None], axis=1)
    n = mesh.edge_normals[inner]

    def normal_trace(tt, ee):
        vals = np.stack([traces[e][tt] for e in range(3)], axis=0)[ee, np.arange(len(tt))]
        fwd = mesh.tri_edge_forward[tt, ee]
        # Gauss points are symmetric, so reversing them maps to the global direction
        vals = np.where(fwd.reshape((-1,) + (1,) * (vals.ndim - 1)), vals, vals[:, ::-1])
        return np.einsum("eq...d,ed->eq...", vals, n)

    jn = normal_trace(tm, em) - normal_trace(tp, ep)
    for q in range(2):
        wsq = wq * s ** q
        mom = np.einsum("q,eq...->e...", wsq, jn)
        worst = max(worst, float(np.abs(mom).max()))
    return worst


def patch_compatibility(solution, sources, which="stress"):
    """Residual of the hat-weighted balance at interior vertices.

    For the stress and each interior vertex ``z`` and direction ``e_i``:
    ``(target - div b, hat_z e_i)_h + sum_S <[[b.n]], hat_z e_i>_S``, which is
    the discrete momentum equation tested with ``hat_z e_i``; analogously for
    the flux with the mass equation.  Returns the largest value relative to
    the largest individual term.
    """
    mesh = solution.mesh
    if not sources.is_projected:
        sources = sources.project(mesh)
    space = RT1Space(mesh, broken=True)
    if which == "stress":
        base, target = stress_base(solution, space), stress_target(solution, sources)
    else:
        base, target = postprocess_flux(solution, space), flux_target(solution, sources)
    data = _ElementData(space)
    divrhs = _divergence_rhs(data, base, target)
    # (r, hat_z): sum over tests k of the lambda_a lambda_k integrals
    vol = np.zeros((mesh.num_vertices, divrhs.shape[2]))
    np.add.at(vol, mesh.triangles.ravel(),
              divrhs.sum(axis=3).reshape(-1, divrhs.shape[2]))
    jumps = _jump_moments(base.local(), mesh)
    edge = np.zeros_like(vol)
    lengths = mesh.edge_lengths
    for end in range(2):
        np.add.at(edge, mesh.edges[:, end], lengths[:, None] * jumps[:, end, :, 0])
    interior = ~mesh.boundary_vertex_flags
    res = np.abs(vol + edge)[interior]
    scale = max(np.abs(vol).max(), np.abs(edge).max(), 1e-300)
    return float(res.max() / scale) if res.size else 0.0


def global_oracle(solution, sources, which="stress"):
    """Dense, un-localized constrained least-squares reconstruction.

    Solves for one global broken RT1 correction with the full divergence,
    jump and (for the stress) weak-symmetry conditions and minimal L2 norm.
    Intended for meshes with a handful of elements.
    """
    mesh = solution.mesh
    if not sources.is_projected:
        sources = sources.project(mesh)
    space = RT1Space(mesh, broken=True)
    if which == "stress":
        base, target = stress_base(solution, space), stress_target(solution, sources)
    else:
        base, target = postprocess_flux(solution, space), flux_target(solution, sources)
    data = _ElementData(space)
    loc = base.local()
    c = loc.shape[0]
    nt = mesh.num_triangles
    n = nt * c * 8
    rows, rhs = [], []
    pts = data.rule.points
    r = np.asarray(target(pts), dtype=float) - base.divergence(pts)
    if r.ndim == 2:
        r = r[..., None]
    full = np.einsum("tp,pk,tpc->tck", data.w, data.lam, r)
    for t in range(nt):
        for comp in range(c):
            for k in range(3):
                row = np.zeros(n)
                row[(t * c + comp) * 8:(t * c + comp + 1) * 8] = data.div[t, k]
                rows.append(row)
                rhs.append(full[t, comp, k])
    for e in np.flatnonzero(~mesh.boundary_edges):
        tm, tp = mesh.edge_tris[e]
        lm = int(np.flatnonzero(mesh.tri_edges[tm] == e)[0])
        lp = int(np.flatnonzero(mesh.tri_edges[tp] == e)[0])
        for comp in range(c):
            for q in range(2):
                row = np.zeros(n)
                row[(tm * c + comp) * 8 + 2 * lm + q] = 1.0
                row[(tp * c + comp) * 8 + 2 * lp + q] = -1.0
                rows.append(row)
                rhs.append(-(loc[comp, tm, 2 * lm + q] - loc[comp, tp, 2 * lp + q]))
    if c == 2:
        asym = _asym_moments(base, data)
        for y in range(mesh.num_vertices):
            row = np.zeros(n)
            for t in mesh.vertex_triangles(y):
                a = int(np.flatnonzero(mesh.triangles[t] == y)[0])
                row[(t * 2) * 8:(t * 2 + 1) * 8] += data.sym[t, a, :, 1]
                row[(t * 2 + 1) * 8:(t * 2 + 2) * 8] -= data.sym[t, a, :, 0]
            rows.append(row)
            rhs.append(-asym[y])
    prob = PatchProblem(None, np.array(rows), np.array(rhs), c)
    x, n2, res = prob.solve(data.rinv)
    corr = np.moveaxis(x.reshape(nt, c, 8), 1, 0)
    total = (loc + corr).reshape(c, -1)
    broken = FieldView(space, total if c == 2 else total[0])
    conforming = broken_to_conforming(broken)
    cls = StressReconstruction if c == 2 else FluxReconstruction
    return cls(conforming, float(np.sqrt(n2)), broken, base, target, res)

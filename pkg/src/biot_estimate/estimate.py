"""Guaranteed error bound built from the equilibrated reconstructions.

Estimator components (all L2 norms over the domain):

    eta_S = ||theta_R - theta_h||_A          eta_F = sqrt(tau) ||w_R - w_h||
    eta_P = lambda_inv / sqrt(tau) ||phi_h - P1 phi_h||
    eta_A = ||as theta_R||                   eta_C = ||lambda_inv (p_h - phi_h) + div u_h||

with ``A xi = (xi - tr(xi) / (2 mu lambda_inv + d) I) / (2 mu)``.  The bound
on the squared energy error is

    2 (eta_S^2 + C_K^2 / (4 mu) eta_A^2 + W_C eta_C^2 + eta_F^2 + 4 C_F^2 eta_P^2),
    W_C = mu (C_D w + 1 / C_D)^2 + 4 C_F^2 / tau,   w = 1 / (2 mu lambda_inv + d).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

from .biot import postprocess_stress
from .fem import project_P1, quadrature
from .mesh import ancestors

__all__ = [
    "ReliabilityConstants",
    "EstimatorBreakdown",
    "apply_A",
    "domain_diameter",
    "compute_estimators",
    "total_bound",
    "bound_weights",
    "energy_norm_error",
    "ErrorFields",
    "error_fields",
    "verify_bounds",
]

COMPONENTS = ("eta_S", "eta_A", "eta_C", "eta_F", "eta_P")


def domain_diameter(mesh):
    """Largest distance between two mesh vertices."""
    pts = mesh.vertices
    if len(pts) > 3:
        pts = pts[ConvexHull(pts).vertices]
    return float(pdist(pts).max())


@dataclass(frozen=True)
class ReliabilityConstants:
    """Constants of the bound.

    The bound is guaranteed only if ``C_K`` and ``C_D`` are valid Korn and
    dev-div constants of the mesh; the defaults of 1 are a working choice,
    not certified values.  ``C_F = diam / pi`` is a valid Friedrichs
    constant for functions vanishing on the boundary of a convex or
    L-shaped domain of that diameter.
    """

    C_K: float = 1.0
    C_D: float = 1.0
    C_F: float = 1.0 / np.pi
    provenance: str = "default"

    def __post_init__(self):
        for name in ("C_K", "C_D", "C_F"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def default_for(cls, mesh, **overrides):
        c_f = domain_diameter(mesh) / np.pi
        values = {"C_K": 1.0, "C_D": 1.0, "C_F": c_f}
        given = {k: v for k, v in overrides.items() if v is not None}
        values.update(given)
        return cls(provenance="user" if given else "default", **values)


def apply_A(xi, params):
    """Compliance operator on ``(..., 2, 2)`` tensors."""
    xi = np.asarray(xi, dtype=float)
    tr = xi[..., 0, 0] + xi[..., 1, 1]
    return (xi - (tr * params.trace_weight)[..., None, None] * np.eye(2)) / (2 * params.mu)


def bound_weights(constants, params):
    """Weights of ``eta_S^2, eta_A^2, eta_C^2, eta_F^2, eta_P^2`` inside the bound."""
    w = params.trace_weight
    cd, ck, cf = constants.C_D, constants.C_K, constants.C_F
    wc = params.mu * (cd * w + 1.0 / cd) ** 2 + 4 * cf ** 2 / params.tau
    return 2.0 * np.array([1.0, ck ** 2 / (4 * params.mu), wc, 1.0, 4 * cf ** 2])


@dataclass
class EstimatorBreakdown:
    eta_S: float
    eta_A: float
    eta_C: float
    eta_F: float
    eta_P: float
    per_element: np.ndarray
    bound: float
    indicator: np.ndarray
    constants: ReliabilityConstants = None
    params: object = None
    oscillation: dict = field(default_factory=dict)

    def as_dict(self):
        return {k: getattr(self, k) for k in COMPONENTS}

    @property
    def values(self):
        return np.array([getattr(self, k) for k in COMPONENTS])


def total_bound(breakdown, constants, params):
    """Bound on the squared energy error from the five global estimators."""
    eta = breakdown.values if hasattr(breakdown, "values") else np.asarray(breakdown)
    return float(bound_weights(constants, params) @ (np.asarray(eta, dtype=float) ** 2))


def _weights(mesh, rule):
    return 2.0 * mesh.areas[:, None] * rule.weights[None, :]


def compute_estimators(solution, stress_rec, flux_rec, constants, sources=None, degree=8):
    """All estimator components, their elementwise squares and the bound."""
    mesh = solution.mesh
    for rec in (stress_rec, flux_rec):
        if rec is not None:
            other = getattr(rec, "theta_R", None) or getattr(rec, "w_R", None)
            if other.mesh is not mesh:
                raise ValueError("reconstruction and solution live on different meshes")
    prm = solution.params
    rule = quadrature(degree)
    q = rule.points
    w = _weights(mesh, rule)

    theta = postprocess_stress(solution).values(q)
    theta_r = stress_rec.theta_R.values(q)
    diff = theta_r - theta
    s2 = np.einsum("tp,tpij,tpij->t", w, apply_A(diff, prm), diff)

    asym = theta_r[..., 0, 1] - theta_r[..., 1, 0]
    a2 = np.einsum("tp,tp->t", w, 0.5 * asym ** 2)

    grad = solution.u.gradient(q)
    div = grad[..., 0, 0] + grad[..., 1, 1]
    pv, phv = solution.p.values(q), solution.phi.values(q)
    c = prm.lambda_inv * (pv - phv) + div
    c2 = np.einsum("tp,tp->t", w, c ** 2)

    fd = flux_rec.w_R.values(q) + solution.phi.gradient(q)
    f2 = prm.tau * np.einsum("tp,tpd,tpd->t", w, fd, fd)

    if prm.lambda_inv == 0.0:
        p2 = np.zeros(mesh.num_triangles)
    else:
        pphi = project_P1(mesh, solution.phi)
        dp = phv - pphi.values(q)
        p2 = prm.lambda_inv ** 2 / prm.tau * np.einsum("tp,tp->t", w, dp ** 2)

    per = np.maximum(np.stack([s2, a2, c2, f2, p2], axis=1), 0.0)
    weights = bound_weights(constants, prm)
    indicator = per @ weights
    eta = np.sqrt(per.sum(axis=0))
    osc = {}
    if sources is not None:
        osc = data_oscillation(mesh, sources, degree)
    out = EstimatorBreakdown(*eta, per_element=per, bound=0.0, indicator=indicator,
                             constants=constants, params=prm, oscillation=osc)
    out.bound = total_bound(out, constants, prm)
    return out


def data_oscillation(mesh, sources, degree=8):
    """``||f - P1 f||`` and ``||g - P1 g||`` (reported, not part of the bound)."""
    if not sources.is_projected:
        sources = sources.project(mesh)
    rule = quadrature(degree)
    x = mesh.map_points(rule.points)
    w = _weights(mesh, rule)
    df = sources.f(x) - sources.projected_f.values(rule.points)
    dg = sources.g(x) - sources.projected_g.values(rule.points)
    return {"f": float(np.sqrt(np.sum(w[..., None] * df ** 2))),
            "g": float(np.sqrt(np.sum(w * dg ** 2)))}


# --------------------------------------------------------------------------
# errors against a reference

@dataclass
class ErrorFields:
    """Errors (reference minus discrete) at quadrature points of ``mesh``."""

    mesh: object
    weights: np.ndarray
    grad_u: np.ndarray
    p: np.ndarray
    phi: np.ndarray
    grad_phi: np.ndarray

    @property
    def eps_u(self):
        return 0.5 * (self.grad_u + np.swapaxes(self.grad_u, -1, -2))

    @property
    def div_u(self):
        return self.grad_u[..., 0, 0] + self.grad_u[..., 1, 1]

    def integral(self, values):
        return float(np.sum(self.weights * values))


def _sample_solution(solution, mesh, ref):
    """Discrete fields at quadrature points of ``mesh`` (same or nested finer)."""
    if mesh is solution.mesh:
        return {"grad_u": solution.u.gradient(ref), "p": solution.p.values(ref),
                "phi": solution.phi.values(ref), "grad_phi": solution.phi.gradient(ref)}
    anc = ancestors(mesh, solution.mesh)
    x = mesh.map_points(ref)
    nt, npt = x.shape[:2]
    el = np.repeat(anc, npt)
    coarse = solution.mesh
    x0 = coarse.vertices[coarse.triangles[el, 0]]
    binv = np.linalg.inv(coarse.jacobians())[el]
    cref = np.einsum("nij,nj->ni", binv, x.reshape(-1, 2) - x0)
    shape = (nt, npt)
    return {
        "grad_u": solution.u.gradient_at(el, cref).reshape(shape + (2, 2)),
        "p": solution.p.values_at(el, cref).reshape(shape),
        "phi": solution.phi.values_at(el, cref).reshape(shape),
        "grad_phi": solution.phi.gradient_at(el, cref).reshape(shape + (2,)),
    }


def error_fields(solution, reference, degree=8):
    """Reference-minus-discrete errors on the reference's integration mesh.

    ``reference`` provides ``mesh`` (``None`` to integrate on the solution
    mesh) and ``evaluate(mesh, ref_points)`` returning a dict with
    ``grad_u (nt, np, 2, 2)``, ``p``, ``phi`` and ``grad_phi``.
    """
    mesh = getattr(reference, "mesh", None) or solution.mesh
    rule = quadrature(degree)
    exact = reference.evaluate(mesh, rule.points)
    disc = _sample_solution(solution, mesh, rule.points)
    return ErrorFields(mesh, _weights(mesh, rule),
                       *(exact[k] - disc[k] for k in ("grad_u", "p", "phi", "grad_phi")))


def energy_norm_error(solution, reference, degree=8):
    """Energy-norm error and its squared parts ``(2 mu ||eps||^2,
    lambda_inv ||e_p - e_phi||^2, tau ||grad e_phi||^2)``."""
    prm = solution.params
    e = error_fields(solution, reference, degree)
    eu = 2 * prm.mu * e.integral(np.sum(e.eps_u ** 2, axis=(-1, -2)))
    ep = prm.lambda_inv * e.integral((e.p - e.phi) ** 2)
    ephi = prm.tau * e.integral(np.sum(e.grad_phi ** 2, axis=-1))
    return float(np.sqrt(eu + ep + ephi)), (eu, ep, ephi)


def verify_bounds(solution, breakdown, constants, reference, degree=8):
    """Both sides of the stress, flux and total inequalities plus effectivity."""
    prm = solution.params
    e = error_fields(solution, reference, degree)
    li = prm.lambda_inv
    eps2 = e.integral(np.sum(e.eps_u ** 2, axis=(-1, -2)))
    pp2 = e.integral((e.p - e.phi) ** 2)
    phidiv = e.integral(e.phi * e.div_u)
    g2 = e.integral(np.sum(e.grad_phi ** 2, axis=-1))
    cross = e.integral((e.phi - e.p) * e.phi)
    cd, ck, cf = constants.C_D, constants.C_K, constants.C_F
    eta = breakdown
    stress_lhs = prm.mu * eps2 + li * pp2 - 2 * phidiv
    stress_rhs = (eta.eta_S ** 2 + ck ** 2 / (4 * prm.mu) * eta.eta_A ** 2
                  + prm.mu * (cd * prm.trace_weight + 1 / cd) ** 2 * eta.eta_C ** 2)
    flux_lhs = 0.75 * prm.tau * g2 + 2 * li * cross
    flux_rhs = eta.eta_F ** 2 + 4 * cf ** 2 * eta.eta_P ** 2
    total_lhs = 2 * prm.mu * eps2 + li * pp2 + prm.tau * g2
    total_rhs = total_bound(eta, constants, prm)
    err = np.sqrt(max(total_lhs, 0.0))
    return {
        "stress": (stress_lhs, stress_rhs),
        "flux": (flux_lhs, flux_rhs),
        "total": (total_lhs, total_rhs),
        "error": float(err),
        "effectivity": float(np.sqrt(total_rhs) / err) if err > 0 else float("nan"),
    }

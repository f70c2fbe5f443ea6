"""Benchmark problems and reference solutions.

* :class:`ManufacturedCase` -- smooth solution on the unit square built from
  ``phi = x y (1 - x) (1 - y)`` with ``u = (phi, phi)`` and
  ``p = -lambda (phi_x + phi_y) + phi``.
* :class:`IncompressibleCase` -- divergence-free displacement for
  ``lambda_inv = 0``, where the system splits into Stokes-type elasticity and
  a Poisson problem.
* :class:`LShapedCase` -- constant sources on ``[-1, 1]^2 minus [0, 1]^2``.
* :class:`OverkillReference` -- cubic solve on a finer mesh standing in for
  the unknown exact solution.

References share one interface: an optional integration ``mesh`` and
``evaluate(mesh, ref_points)`` returning ``grad_u``, ``p``, ``phi`` and
``grad_phi`` at the mapped points.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .biot import BiotParameters, SourceData, solve_biot
from .estimate import _sample_solution
from .fem import quadrature
from .mesh import MeshError, lshape_mesh, refine_uniform, unit_square_mesh

__all__ = [
    "ManufacturedCase",
    "IncompressibleCase",
    "LShapedCase",
    "OverkillReference",
    "build_overkill",
    "manufactured_eval",
    "norm_identities_check",
    "taylor_hood_ready",
]


def taylor_hood_ready(mesh):
    """Raise unless no triangle has two boundary edges."""
    if mesh.has_two_boundary_edges().size:
        raise MeshError("a triangle has two boundary edges; refine the initial mesh "
                        "uniformly before solving with Taylor-Hood elements")
    return mesh


def _phi_parts(x):
    X, Y = x[..., 0], x[..., 1]
    a, b = X * (1 - X), Y * (1 - Y)
    ax, by = 1 - 2 * X, 1 - 2 * Y
    return {
        "phi": a * b,
        "phi_x": ax * b, "phi_y": a * by,
        "phi_xx": -2 * b, "phi_yy": -2 * a, "phi_xy": ax * by,
    }


class _ExactReference:
    mesh = None

    def evaluate(self, mesh, ref):
        x = mesh.map_points(ref)
        return {"grad_u": self.grad_u(x), "p": self.p(x), "phi": self.phi(x),
                "grad_phi": self.grad_phi(x)}

    def sources(self):
        return SourceData(self.f, self.g)

    @staticmethod
    def phi(x):
        return _phi_parts(x)["phi"]

    @staticmethod
    def grad_phi(x):
        d = _phi_parts(x)
        return np.stack([d["phi_x"], d["phi_y"]], axis=-1)


@dataclass
class ManufacturedCase(_ExactReference):
    mu: float = 1.0
    lam: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lam):
            raise ValueError("the manufactured pressure is unbounded as lambda -> inf; "
                             "use IncompressibleCase")

    @property
    def params(self):
        return BiotParameters.from_lambda(self.mu, self.lam, self.tau)

    def initial_mesh(self, refinements=1):
        return taylor_hood_ready(refine_uniform(unit_square_mesh(), refinements))

    def u(self, x):
        v = self.phi(x)
        return np.stack([v, v], axis=-1)

    def grad_u(self, x):
        g = self.grad_phi(x)
        return np.stack([g, g], axis=-2)

    def p(self, x):
        d = _phi_parts(x)
        return -self.lam * (d["phi_x"] + d["phi_y"]) + d["phi"]

    def f(self, x):
        d = _phi_parts(x)
        mu, lam = self.mu, self.lam
        f1 = d["phi_x"] - (2 * mu + lam) * d["phi_xx"] - mu * d["phi_yy"] - (mu + lam) * d["phi_xy"]
        f2 = d["phi_y"] - (2 * mu + lam) * d["phi_yy"] - mu * d["phi_xx"] - (mu + lam) * d["phi_xy"]
        return np.stack([f1, f2], axis=-1)

    def g(self, x):
        d = _phi_parts(x)
        return d["phi_x"] + d["phi_y"] - self.tau * (d["phi_xx"] + d["phi_yy"])


@dataclass
class IncompressibleCase(_ExactReference):
    """``lambda_inv = 0``: ``u = curl psi`` with ``psi = (x(1-x) y(1-y))^2``,
    ``p = (x - 1/2)(y - 1/2)`` (zero mean) and the same ``phi``."""

    mu: float = 1.0
    tau: float = 1.0

    @property
    def params(self):
        return BiotParameters(mu=self.mu, lambda_inv=0.0, tau=self.tau)

    def initial_mesh(self, refinements=1):
        return taylor_hood_ready(refine_uniform(unit_square_mesh(), refinements))

    @staticmethod
    def _ab(x):
        X, Y = x[..., 0], x[..., 1]
        return X * (1 - X), 1 - 2 * X, Y * (1 - Y), 1 - 2 * Y

    def u(self, x):
        a, ax, b, by = self._ab(x)
        return np.stack([2 * a * a * b * by, -2 * a * ax * b * b], axis=-1)

    def grad_u(self, x):
        a, ax, b, by = self._ab(x)
        g11 = 4 * a * ax * b * by
        g12 = 2 * a * a * (by * by - 2 * b)
        g21 = -2 * (ax * ax - 2 * a) * b * b
        return np.stack([np.stack([g11, g12], -1), np.stack([g21, -g11], -1)], axis=-2)

    def p(self, x):
        return (x[..., 0] - 0.5) * (x[..., 1] - 0.5)

    def f(self, x):
        a, ax, b, by = self._ab(x)
        lap1 = 4 * (ax * ax - 2 * a) * b * by - 12 * a * a * by
        lap2 = 12 * ax * b * b - 4 * a * ax * (by * by - 2 * b)
        return np.stack([-self.mu * lap1 + x[..., 1] - 0.5,
                         -self.mu * lap2 + x[..., 0] - 0.5], axis=-1)

    def g(self, x):
        d = _phi_parts(x)
        return -self.tau * (d["phi_xx"] + d["phi_yy"])


@dataclass
class LShapedCase:
    mu: float = 1.0
    lam: float = 1.0
    tau: float = 1.0

    @property
    def params(self):
        return BiotParameters.from_lambda(self.mu, self.lam, self.tau)

    def initial_mesh(self, refinements=2):
        return taylor_hood_ready(refine_uniform(lshape_mesh(), refinements))

    def sources(self):
        return SourceData.constant([1.0, 1.0], 1.0)


def manufactured_eval(point, quantity, case=None):
    """Closed-form value of a manufactured quantity at one point of [0, 1]^2.

    ``quantity`` is one of ``phi, phi_x, phi_y, phi_xx, phi_yy, phi_xy, u,
    grad_u, p, f, g``.
    """
    x = np.asarray(point, dtype=float)
    if x.shape != (2,) or np.any(x < 0) or np.any(x > 1):
        raise ValueError(f"point {point} is outside the unit square")
    case = case or ManufacturedCase()
    parts = _phi_parts(x)
    if quantity in parts:
        return float(parts[quantity])
    fn = getattr(case, quantity, None)
    if quantity not in ("u", "grad_u", "p", "f", "g") or fn is None:
        raise ValueError(f"unknown quantity {quantity!r}")
    v = fn(x)
    return float(v) if np.ndim(v) == 0 else np.asarray(v)


def norm_identities_check(degree=8, mesh=None):
    """||phi||, ||grad phi||^2 / ||phi||^2 and ||eps(u)||^2 / ||grad phi||^2
    by quadrature on a mesh of the unit square."""
    if degree < 8:
        raise ValueError("degree must be at least 8 to integrate the identities exactly")
    mesh = mesh or unit_square_mesh()
    case = ManufacturedCase()
    rule = quadrature(degree)
    x = mesh.map_points(rule.points)
    w = 2.0 * mesh.areas[:, None] * rule.weights[None, :]
    phi2 = np.sum(w * case.phi(x) ** 2)
    grad2 = np.sum(w * np.sum(case.grad_phi(x) ** 2, axis=-1))
    gu = case.grad_u(x)
    eps = 0.5 * (gu + np.swapaxes(gu, -1, -2))
    eps2 = np.sum(w * np.sum(eps ** 2, axis=(-1, -2)))
    return {"phi_norm": float(np.sqrt(phi2)), "grad_ratio": float(grad2 / phi2),
            "eps_ratio": float(eps2 / grad2), "grad_phi_sq": float(grad2)}


class OverkillReference:
    """Cubic (P3 / P2 / P3) solution on a uniformly refined copy of a mesh.

    Sources are integrated without projection.
    """

    def __init__(self, solution, base_mesh, base_dofs):
        self.solution = solution
        self.mesh = solution.mesh
        self.base_mesh = base_mesh
        self.num_dofs = solution.num_dofs
        self.dof_ratio = self.num_dofs / base_dofs

    def evaluate(self, mesh, ref):
        return _sample_solution(self.solution, mesh, ref)


def build_overkill(case, base_mesh, refinements=1):
    """Overkill reference for ``case`` on ``base_mesh`` refined uniformly."""
    fine = refine_uniform(base_mesh, refinements)
    sol = solve_biot(fine, case.params, case.sources(), degree=3, project_sources=False)
    nu = base_mesh.num_vertices + base_mesh.num_edges
    nb = int(base_mesh.boundary_vertex_flags.sum() + base_mesh.boundary_edges.sum())
    base_dofs = 3 * (nu - nb) + base_mesh.num_vertices
    ref = OverkillReference(sol, base_mesh, base_dofs)
    if ref.dof_ratio <= 4:
        raise RuntimeError(f"overkill has only {ref.dof_ratio:.2f}x the base dofs")
    return ref

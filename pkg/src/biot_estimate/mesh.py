"""Conforming triangle meshes with edge topology, vertex patches and
newest-vertex bisection.

Triangles are stored counter-clockwise with the *newest vertex first*: the
refinement edge of triangle ``(z0, z1, z2)`` is ``(z1, z2)``.  Local edge ``i``
is the edge opposite local vertex ``i``, so the refinement edge is always
local edge 0.

Every edge is stored as ``(lo, hi)`` with ``lo < hi``.  Its unit normal is the
counter-clockwise rotation of ``x_hi - x_lo``; ``T-`` is the triangle the
normal points away from and ``T+`` the triangle it points into.

Examples
--------
>>> m = unit_square_mesh()
>>> m.num_triangles, m.num_edges
(2, 5)
>>> fine = refine(m, np.arange(m.num_triangles))
>>> fine.num_triangles
8
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "MeshError",
    "TriangleMesh",
    "VertexPatch",
    "build_mesh",
    "vertex_patches",
    "refine",
    "refine_uniform",
    "ancestors",
    "unit_square_mesh",
    "lshape_mesh",
    "read_mesh",
    "write_mesh",
]


class MeshError(ValueError):
    """Invalid mesh input; the message names the offending entity."""


def _signed_areas(vertices, triangles):
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


class TriangleMesh:
    """Immutable conforming triangulation of a polygonal domain.

    Use :func:`build_mesh` to create one from raw arrays; the constructor
    trusts its input (orientation and labelling) and only derives topology.
    """

    def __init__(self, vertices, triangles, domain_tag="", parent=None,
                 previous=None, generation=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.domain_tag = domain_tag
        nt = len(self.triangles)
        self.parent = None if parent is None else np.asarray(parent, np.int64)
        self.previous = previous
        self.generation = (np.zeros(nt, np.int64) if generation is None
                           else np.asarray(generation, np.int64))
        self.vertices.flags.writeable = False
        self.triangles.flags.writeable = False
        self._build_topology()

    def _build_topology(self):
        t = self.triangles
        nt = len(t)
        # local edge i is opposite local vertex i
        a = t[:, [1, 2, 0]].ravel()
        b = t[:, [2, 0, 1]].ravel()
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        key = lo * (len(self.vertices) + 1) + hi
        uniq, first, inverse, counts = np.unique(
            key, return_index=True, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            bad = int(np.flatnonzero(counts > 2)[0])
            raise MeshError(f"edge ({lo[first[bad]]}, {hi[first[bad]]}) is "
                            "shared by more than two triangles")
        self.edges = np.stack([lo[first], hi[first]], axis=1)
        self.tri_edges = inverse.reshape(nt, 3)
        ne = len(self.edges)

        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        self.edge_lengths = np.hypot(d[:, 0], d[:, 1])
        self.edge_normals = np.stack([-d[:, 1], d[:, 0]], axis=1) / self.edge_lengths[:, None]

        # a counter-clockwise triangle traversing lo->hi lies on the normal side
        forward = (a < b).reshape(nt, 3)
        self.tri_edge_forward = forward
        edge_tris = -np.ones((ne, 2), dtype=np.int64)
        tri_ids = np.repeat(np.arange(nt), 3)
        slot = np.where(forward.ravel(), 1, 0)
        flat_edges = self.tri_edges.ravel()
        occupied = np.zeros((ne, 2), dtype=np.int64)
        np.add.at(occupied, (flat_edges, slot), 1)
        if np.any(occupied > 1):
            bad = int(np.flatnonzero((occupied > 1).any(axis=1))[0])
            raise MeshError(f"edge {bad} ({self.edges[bad, 0]}, {self.edges[bad, 1]}) "
                            "is traversed twice in the same direction; "
                            "inconsistent orientation or duplicate triangle")
        edge_tris[flat_edges, slot] = tri_ids
        self.edge_tris = edge_tris
        self.boundary_edges = (edge_tris < 0).any(axis=1)
        self.boundary_vertex_flags = np.zeros(len(self.vertices), dtype=bool)
        self.boundary_vertex_flags[self.edges[self.boundary_edges].ravel()] = True

        self.areas = _signed_areas(self.vertices, t)
        el = self.edge_lengths[self.tri_edges]
        self.diameters = el.max(axis=1)
        self.refinement_edge = np.zeros(nt, dtype=np.int64)

        # vertex -> triangles in CSR form, triangle ids ascending
        flat = t.ravel()
        order = np.argsort(flat, kind="stable")
        self._v2t_index = np.searchsorted(flat[order], np.arange(len(self.vertices) + 1))
        self._v2t = order // 3

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def interior_edges(self):
        return np.flatnonzero(~self.boundary_edges)

    @property
    def h(self):
        """Largest element diameter."""
        return float(self.diameters.max())

    def vertex_triangles(self, z):
        """Sorted ids of the triangles containing vertex ``z``."""
        return self._v2t[self._v2t_index[z]:self._v2t_index[z + 1]]

    def euler_characteristic(self):
        return self.num_vertices - self.num_edges + self.num_triangles

    def jacobians(self):
        """Affine map matrices ``B`` with columns ``x1 - x0`` and ``x2 - x0``."""
        v = self.vertices[self.triangles]
        return np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)

    def map_points(self, ref_points):
        """Physical images ``(nt, np, 2)`` of reference points ``(np, 2)``."""
        v = self.vertices[self.triangles]
        ref = np.asarray(ref_points, dtype=float)
        return (v[:, None, 0, :]
                + ref[None, :, 0, None] * (v[:, None, 1, :] - v[:, None, 0, :])
                + ref[None, :, 1, None] * (v[:, None, 2, :] - v[:, None, 0, :]))

    def min_angle(self):
        """Smallest interior angle over all triangles, in degrees."""
        v = self.vertices[self.triangles]
        angles = []
        for i in range(3):
            p = v[:, (i + 1) % 3] - v[:, i]
            q = v[:, (i + 2) % 3] - v[:, i]
            c = (p * q).sum(axis=1) / (np.linalg.norm(p, axis=1) * np.linalg.norm(q, axis=1))
            angles.append(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
        return float(np.min(angles))

    def has_two_boundary_edges(self):
        """Ids of triangles with at least two boundary edges."""
        return np.flatnonzero(self.boundary_edges[self.tri_edges].sum(axis=1) >= 2)

    def __repr__(self):
        return (f"<TriangleMesh {self.domain_tag!r}: {self.num_vertices} vertices, "
                f"{self.num_triangles} triangles>")


@dataclass(frozen=True)
class VertexPatch:
    """The star ``omega_z`` of all triangles sharing vertex ``center``."""

    mesh: TriangleMesh
    center: int
    elements: np.ndarray
    interior_edges: np.ndarray
    outer_edges: np.ndarray
    is_boundary_vertex: bool

    @property
    def vertices(self):
        """All mesh vertices of the patch, ascending."""
        return np.unique(self.mesh.triangles[self.elements])

    def hat(self, points):
        """Evaluate the piecewise linear hat function of ``center``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(len(pts))
        done = np.zeros(len(pts), dtype=bool)
        m = self.mesh
        for t in self.elements:
            tri = m.triangles[t]
            lam = barycentric(m.vertices[tri], pts)
            inside = ~done & (lam.min(axis=1) >= -1e-12)
            k = int(np.flatnonzero(tri == self.center)[0])
            out[inside] = lam[inside, k]
            done |= inside
        return out


def barycentric(corners, points):
    """Barycentric coordinates ``(np, 3)`` of points in one triangle."""
    a, b, c = corners
    mat = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
    rhs = (np.asarray(points) - a).T
    l12 = np.linalg.solve(mat, rhs).T
    return np.column_stack([1.0 - l12.sum(axis=1), l12])


def build_mesh(raw_vertices, raw_triangles, domain_tag="", relabel=True):
    """Validate raw arrays and derive the full topology.

    Clockwise triangles are reoriented with a warning.  With ``relabel`` the
    vertices of each triangle are rotated so that the longest edge becomes the
    refinement edge (ties: smallest opposite vertex index); otherwise the
    first vertex of every triangle is taken as its newest vertex.

    Raises
    ------
    MeshError
        For out-of-range indices, degenerate or duplicate triangles, edges
        with more than two neighbours and hanging vertices.
    """
    vertices = np.asarray(raw_vertices, dtype=float)
    tris = np.array(raw_triangles, dtype=np.int64, copy=True)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must be an (n, 2) array")
    if tris.ndim != 2 or tris.shape[1] != 3 or len(tris) == 0:
        raise MeshError("triangles must be a non-empty (m, 3) array")
    bad = np.flatnonzero((tris < 0).any(axis=1) | (tris >= len(vertices)).any(axis=1))
    if bad.size:
        raise MeshError(f"triangle {bad[0]} references a missing vertex")
    degenerate = np.flatnonzero((tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2])
                                | (tris[:, 0] == tris[:, 2]))
    if degenerate.size:
        raise MeshError(f"triangle {degenerate[0]} repeats a vertex")
    srt = np.sort(tris, axis=1)
    _, first, counts = np.unique(srt, axis=0, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = first[counts > 1][0]
        raise MeshError(f"triangle {dup} is duplicated")

    area = _signed_areas(vertices, tris)
    if np.any(area == 0.0):
        raise MeshError(f"triangle {np.flatnonzero(area == 0.0)[0]} has zero area")
    flipped = np.flatnonzero(area < 0)
    if flipped.size:
        log.warning("reoriented %d clockwise triangles (first: %d)", flipped.size, flipped[0])
        tris[flipped] = tris[flipped][:, [0, 2, 1]]

    if relabel:
        tris = _longest_edge_first(vertices, tris)

    mesh = TriangleMesh(vertices, tris, domain_tag=domain_tag)
    _check_conformity(mesh)
    return mesh


def _longest_edge_first(vertices, tris):
    v = vertices[tris]
    # squared length of the edge opposite local vertex i
    sq = np.stack([((v[:, (i + 2) % 3] - v[:, (i + 1) % 3]) ** 2).sum(axis=1)
                   for i in range(3)], axis=1)
    longest = sq.max(axis=1, keepdims=True)
    cand = np.isclose(sq, longest, rtol=1e-12, atol=0.0)
    # tie-break by smallest opposite vertex index
    key = np.where(cand, tris, np.iinfo(np.int64).max)
    peak = key.argmin(axis=1)
    idx = (peak[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(tris, idx, axis=1)


def _check_conformity(mesh):
    """Reject vertices lying in the interior of a boundary edge."""
    bnd = np.flatnonzero(mesh.boundary_edges)
    verts = mesh.vertices
    for start in range(0, len(bnd), 256):
        e = bnd[start:start + 256]
        a = verts[mesh.edges[e, 0]]
        b = verts[mesh.edges[e, 1]]
        d = b - a
        rel = verts[None, :, :] - a[:, None, :]
        cross = d[:, None, 0] * rel[:, :, 1] - d[:, None, 1] * rel[:, :, 0]
        s = (rel * d[:, None, :]).sum(axis=2) / (d * d).sum(axis=1)[:, None]
        tol = 1e-12 * mesh.edge_lengths[e][:, None] ** 2
        hit = (np.abs(cross) <= tol) & (s > 1e-12) & (s < 1 - 1e-12)
        if hit.any():
            i, j = np.argwhere(hit)[0]
            raise MeshError(f"hanging vertex {j} on edge {e[i]}")


def vertex_patches(mesh):
    """One :class:`VertexPatch` per vertex, in vertex order."""
    edges_at = [[] for _ in range(mesh.num_vertices)]
    for e, (a, b) in enumerate(mesh.edges):
        edges_at[a].append(e)
        edges_at[b].append(e)
    patches = []
    for z in range(mesh.num_vertices):
        elems = mesh.vertex_triangles(z)
        at_z = np.array(sorted(edges_at[z]), dtype=np.int64)
        interior = at_z[~mesh.boundary_edges[at_z]]
        local = mesh.triangles[elems]
        k = np.argmax(local == z, axis=1)
        outer = np.sort(mesh.tri_edges[elems, k])
        patches.append(VertexPatch(mesh, z, elems, interior, outer,
                                   bool(mesh.boundary_vertex_flags[z])))
    return patches


def refine(mesh, marked_elements):
    """Newest-vertex bisection of the marked triangles plus closure.

    All three edges of a marked triangle are bisected (it splits into four);
    the closure then bisects refinement edges until no hanging vertex is left.

    Returns a new mesh whose ``parent`` array maps each child to its parent
    triangle in ``mesh``; existing vertices keep their index and coordinates.
    An empty mark set returns ``mesh`` itself.
    """
    marked = np.unique(np.asarray(marked_elements, dtype=np.int64))
    if marked.size == 0:
        return mesh
    te = mesh.tri_edges
    edge_marked = np.zeros(mesh.num_edges, dtype=bool)
    edge_marked[te[marked].ravel()] = True
    while True:
        need = edge_marked[te].any(axis=1) & ~edge_marked[te[:, 0]]
        if not need.any():
            break
        edge_marked[te[need, 0]] = True

    new_edges = np.flatnonzero(edge_marked)
    nv = mesh.num_vertices
    mid = -np.ones(mesh.num_edges, dtype=np.int64)
    mid[new_edges] = nv + np.arange(len(new_edges))
    ends = mesh.edges[new_edges]
    new_verts = 0.5 * (mesh.vertices[ends[:, 0]] + mesh.vertices[ends[:, 1]])
    vertices = np.vstack([mesh.vertices, new_verts])

    t = mesh.triangles
    z0, z1, z2 = t[:, 0], t[:, 1], t[:, 2]
    m = mid[te[:, 0]]
    m1 = mid[te[:, 2]]  # on (z0, z1)
    m2 = mid[te[:, 1]]  # on (z2, z0)
    r = edge_marked[te[:, 0]]
    a = edge_marked[te[:, 2]]
    b = edge_marked[te[:, 1]]

    nt = len(t)
    kids = np.zeros((nt, 4, 3), dtype=np.int64)
    depth = np.zeros((nt, 4), dtype=np.int64)
    keep = np.zeros((nt, 4), dtype=bool)

    plain = ~r
    kids[plain, 0] = t[plain]
    keep[plain, 0] = True

    # first child (m, z0, z1), possibly split at m1
    c1 = r & ~a
    kids[c1, 0] = np.stack([m, z0, z1], axis=1)[c1]
    depth[c1, 0] = 1
    keep[c1, 0] = True
    c1s = r & a
    kids[c1s, 0] = np.stack([m1, m, z0], axis=1)[c1s]
    kids[c1s, 1] = np.stack([m1, z1, m], axis=1)[c1s]
    depth[c1s, :2] = 2
    keep[c1s, :2] = True

    # second child (m, z2, z0), possibly split at m2
    c2 = r & ~b
    kids[c2, 2] = np.stack([m, z2, z0], axis=1)[c2]
    depth[c2, 2] = 1
    keep[c2, 2] = True
    c2s = r & b
    kids[c2s, 2] = np.stack([m2, m, z2], axis=1)[c2s]
    kids[c2s, 3] = np.stack([m2, z0, m], axis=1)[c2s]
    depth[c2s, 2:] = 2
    keep[c2s, 2:] = True

    parent = np.repeat(np.arange(nt), 4).reshape(nt, 4)[keep]
    generation = (mesh.generation[:, None] + depth)[keep]
    return TriangleMesh(vertices, kids[keep], domain_tag=mesh.domain_tag,
                        parent=parent, previous=mesh, generation=generation)


def refine_uniform(mesh, times=1):
    for _ in range(times):
        mesh = refine(mesh, np.arange(mesh.num_triangles))
    return mesh


def ancestors(fine, coarse):
    """Index in ``coarse`` of the ancestor of every triangle of ``fine``."""
    idx = np.arange(fine.num_triangles)
    m = fine
    while m is not coarse:
        if m.previous is None:
            raise MeshError("meshes are not related by refinement")
        idx = m.parent[idx]
        m = m.previous
    return idx


def unit_square_mesh():
    """``[0, 1]^2`` split by the diagonal from (0, 0) to (1, 1)."""
    verts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
    return build_mesh(verts, [[0, 1, 2], [0, 2, 3]], domain_tag="square")


def lshape_mesh():
    """``[-1, 1]^2 \\ [0, 1]^2`` as six right triangles fanned around the origin."""
    verts = [[0.0, 0.0], [-1.0, 0.0], [-1.0, 1.0], [0.0, 1.0],
             [-1.0, -1.0], [0.0, -1.0], [1.0, -1.0], [1.0, 0.0]]
    tris = [[0, 2, 1], [0, 3, 2], [0, 1, 4], [0, 4, 5], [0, 5, 6], [0, 6, 7]]
    return build_mesh(verts, tris, domain_tag="lshape")


def write_mesh(mesh, path):
    """Plain-text format: ``VERTICES n`` / ``x y`` lines / ``TRIANGLES m`` / ``i j k``."""
    lines = [f"VERTICES {mesh.num_vertices}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(f"TRIANGLES {mesh.num_triangles}")
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path, domain_tag="", relabel=False):
    """Read the plain-text format written by :func:`write_mesh`.

    The first vertex of each triangle is kept as its newest vertex unless
    ``relabel`` is set, so a written mesh reads back with the same
    bisection state.
    """
    tokens = Path(path).read_text().split()
    try:
        if tokens[0] != "VERTICES":
            raise MeshError("expected 'VERTICES n' header")
        nv = int(tokens[1])
        pos = 2
        verts = np.array(tokens[pos:pos + 2 * nv], dtype=float).reshape(nv, 2)
        pos += 2 * nv
        if tokens[pos] != "TRIANGLES":
            raise MeshError("expected 'TRIANGLES m' header")
        nt = int(tokens[pos + 1])
        pos += 2
        tris = np.array(tokens[pos:pos + 3 * nt], dtype=np.int64).reshape(nt, 3)
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    return build_mesh(verts, tris, domain_tag=domain_tag, relabel=relabel)

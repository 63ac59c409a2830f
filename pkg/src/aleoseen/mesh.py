"""
Disk triangulations, their images under the flow map, and Taylor-Hood
(P2 velocity / P1 pressure) numbering.

Elements are straight-sided.  The local node order in a triangle is
``(v0, v1, v2, m01, m12, m20)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .flowmap import VelocityField, advance_flowmap

MAX_NODES = 400_000


class MeshResourceError(RuntimeError):
    pass


class InvertedElementError(RuntimeError):
    pass


# --- quadrature ---------------------------------------------------------------

def _radon7():
    s = math.sqrt(15.0)
    a1, b1 = (6 - s) / 21, (9 + 2 * s) / 21
    a2, b2 = (6 + s) / 21, (9 - 2 * s) / 21
    w1, w2 = (155 - s) / 1200, (155 + s) / 1200
    bary = np.array([
        [1 / 3, 1 / 3, 1 / 3],
        [b1, a1, a1], [a1, b1, a1], [a1, a1, b1],
        [b2, a2, a2], [a2, b2, a2], [a2, a2, b2],
    ])
    weights = np.array([9 / 40, w1, w1, w1, w2, w2, w2])
    return bary, weights


# barycentric points and weights summing to one (multiply by the area)
QUAD_BARY, QUAD_WEIGHTS = _radon7()


def p2_basis(lam):
    """P2 basis values for barycentric coordinates ``lam`` (..., 3) -> (..., 6)."""
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    return np.stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ], axis=-1)


def p2_basis_dlam(lam):
    """d(basis_a)/d(lam_i), shape (..., 6, 3)."""
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    z = np.zeros_like(l0)
    rows = [
        [4 * l0 - 1, z, z],
        [z, 4 * l1 - 1, z],
        [z, z, 4 * l2 - 1],
        [4 * l1, 4 * l0, z],
        [z, 4 * l2, 4 * l1],
        [4 * l2, z, 4 * l0],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


# --- meshes -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Mesh:
    """Reference triangulation of Omega_0."""

    vertices: np.ndarray      # (Nv, 2)
    triangles: np.ndarray     # (Nt, 3), counter-clockwise
    edges: np.ndarray         # (Ne, 2), sorted vertex pairs
    tri_edges: np.ndarray     # (Nt, 3): edges (v0v1, v1v2, v2v0)
    boundary_vertex: np.ndarray
    boundary_edge: np.ndarray
    radius: float = 1.0

    @property
    def base(self):
        return self

    @property
    def t(self):
        return 0.0

    @cached_property
    def midpoints(self):
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    @cached_property
    def h(self) -> float:
        d = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        return float(np.sqrt((d * d).sum(axis=1)).max())

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def n_nodes(self):
        return self.n_vertices + self.n_edges

    @cached_property
    def element_nodes(self):
        """Global P2 node indices per element, (Nt, 6)."""
        return np.hstack([self.triangles, self.n_vertices + self.tri_edges])


def _edge_structure(tris):
    local = np.array([[0, 1], [1, 2], [2, 0]])
    all_edges = np.sort(tris[:, local].reshape(-1, 2), axis=1)
    edges, inverse, counts = np.unique(all_edges, axis=0, return_inverse=True, return_counts=True)
    tri_edges = inverse.reshape(-1, 3)
    boundary_edge = counts == 1
    return edges, tri_edges, boundary_edge


def signed_areas(vertices, triangles):
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def mesh_from_triangles(vertices, triangles, radius: float = 1.0) -> Mesh:
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64).copy()
    area = signed_areas(vertices, triangles)
    flip = area < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    edges, tri_edges, boundary_edge = _edge_structure(triangles)
    boundary_vertex = np.zeros(len(vertices), dtype=bool)
    boundary_vertex[edges[boundary_edge].ravel()] = True
    return Mesh(vertices, triangles, edges, tri_edges, boundary_vertex, boundary_edge, radius)


def _disk_points(spacing):
    n_rings = max(1, int(math.ceil(1.0 / spacing)))
    pts = [np.zeros((1, 2))]
    for k in range(1, n_rings + 1):
        r = k / n_rings
        n = max(6, int(math.ceil(2 * math.pi * r / spacing)))
        offset = 0.5 * (k % 2) * 2 * math.pi / n
        theta = offset + 2 * math.pi * np.arange(n) / n
        pts.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
    pts = np.vstack(pts)
    pts[-n:] /= np.linalg.norm(pts[-n:], axis=1)[:, None]
    return pts


def build_disk_mesh(h_target: float, radius: float = 1.0) -> Mesh:
    """Quasi-uniform triangulation of the disk with maximal edge length <= h_target.

    Nodes lie on concentric rings; the outermost ring sits on the circle, so
    the mesh is the inscribed polygon.  Raises MeshResourceError if the node
    count would exceed ``MAX_NODES``.
    """
    if not 0 < h_target < 1:
        raise ValueError(f"h_target must lie in (0, 1), got {h_target}")
    est_vertices = 2.5 * math.pi / h_target**2
    if 4 * est_vertices > MAX_NODES:
        raise MeshResourceError(
            f"h_target={h_target} needs about {int(4 * est_vertices)} nodes (cap {MAX_NODES})")
    spacing = h_target
    for _ in range(40):
        pts = _disk_points(spacing)
        tri = Delaunay(pts)
        simplices = tri.simplices
        area = np.abs(signed_areas(pts, simplices))
        simplices = simplices[area > 1e-14 * spacing**2]
        mesh = mesh_from_triangles(pts * radius, simplices, radius)
        if mesh.h <= h_target * radius:
            return mesh
        spacing *= 0.95
    raise MeshResourceError("could not reach the requested mesh size")


@dataclass(frozen=True, eq=False)
class MovedMesh:
    """Image of a reference mesh under Phi_t.

    Element geometry is affine from the moved vertices.  ``midpoints`` are the
    flow-map images of the reference edge midpoints; the P2 interpolation
    nodes are the straight-edge midpoints (``node_coords``).
    """

    base: Mesh
    t: float
    vertices: np.ndarray
    midpoints_advected: np.ndarray
    vertex_jac: np.ndarray
    midpoint_jac: np.ndarray

    @property
    def triangles(self):
        return self.base.triangles

    @property
    def edges(self):
        return self.base.edges

    @property
    def tri_edges(self):
        return self.base.tri_edges

    @property
    def boundary_vertex(self):
        return self.base.boundary_vertex

    @property
    def boundary_edge(self):
        return self.base.boundary_edge

    @property
    def n_vertices(self):
        return self.base.n_vertices

    @property
    def n_edges(self):
        return self.base.n_edges

    @property
    def n_nodes(self):
        return self.base.n_nodes

    @property
    def element_nodes(self):
        return self.base.element_nodes

    @cached_property
    def midpoints(self):
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    @cached_property
    def h(self) -> float:
        d = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        return float(np.sqrt((d * d).sum(axis=1)).max())

    @property
    def jacobians(self):
        """Per-node DPhi_t, vertices first then edge midpoints."""
        return np.concatenate([self.vertex_jac, self.midpoint_jac])


def at_rest(mesh: Mesh) -> MovedMesh:
    eye = np.broadcast_to(np.eye(2), (mesh.n_vertices, 2, 2)).copy()
    eye_m = np.broadcast_to(np.eye(2), (mesh.n_edges, 2, 2)).copy()
    return MovedMesh(mesh, 0.0, mesh.vertices.copy(), mesh.midpoints.copy(), eye, eye_m)


def as_moved(mesh) -> MovedMesh:
    return mesh if isinstance(mesh, MovedMesh) else at_rest(mesh)


def node_coords(mesh) -> np.ndarray:
    """P2 node coordinates: vertices then straight-edge midpoints."""
    return np.vstack([mesh.vertices, mesh.midpoints])


def _check_orientation(mesh, vertices, t):
    area = signed_areas(vertices, mesh.triangles)
    if np.any(area <= 0):
        bad = int(np.argmin(area))
        raise InvertedElementError(f"triangle {bad} inverted at t={t:.6g} (area {area[bad]:.3g})")


def move_mesh(mesh: Mesh, field: VelocityField, t: float, substeps: int,
              start: MovedMesh | None = None) -> MovedMesh:
    """Advect the vertices and edge midpoints of ``mesh`` to time ``t``.

    When ``start`` is given the flow map is continued from that moved mesh
    instead of being integrated from time 0.
    """
    ref = np.vstack([mesh.vertices, mesh.midpoints])
    if start is None:
        sample = advance_flowmap(field, ref, t, substeps)
    else:
        if start.base is not mesh:
            raise ValueError("start mesh does not derive from this reference mesh")
        pos = np.vstack([start.vertices, start.midpoints_advected])
        sample = advance_flowmap(field, pos, t, substeps, t0=start.t, jac0=start.jacobians)
    nv = mesh.n_vertices
    _check_orientation(mesh, sample.phi[:nv], t)
    return MovedMesh(mesh, float(t), sample.phi[:nv], sample.phi[nv:],
                     sample.jac[:nv], sample.jac[nv:])


def total_area(mesh) -> float:
    return float(signed_areas(mesh.vertices, mesh.triangles).sum())


# --- geometry per element ------------------------------------------------------

@dataclass(frozen=True)
class Geometry:
    area: np.ndarray        # (Nt,)
    grad_lam: np.ndarray    # (Nt, 3, 2)
    qpoints: np.ndarray     # (Nt, Q, 2)


def geometry(mesh) -> Geometry:
    v = mesh.vertices[mesh.triangles]            # (Nt, 3, 2)
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    # rows of inv([e1 e2]) are grad(lam1), grad(lam2)
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    g0 = -g1 - g2
    grad_lam = np.stack([g0, g1, g2], axis=1)
    qpoints = np.einsum("qk,tkd->tqd", QUAD_BARY, v)
    return Geometry(0.5 * det, grad_lam, qpoints)


# --- dof maps -----------------------------------------------------------------

@dataclass(frozen=True)
class DofMaps:
    """Taylor-Hood numbering.

    Velocity dof of component ``c`` at P2 node ``n`` is ``c * n_nodes + n``;
    pressure dofs are the vertex indices.
    """

    n_nodes: int
    n_velocity: int
    n_pressure: int
    element_velocity: np.ndarray   # (Nt, 12): component-0 nodes then component-1
    element_pressure: np.ndarray   # (Nt, 3)
    boundary_velocity: np.ndarray  # sorted dof indices
    boundary_nodes: np.ndarray


def taylor_hood(mesh) -> DofMaps:
    base = mesh.base
    nn = base.n_nodes
    en = base.element_nodes
    boundary_nodes = np.concatenate([
        np.flatnonzero(base.boundary_vertex),
        base.n_vertices + np.flatnonzero(base.boundary_edge),
    ])
    boundary_nodes.sort()
    return DofMaps(
        n_nodes=nn,
        n_velocity=2 * nn,
        n_pressure=base.n_vertices,
        element_velocity=np.hstack([en, en + nn]),
        element_pressure=base.triangles.copy(),
        boundary_velocity=np.concatenate([boundary_nodes, boundary_nodes + nn]),
        boundary_nodes=boundary_nodes,
    )


# --- point location -----------------------------------------------------------

def barycentric(mesh, tri_idx, points):
    v = mesh.vertices[mesh.triangles[tri_idx]]
    e1 = v[..., 1, :] - v[..., 0, :]
    e2 = v[..., 2, :] - v[..., 0, :]
    d = points - v[..., 0, :]
    det = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
    l1 = (d[..., 0] * e2[..., 1] - d[..., 1] * e2[..., 0]) / det
    l2 = (e1[..., 0] * d[..., 1] - e1[..., 1] * d[..., 0]) / det
    return np.stack([1 - l1 - l2, l1, l2], axis=-1)


def locate(mesh, points, k: int = 12):
    """Triangle containing each point and its barycentric coordinates.

    Points slightly outside the mesh (curved-boundary gaps) are assigned to
    the nearest candidate triangle; their barycentric coordinates then
    extrapolate.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    tree = cKDTree(centroids)
    k = min(k, len(centroids))
    _, cand = tree.query(points, k=k)
    cand = cand.reshape(len(points), k)
    lam = barycentric(mesh, cand, points[:, None, :])
    score = lam.min(axis=-1)
    best = np.argmax(score, axis=1)
    rows = np.arange(len(points))
    tri = cand[rows, best]
    lam_best = lam[rows, best]
    miss = score[rows, best] < -1e-10
    if np.any(miss):
        all_tris = np.arange(len(mesh.triangles))
        for i in np.flatnonzero(miss):
            lam_all = barycentric(mesh, all_tris, points[i][None, :])
            j = int(np.argmax(lam_all.min(axis=-1)))
            tri[i] = j
            lam_best[i] = lam_all[j]
    return tri, lam_best

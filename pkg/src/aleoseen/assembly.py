"""
Taylor-Hood assembly on a (moved) triangulation.

All bilinear forms use the 7-point degree-5 rule on straight triangles.  Matrix
row/column ordering follows :func:`aleoseen.mesh.taylor_hood`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .mesh import (QUAD_BARY, QUAD_WEIGHTS, as_moved, geometry, locate,
                   node_coords, p2_basis, p2_basis_dlam, taylor_hood)

_PHI = p2_basis(QUAD_BARY)           # (Q, 6)
_DPHI_DLAM = p2_basis_dlam(QUAD_BARY)  # (Q, 6, 3)


class MeshMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FEFunction:
    """Dof vector on a mesh, tagged with its space and time."""

    values: np.ndarray
    space: str
    t: float
    mesh: object

    def __post_init__(self):
        if self.space not in ("velocity", "pressure"):
            raise ValueError(f"unknown space {self.space!r}")
        expected = 2 * self.mesh.n_nodes if self.space == "velocity" else self.mesh.n_vertices
        if len(self.values) != expected:
            raise ValueError(f"{self.space} function needs {expected} dofs, got {len(self.values)}")

    def components(self):
        n = self.mesh.n_nodes
        return self.values[:n], self.values[n:]

    def __call__(self, x):
        return evaluate(self, x)


def _basis_grads(geo):
    # (Nt, Q, 6, 2)
    return np.einsum("qai,tid->tqad", _DPHI_DLAM, geo.grad_lam)


def _scatter(rows, cols, vals, shape):
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()


def _block_diag2(local, nodes, n_nodes):
    """Scalar P2 local matrices (Nt, 6, 6) -> 2-component block matrix."""
    r = np.broadcast_to(nodes[:, :, None], local.shape)
    c = np.broadcast_to(nodes[:, None, :], local.shape)
    rows = np.concatenate([r.ravel(), r.ravel() + n_nodes])
    cols = np.concatenate([c.ravel(), c.ravel() + n_nodes])
    vals = np.concatenate([local.ravel(), local.ravel()])
    return _scatter(rows, cols, vals, (2 * n_nodes, 2 * n_nodes))


def _symmetric(local):
    # summation order in einsum may differ between (a, b) and (b, a)
    return 0.5 * (local + np.swapaxes(local, -1, -2))


def assemble_mass(mesh) -> sp.csr_matrix:
    """Velocity mass matrix int phi_i . phi_j."""
    mesh = as_moved(mesh)
    geo = geometry(mesh)
    ref = _symmetric(np.einsum("q,qa,qb->ab", QUAD_WEIGHTS, _PHI, _PHI))
    local = geo.area[:, None, None] * ref
    return _block_diag2(local, mesh.element_nodes, mesh.n_nodes)


def assemble_stiffness(mesh) -> sp.csr_matrix:
    """Vector Laplacian int grad phi_i : grad phi_j."""
    mesh = as_moved(mesh)
    geo = geometry(mesh)
    G = _basis_grads(geo)
    local = _symmetric(np.einsum("q,t,tqad,tqbd->tab", QUAD_WEIGHTS, geo.area, G, G))
    return _block_diag2(local, mesh.element_nodes, mesh.n_nodes)


def assemble_convection(mesh, beta, t: float = 0.0, skew: bool = False) -> sp.csr_matrix:
    """Convection matrix C[i, j] = int (beta . grad phi_j) . phi_i.

    ``beta`` is a callable ``x -> (N, 2)`` (or ``None`` for zero).  With
    ``skew=True`` the skew-symmetrised form (C - C^T) / 2 is returned.
    """
    mesh = as_moved(mesh)
    n2 = 2 * mesh.n_nodes
    if beta is None:
        return sp.csr_matrix((n2, n2))
    geo = geometry(mesh)
    nt, nq = geo.qpoints.shape[:2]
    b = np.asarray(beta(geo.qpoints.reshape(-1, 2)), dtype=float).reshape(nt, nq, 2)
    if not np.any(b):
        return sp.csr_matrix((n2, n2))
    G = _basis_grads(geo)
    bgrad = np.einsum("tqd,tqbd->tqb", b, G)
    local = np.einsum("q,t,qa,tqb->tab", QUAD_WEIGHTS, geo.area, _PHI, bgrad)
    C = _block_diag2(local, mesh.element_nodes, mesh.n_nodes)
    if skew:
        C = 0.5 * (C - C.T)
    return C.tocsr()


def assemble_div(mesh):
    """Divergence block B[k, j] = int psi_k div phi_j and mean row m_k = int psi_k."""
    mesh = as_moved(mesh)
    geo = geometry(mesh)
    G = _basis_grads(geo)                       # (Nt, Q, 6, 2)
    psi = QUAD_BARY                             # P1 basis = barycentrics, (Q, 3)
    local = np.einsum("q,t,qk,tqad->tkda", QUAD_WEIGHTS, geo.area, psi, G)  # (Nt, 3, 2, 6)
    nn = mesh.n_nodes
    en = mesh.element_nodes
    tri = mesh.triangles
    rows, cols, vals = [], [], []
    for d in range(2):
        r = np.broadcast_to(tri[:, :, None], (len(tri), 3, 6))
        c = np.broadcast_to(en[:, None, :] + d * nn, (len(tri), 3, 6))
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(local[:, :, d, :].ravel())
    B = _scatter(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                 (mesh.n_vertices, 2 * nn))
    m = np.zeros(mesh.n_vertices)
    np.add.at(m, tri.ravel(), np.repeat(geo.area / 3.0, 3))
    return B, m


def assemble_pressure_mass(mesh) -> sp.csr_matrix:
    mesh = as_moved(mesh)
    geo = geometry(mesh)
    ref = np.einsum("q,qa,qb->ab", QUAD_WEIGHTS, QUAD_BARY, QUAD_BARY)
    local = geo.area[:, None, None] * ref
    tri = mesh.triangles
    r = np.broadcast_to(tri[:, :, None], local.shape)
    c = np.broadcast_to(tri[:, None, :], local.shape)
    return _scatter(r, c, local, (mesh.n_vertices, mesh.n_vertices))


def assemble_pressure_laplacian(mesh) -> sp.csr_matrix:
    """P1 stiffness matrix on the pressure space (natural boundary conditions)."""
    mesh = as_moved(mesh)
    geo = geometry(mesh)
    local = geo.area[:, None, None] * np.einsum("tid,tjd->tij", geo.grad_lam, geo.grad_lam)
    tri = mesh.triangles
    r = np.broadcast_to(tri[:, :, None], local.shape)
    c = np.broadcast_to(tri[:, None, :], local.shape)
    return _scatter(r, c, local, (mesh.n_vertices, mesh.n_vertices))


def assemble_load(mesh, f, t: float = 0.0) -> np.ndarray:
    """Load vector int f . phi_i; ``f`` is a callable ``x -> (N, 2)`` or None."""
    mesh = as_moved(mesh)
    nn = mesh.n_nodes
    out = np.zeros(2 * nn)
    if f is None:
        return out
    geo = geometry(mesh)
    nt, nq = geo.qpoints.shape[:2]
    fv = np.asarray(f(geo.qpoints.reshape(-1, 2)), dtype=float).reshape(nt, nq, 2)
    local = np.einsum("q,t,qa,tqd->tda", QUAD_WEIGHTS, geo.area, _PHI, fv)
    en = mesh.element_nodes
    np.add.at(out, en.ravel(), local[:, 0, :].ravel())
    np.add.at(out, en.ravel() + nn, local[:, 1, :].ravel())
    return out


def cross_mass_rhs(old_mesh, u_old: FEFunction, new_mesh=None, mass=None) -> np.ndarray:
    """M(t_n) u^n: the old-mesh functional int u^n . (eta o Phi_{n+1} o Phi_n^{-1}).

    The composed test function carries eta's dof values onto the old mesh's
    basis, so the functional is the old mass matrix applied to u^n.
    """
    if u_old.mesh is not old_mesh:
        raise MeshMismatchError("u_old does not live on old_mesh")
    if new_mesh is not None and new_mesh.base is not old_mesh.base:
        raise MeshMismatchError("old and new meshes derive from different reference meshes")
    M = assemble_mass(old_mesh) if mass is None else mass
    return M @ u_old.values


# --- saddle systems -------------------------------------------------------------

@dataclass(frozen=True)
class SaddleSystem:
    """Block system [[A, B^T, 0], [B, 0, m], [0, m^T, 0]] x = [r, g, 0].

    ``m`` may be None (no mean-value constraint).  ``boundary`` lists velocity
    dofs carrying homogeneous Dirichlet conditions.
    """

    A: sp.spmatrix
    B: sp.spmatrix
    r: np.ndarray
    m: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    boundary: Optional[np.ndarray] = None
    pressure_mass: Optional[sp.spmatrix] = None
    pressure_laplacian: Optional[sp.spmatrix] = None

    @property
    def n_velocity(self):
        return self.A.shape[0]

    @property
    def n_pressure(self):
        return self.B.shape[0]

    def matrix(self) -> sp.csc_matrix:
        nu, npr = self.n_velocity, self.n_pressure
        if self.m is None:
            K = sp.bmat([[self.A, self.B.T], [self.B, None]], format="csc")
        else:
            mcol = sp.csr_matrix(np.asarray(self.m).reshape(-1, 1))
            K = sp.bmat([[self.A, self.B.T, None],
                         [self.B, None, mcol],
                         [None, mcol.T, sp.csr_matrix((1, 1))]], format="csc")
        assert K.shape[0] == nu + npr + (0 if self.m is None else 1)
        return K

    def rhs(self) -> np.ndarray:
        g = np.zeros(self.n_pressure) if self.g is None else self.g
        parts = [self.r, g] + ([np.zeros(1)] if self.m is not None else [])
        return np.concatenate(parts)


def apply_dirichlet(system: SaddleSystem) -> SaddleSystem:
    """Replace boundary velocity rows/columns by identity rows with zero rhs."""
    if system.boundary is None or len(system.boundary) == 0:
        return system
    n = system.n_velocity
    keep = np.ones(n)
    keep[system.boundary] = 0.0
    D = sp.diags(keep)
    Ib = sp.diags(1.0 - keep)
    A = (D @ system.A @ D + Ib).tocsr()
    B = (system.B @ D).tocsr()
    r = system.r * keep
    return replace(system, A=A, B=B, r=r)


# --- evaluation and interpolation --------------------------------------------------

def interpolate_velocity(mesh, u, t: float = 0.0, zero_boundary: bool = True) -> FEFunction:
    """Nodal P2 interpolant of ``u`` (callable ``x -> (N, 2)``)."""
    mesh = as_moved(mesh)
    vals = np.asarray(u(node_coords(mesh)), dtype=float)
    dof = np.concatenate([vals[:, 0], vals[:, 1]])
    if zero_boundary:
        dof[taylor_hood(mesh).boundary_velocity] = 0.0
    return FEFunction(dof, "velocity", t, mesh)


def interpolate_pressure(mesh, p, t: float = 0.0) -> FEFunction:
    mesh = as_moved(mesh)
    return FEFunction(np.asarray(p(mesh.vertices), dtype=float), "pressure", t, mesh)


def zero_function(mesh, space: str, t: float = 0.0) -> FEFunction:
    mesh = as_moved(mesh)
    n = 2 * mesh.n_nodes if space == "velocity" else mesh.n_vertices
    return FEFunction(np.zeros(n), space, t, mesh)


def evaluate(fn: FEFunction, x, with_gradient: bool = False):
    """Point values (and optionally gradients) of a finite element function."""
    mesh = fn.mesh
    tri, lam = locate(mesh, x)
    if fn.space == "pressure":
        val = np.einsum("nk,nk->n", lam, fn.values[mesh.triangles[tri]])
        return val
    nodes = mesh.element_nodes[tri]           # (N, 6)
    ux, uy = fn.components()
    coef = np.stack([ux[nodes], uy[nodes]], axis=-1)  # (N, 6, 2)
    phi = p2_basis(lam)
    val = np.einsum("na,nad->nd", phi, coef)
    if not with_gradient:
        return val
    geo_grad = _grad_lam(mesh, tri)
    dphi = np.einsum("nai,nid->nad", p2_basis_dlam(lam), geo_grad)
    grad = np.einsum("nac,nad->ncd", coef, dphi)
    return val, grad


def _grad_lam(mesh, tri):
    v = mesh.vertices[mesh.triangles[tri]]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    return np.stack([-g1 - g2, g1, g2], axis=1)


def quadrature_values(fn: FEFunction):
    """Velocity values and gradients at every quadrature point, (Nt, Q, 2), (Nt, Q, 2, 2)."""
    mesh = fn.mesh
    geo = geometry(mesh)
    ux, uy = fn.components()
    nodes = mesh.element_nodes
    coef = np.stack([ux[nodes], uy[nodes]], axis=-1)  # (Nt, 6, 2)
    val = np.einsum("qa,tad->tqd", _PHI, coef)
    G = _basis_grads(geo)
    grad = np.einsum("tac,tqad->tqcd", coef, G)
    return geo, val, grad

"""
Manufactured solutions, error norms, order fitting and identity checks.

The manufactured cases rotate a stream-function bump with the mesh:
u_ex(t, x) = R(wt) u0(R(wt)^T x) with u0 = perp-grad psi.  Every derivative
needed for the forcing is closed form.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .assembly import evaluate, quadrature_values
from .flowmap import (VelocityField, advance_flowmap, bump_derivatives, inverse_map,
                      make_field, perp_gradient, substeps_for)
from .mesh import QUAD_WEIGHTS, MeshResourceError, build_disk_mesh, geometry, move_mesh
from .timestepper import RunConfig, run
from .transforms import (FlowSampler, PointwiseField, fd_divergence, kernel_from_sample,
                         piola_pull, piola_push)


# --- manufactured solutions ---------------------------------------------------------

def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class StreamBump:
    """u0 = perp-grad of psi = A (1 - |x-c|^2/R^2)^k with closed-form derivatives."""

    center: tuple = (0.0, 0.0)
    radius: float = 1.0
    amplitude: float = 1.0
    exponent: int = 4

    def _d(self, x, order=3):
        return bump_derivatives(np.asarray(x, float), self.center, self.radius,
                                self.amplitude, self.exponent, order)

    def value(self, x):
        return perp_gradient(self._d(x, 1)[1])

    def jacobian(self, x):
        H = self._d(x, 2)[2]
        return np.stack([-H[..., 1, :], H[..., 0, :]], axis=-2)

    def laplacian(self, x):
        T = self._d(x)[3]
        lap_g = np.einsum("...ikk->...i", T)
        return perp_gradient(lap_g)

    def field(self) -> PointwiseField:
        return PointwiseField(self.value, self.jacobian)


@dataclass(frozen=True)
class ManufacturedCase:
    """Exact solution pair (u_ex, p_ex) and the forcing it induces.

    All evaluators take ``(t, x)`` with x of shape (N, 2).
    """

    w: VelocityField
    V: VelocityField
    velocity: Callable
    jacobian: Callable
    dt_velocity: Callable
    laplacian: Callable
    pressure: Callable
    pressure_gradient: Callable
    description: str = ""

    def forcing(self, t, x):
        x = np.asarray(x, float).reshape(-1, 2)
        conv = np.einsum("nij,nj->ni", self.jacobian(t, x), self.V(t, x))
        return (self.dt_velocity(t, x) + conv - self.laplacian(t, x)
                + self.pressure_gradient(t, x))

    def exact(self, t) -> PointwiseField:
        return PointwiseField(lambda x: self.velocity(t, x), lambda x: self.jacobian(t, x), t=t)

    @property
    def u0(self) -> PointwiseField:
        return self.exact(0.0)

    def config(self, tau, T, h, **kwargs) -> RunConfig:
        return RunConfig(w=self.w, V=self.V, tau=tau, T=T, h=h, u0=self.u0,
                         forcing=self.forcing, **kwargs)


def make_rotation_case(omega: float = 1.0, center=(0.0, 0.0), radius: float = 1.0,
                       amplitude: float = 1.0, exponent: int = 4,
                       advection: Optional[VelocityField] = None,
                       pressure_amplitude: float = 1.0, domain_radius: float = 1.0,
                       holdall_radius: float = 3.0) -> ManufacturedCase:
    """Rotating stream-bump solution on the unit disk.

    ``advection=None`` uses V = w (the same object).  The bump support must
    lie in the closed domain so that u_ex vanishes on its boundary.
    """
    c = np.asarray(center, float)
    if radius <= 0:
        raise ValueError("bump radius must be positive")
    if np.hypot(*c) + radius > domain_radius * (1 + 1e-12):
        raise ValueError(f"bump support (|c|+R = {np.hypot(*c) + radius:g}) leaves the "
                         f"domain of radius {domain_radius:g}")
    if exponent < 2:
        raise ValueError("exponent must be >= 2 so that the velocity vanishes on the boundary")
    w = make_field("rigid-rotation", holdall_radius=holdall_radius, omega=omega)
    V = w if advection is None else advection
    bump = StreamBump(tuple(c), radius, amplitude, exponent)
    S = np.array([[0.0, -1.0], [1.0, 0.0]])

    def frame(t, x):
        R = _rot(omega * t)
        x = np.asarray(x, float).reshape(-1, 2)
        return R, x @ R      # y = R^T x, row-wise

    def velocity(t, x):
        R, y = frame(t, x)
        return bump.value(y) @ R.T

    def jacobian(t, x):
        R, y = frame(t, x)
        return R @ bump.jacobian(y) @ R.T

    def dt_velocity(t, x):
        R, y = frame(t, x)
        Rd = omega * R @ S
        u0 = bump.value(y)
        Du0 = bump.jacobian(y)
        ydot = x.reshape(-1, 2) @ Rd          # Rd^T x
        return u0 @ Rd.T + np.einsum("ij,njk,nk->ni", R, Du0, ydot)

    def laplacian(t, x):
        R, y = frame(t, x)
        return bump.laplacian(y) @ R.T

    a = pressure_amplitude

    def pressure(t, x):
        x = np.asarray(x, float).reshape(-1, 2)
        return a * math.cos(t) * x[:, 0] * x[:, 1]

    def pressure_gradient(t, x):
        x = np.asarray(x, float).reshape(-1, 2)
        return a * math.cos(t) * x[:, ::-1]

    desc = (f"rotation omega={omega:g}, bump c=({c[0]:g},{c[1]:g}) R={radius:g} "
            f"A={amplitude:g} k={exponent}, V={'w' if advection is None else advection.kind}")
    return ManufacturedCase(w, V, velocity, jacobian, dt_velocity, laplacian, pressure,
                            pressure_gradient, desc)


# --- norms and orders ---------------------------------------------------------------

def error_norms(mesh, uh, exact: PointwiseField):
    """L2 norm and H1 seminorm of ``uh - exact`` on ``mesh`` (7-point quadrature)."""
    geo, val, grad = quadrature_values(uh)
    x = geo.qpoints.reshape(-1, 2)
    ev = np.asarray(exact(x), float).reshape(val.shape)
    if exact.jacobian is None:
        raise ValueError("exact field needs a Jacobian evaluator for the H1 seminorm")
    ej = np.asarray(exact.jacobian(x), float).reshape(grad.shape)
    wq = geo.area[:, None] * QUAD_WEIGHTS[None, :]
    l2 = np.sum(wq * np.sum((val - ev) ** 2, axis=-1))
    h1 = np.sum(wq * np.sum((grad - ej) ** 2, axis=(-2, -1)))
    return float(np.sqrt(l2)), float(np.sqrt(h1))


def fit_orders(taus: Sequence[float], errors: Sequence[float]) -> np.ndarray:
    """Orders between consecutive rows; the first entry is NaN."""
    taus = np.asarray(taus, float)
    errors = np.asarray(errors, float)
    out = np.full(len(taus), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[1:] = np.log(errors[:-1] / errors[1:]) / np.log(taus[:-1] / taus[1:])
    return out


@dataclass
class ErrorReport:
    taus: np.ndarray
    l2: np.ndarray
    h1: np.ndarray
    runtimes: np.ndarray
    valid: bool = True
    spatial_l2: float = float("nan")
    spatial_h1: float = float("nan")
    note: str = ""

    def __post_init__(self):
        order = np.argsort(-np.asarray(self.taus, float), kind="stable")
        self.taus = np.asarray(self.taus, float)[order]
        self.l2 = np.asarray(self.l2, float)[order]
        self.h1 = np.asarray(self.h1, float)[order]
        self.runtimes = np.asarray(self.runtimes, float)[order]

    @property
    def order_l2(self):
        return fit_orders(self.taus, self.l2)

    @property
    def order_h1(self):
        return fit_orders(self.taus, self.h1)

    def rows(self):
        ol, oh = self.order_l2, self.order_h1
        return [(self.taus[i], self.l2[i], self.h1[i], ol[i], oh[i], self.runtimes[i])
                for i in range(len(self.taus))]


def fe_difference(uh_fine, uh_coarse):
    """L2 and H1-seminorm of the difference of two velocity fields, on the fine mesh."""
    geo, val, grad = quadrature_values(uh_fine)
    x = geo.qpoints.reshape(-1, 2)
    cv, cg = evaluate(uh_coarse, x, with_gradient=True)
    wq = geo.area[:, None] * QUAD_WEIGHTS[None, :]
    l2 = np.sum(wq * np.sum((val - cv.reshape(val.shape)) ** 2, axis=-1))
    h1 = np.sum(wq * np.sum((grad - cg.reshape(grad.shape)) ** 2, axis=(-2, -1)))
    return float(np.sqrt(l2)), float(np.sqrt(h1))


def convergence_study(case: ManufacturedCase, taus: Sequence[float], h: float, T: float,
                      substeps: int = 10, tol: float = 1e-10, guard: bool = True,
                      guard_fraction: float = 0.1, mesh=None, timing: bool = True,
                      on_run: Optional[Callable] = None) -> ErrorReport:
    """Run one trajectory per tau, measure errors at T and fit orders.

    With ``guard=True`` the smallest tau is repeated on a mesh of size 2h.
    The Richardson estimate of the spatial L2 error on the fine mesh must
    stay below ``guard_fraction`` of the measured L2 error, otherwise the
    report is flagged invalid.  The H1 ratio is reported in ``note``.
    """
    taus = sorted((float(t) for t in taus), reverse=True)
    if not taus:
        raise ValueError("empty tau list")
    if mesh is None:
        mesh = build_disk_mesh(h)
    l2, h1, rt, finals = [], [], [], []
    for tau in taus:
        start = time.perf_counter()
        traj = run(case.config(tau, T, h, substeps=substeps, tol=tol), mesh=mesh)
        elapsed = time.perf_counter() - start
        final = traj.final
        e = error_norms(final.mesh, final.u, case.exact(final.t))
        l2.append(e[0])
        h1.append(e[1])
        rt.append(elapsed if timing else 0.0)
        finals.append(final)
        if on_run is not None:
            on_run(tau, traj)
    report = ErrorReport(np.array(taus), np.array(l2), np.array(h1), np.array(rt))
    if guard:
        try:
            coarse_mesh = build_disk_mesh(min(2 * h, 0.5))
        except MeshResourceError:
            coarse_mesh = None
        if coarse_mesh is not None:
            coarse = run(case.config(taus[-1], T, 2 * h, substeps=substeps, tol=tol),
                         mesh=coarse_mesh).final
            d2, d1 = fe_difference(finals[-1].u, coarse.u)
            report.spatial_l2 = d2 / (2 ** 3 - 1)
            report.spatial_h1 = d1 / (2 ** 2 - 1)
            # the guard gates on L2, the norm of the convergence estimate
            if report.spatial_l2 >= guard_fraction * l2[-1]:
                report.valid = False
                report.note = (f"spatial error not negligible: L2 estimate "
                               f"{report.spatial_l2:.3e} vs error {l2[-1]:.3e}")
            else:
                report.note = (f"spatial/temporal ratio L2 {report.spatial_l2 / l2[-1]:.3f}, "
                               f"H1 {report.spatial_h1 / h1[-1]:.3f}")
    return report


# --- transport identity -------------------------------------------------------------

def _pushed_at(field_, fields, x, s, dt):
    """(phi_s u)(x) for each u in ``fields``, plus the flow sample, at points x of Omega(s)."""
    n = substeps_for(s, dt)
    X = x if s == 0 else inverse_map(field_, x, s, n)
    smp = advance_flowmap(field_, X, s, n) if s != 0 else advance_flowmap(field_, X, 0.0, 1)
    return [np.einsum("nij,nj->ni", smp.jac, u(X)) for u in fields], smp


def transport_identity_residual(field_: VelocityField, u0: Callable, v0: Callable, t: float,
                                fd_step: float, mesh, dt: float = 1e-2) -> float:
    """|FD_t int (phi_t u0).(phi_t v0) - int (phi_t u0).M(t)(phi_t v0)| on moved meshes."""

    def evaluate(s):
        moved = move_mesh(mesh, field_, s, substeps_for(s, dt))
        geo = geometry(moved)
        wq = (geo.area[:, None] * QUAD_WEIGHTS[None, :]).ravel()
        (pu, pv), smp = _pushed_at(field_, (u0, v0), geo.qpoints.reshape(-1, 2), s, dt)
        return wq, pu, pv, smp

    if t - fd_step < 0:
        raise ValueError("t must be at least fd_step")
    inner = []
    for s in (t + fd_step, t - fd_step):
        wq, pu, pv, _ = evaluate(s)
        inner.append(float(np.sum(wq * np.einsum("ni,ni->n", pu, pv))))
    fd = (inner[0] - inner[1]) / (2 * fd_step)
    wq, pu, pv, smp = evaluate(t)
    lam = float(np.sum(wq * np.einsum("ni,nij,nj->n", pu, kernel_from_sample(smp), pv)))
    return abs(fd - lam)


# --- identity suite -----------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    value: float
    bound: float
    passed: bool


@dataclass
class IdentityReport:
    field_kind: str
    t: float
    checks: List[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def get(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _disk_samples(n, radius, rng):
    r = radius * np.sqrt(rng.random(n))
    a = 2 * np.pi * rng.random(n)
    return np.column_stack([r * np.cos(a), r * np.sin(a)])


def _jac_derivative(field_, X, t, dt, step):
    """dJ/dX_k by central differences, shape (N, 2, 2, 2) with last axis k."""
    shifts = np.array([[step, 0.0], [0.0, step], [-step, 0.0], [0.0, -step]])
    stacked = (X[None, :, :] + shifts[:, None, :]).reshape(-1, 2)
    jac = advance_flowmap(field_, stacked, t, substeps_for(t, dt)).jac.reshape(4, len(X), 2, 2)
    return np.stack([(jac[k] - jac[k + 2]) / (2 * step) for k in range(2)], axis=-1)


def appendix_identity_suite(field_: VelocityField, t: float, points=None, n_points: int = 50,
                            u0: Optional[StreamBump] = None, mesh=None, dt: float = 5e-3,
                            fd_step: float = 1e-4, div_tol: float = 1e-5,
                            jacobi_tol: float = 1e-6, seed: int = 0) -> IdentityReport:
    """Divergence preservation, Piola norm bounds and the Jacobi-formula cancellation.

    ``points`` are reference points (default: ``n_points`` random points with
    |X| <= 0.8).  Norms are integrated on ``mesh`` (default h = 0.2).
    """
    rng = np.random.default_rng(seed)
    if points is None:
        points = _disk_samples(n_points, 0.8, rng)
    points = np.asarray(points, float).reshape(-1, 2)
    if u0 is None:
        u0 = StreamBump((0.1, -0.05), 0.85, 1.0, 4)
    u = u0.field()
    report = IdentityReport(field_.kind, float(t))
    n = substeps_for(t, dt)
    sampler = FlowSampler(field_, dt)

    # (a) divergence of pushed and pulled fields
    x_img = advance_flowmap(field_, points, t, n).phi
    pushed = piola_push(sampler, u, t, domain_radius=None)
    div_push = float(np.abs(fd_divergence(pushed, x_img, fd_step)).max())
    report.checks.append(Check("div_push", div_push, div_tol, div_push <= div_tol))
    # pull back a field that is divergence-free on Omega(t)
    pulled = piola_pull(sampler, u, t)
    div_pull = float(np.abs(fd_divergence(pulled, points, fd_step)).max())
    report.checks.append(Check("div_pull", div_pull, div_tol, div_pull <= div_tol))

    # (b) norm bounds, integrated over Omega_0 by change of variables (det J = 1)
    if mesh is None:
        mesh = build_disk_mesh(0.2)
    geo = geometry(mesh)
    X = geo.qpoints.reshape(-1, 2)
    wq = (geo.area[:, None] * QUAD_WEIGHTS[None, :]).ravel()
    smp = advance_flowmap(field_, X, t, n)
    J = smp.jac
    Jinv = np.linalg.inv(J)
    uv = u(X)
    Du = u0.jacobian(X)
    J_sup = float(np.linalg.norm(J, 2, axis=(-2, -1)).max())
    Jinv_sup = float(np.linalg.norm(Jinv, 2, axis=(-2, -1)).max())
    u_H = math.sqrt(np.sum(wq * np.sum(uv ** 2, axis=-1)))
    u_V = math.sqrt(np.sum(wq * np.sum(Du ** 2, axis=(-2, -1))))
    Ju = np.einsum("nij,nj->ni", J, uv)
    push_H = math.sqrt(np.sum(wq * np.sum(Ju ** 2, axis=-1)))
    # tilde-u = phi_t u0 evaluated at Phi_t(X) is J u0(X); pulling back returns u0
    pull_H = u_H
    dJ = _jac_derivative(field_, X, t, dt, fd_step)
    d2_sup = float(np.sqrt(np.sum(dJ ** 2, axis=(-3, -2, -1))).max())
    grad_ref = np.einsum("nijk,nj->nik", dJ, uv) + J @ Du       # D(J u)(X)
    grad_pushed = grad_ref @ Jinv                               # chain rule through Phi^{-1}
    push_V = math.sqrt(np.sum(wq * np.sum(grad_pushed ** 2, axis=(-2, -1))))
    allow = 1e-9

    def bound_check(name, value, bound):
        slack = bound - value
        report.checks.append(Check(name, value, bound, slack >= -allow * max(bound, 1.0)))

    bound_check("push_H", push_H, J_sup * u_H)
    bound_check("pull_H", pull_H, Jinv_sup * push_H)
    bound_check("push_V", push_V, math.sqrt(3.0) * Jinv_sup *
                math.sqrt(d2_sup ** 2 * u_H ** 2 + J_sup ** 2 * u_V ** 2))

    # (c) sum_{i,k} (J^{-1})_{ki} d_k J_{ij} = d_j log det J = 0
    dJp = _jac_derivative(field_, points, t, dt, fd_step)
    Jp_inv = np.linalg.inv(advance_flowmap(field_, points, t, n).jac)
    jacobi = np.einsum("nki,nijk->nj", Jp_inv, dJp)
    jac_max = float(np.abs(jacobi).max())
    report.checks.append(Check("jacobi", jac_max, jacobi_tol, jac_max <= jacobi_tol))
    return report

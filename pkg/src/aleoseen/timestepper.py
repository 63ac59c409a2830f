"""
Implicit moving-mesh time stepping for the parabolic Oseen problem.

Each step solves, on the mesh at t_{n+1},

    (M_{n+1} + tau K + tau C) u + tau G p = M_n u^n + tau F_{n+1},   div u = 0,

with u = 0 on the boundary and zero-mean pressure.  The mesh nodes follow the
flow map, so the old-mesh mass product M_n u^n is the functional
int_{Omega(t_n)} u^n . (eta o Phi_{t_{n+1}} o Phi_{t_n}^{-1}).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (FEFunction, SaddleSystem, apply_dirichlet, assemble_convection,
                       assemble_div, assemble_load, assemble_mass, assemble_pressure_laplacian,
                       assemble_pressure_mass,
                       assemble_stiffness, cross_mass_rhs, evaluate, interpolate_velocity,
                       zero_function)
from .flowmap import VelocityField, advance_flowmap, inverse_map, substeps_for
from .mesh import Mesh, at_rest, build_disk_mesh, move_mesh, node_coords, taylor_hood
from .transforms import PointwiseField, fd_jacobian

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


class StepFailure(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"step {step} failed: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class RunConfig:
    w: VelocityField
    V: VelocityField
    tau: float
    T: float
    h: float = 0.05
    u0: Optional[PointwiseField] = None
    forcing: Optional[Callable] = None   # f(t, x) -> (N, 2)
    substeps: int = 10                   # flow-map RK4 steps per time step
    tol: float = 1e-10
    maxiter: int = 500
    reaction: float = 0.0
    skew: bool = False
    solver: str = "auto"
    taus: tuple = ()                     # study list; empty means (tau,)
    output: Optional[object] = None
    case: Optional[object] = None        # manufactured case, when forcing is manufactured
    settings: Optional[dict] = None      # resolved key/value pairs from a config file

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.T >= self.tau:
            raise ValueError(f"T={self.T} must be at least tau={self.tau}")
        if not 0 < self.tol <= 1e-4:
            raise ValueError(f"solver tolerance must lie in (0, 1e-4], got {self.tol}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.reaction < 0:
            raise ValueError("reaction coefficient must be non-negative")

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.T / self.tau - 1e-9))


@dataclass
class State:
    t: float
    mesh: object
    u: FEFunction
    p: FEFunction
    mass: Optional[sp.spmatrix] = None


@dataclass(frozen=True)
class StepDiagnostics:
    step: int
    t: float
    iterations: int
    residual: float
    divergence: float
    kinetic_energy: float


@dataclass
class Trajectory:
    config: RunConfig
    states: List[State] = field(default_factory=list)
    diagnostics: List[StepDiagnostics] = field(default_factory=list)

    @property
    def times(self):
        return np.array([s.t for s in self.states])

    @property
    def final(self) -> State:
        return self.states[-1]


class SaddleSolution(NamedTuple):
    u: np.ndarray
    p: np.ndarray
    multiplier: float
    iterations: int
    residual: float


# --- linear algebra ---------------------------------------------------------------

DIRECT_LIMIT = 8000


def _relres(K, x, b):
    nb = np.linalg.norm(b)
    r = np.linalg.norm(K @ x - b)
    return r / nb if nb > 0 else r


def solve_saddle(system: SaddleSystem, tol: float = 1e-10, method: str = "auto",
                 maxiter: int = 500) -> SaddleSolution:
    """Solve a boundary-reduced saddle-point system to relative residual ``tol``.

    ``method="direct"`` factors the whole block matrix (sparse LU with
    iterative refinement).  ``method="schur"`` factors only the velocity block
    and runs GMRES on the pressure Schur complement, preconditioned with the
    pressure mass and pressure Laplacian.  ``"auto"`` picks direct for small
    systems and falls back to the Schur iteration if the direct residual is
    not met.
    """
    K = system.matrix()
    b = system.rhs()
    nu, npr = system.n_velocity, system.n_pressure
    if not np.any(b):
        return SaddleSolution(np.zeros(nu), np.zeros(npr), 0.0, 0, 0.0)
    if method not in ("auto", "direct", "schur"):
        raise ValueError(f"unknown solver method {method!r}")

    history = []
    if method == "direct" or (method == "auto" and K.shape[0] <= DIRECT_LIMIT):
        try:
            x, it, res = _direct(K, b, tol, history)
            if res <= tol:
                return _split(x, nu, npr, system, it, res)
        except RuntimeError as exc:
            log.warning("direct solve failed: %s", exc)
            if method == "direct":
                raise SolverError(f"direct solve failed: {exc}", history) from exc
        if method == "direct":
            raise SolverError(f"residual {history[-1]:.3e} above tolerance {tol:.1e}", history)

    x, it, res = _schur(system, K, b, tol, maxiter, history)
    if res > tol:
        raise SolverError(f"Schur GMRES stopped at residual {res:.3e} after {it} iterations",
                          history)
    return _split(x, nu, npr, system, it, res)


def _direct(K, b, tol, history):
    lu = spla.splu(K.tocsc())
    x = lu.solve(b)
    res = _relres(K, x, b)
    history.append(res)
    it = 0
    while res > tol and it < 3:
        x = x + lu.solve(b - K @ x)
        res = _relres(K, x, b)
        history.append(res)
        it += 1
    if not np.all(np.isfinite(x)):
        raise RuntimeError("non-finite solution")
    return x, it + 1, res


def _split(x, nu, npr, system, it, res):
    mu = float(x[nu + npr]) if system.m is not None else 0.0
    return SaddleSolution(x[:nu].copy(), x[nu:nu + npr].copy(), mu, int(it), float(res))


def _schur(system, K, b, tol, maxiter, history):
    nu, npr = system.n_velocity, system.n_pressure
    A_lu = spla.splu(system.A.tocsc(), permc_spec="MMD_AT_PLUS_A")
    G = system.B.tocsr()
    GT = G.T.tocsr()
    r = system.r
    g = np.zeros(npr) if system.g is None else system.g
    m = system.m
    ones = np.ones(npr)

    def S(p):
        return G @ A_lu.solve(GT @ p)

    rhs = G @ A_lu.solve(r) - g
    bordered = m is not None and np.linalg.norm(GT @ ones) > 1e-12 * max(abs(G).max(), 1e-300)
    mu = 0.0
    if m is not None and not bordered:
        # constants span the kernel of S: the multiplier restores consistency
        mu = -rhs.sum() / m.sum()
        rhs = rhs + m * mu

    prec = _schur_preconditioner(system, npr)
    count = [0]

    def cb(_):
        count[0] += 1

    if bordered:
        def op(z):
            return np.concatenate([S(z[:npr]) - m * z[npr], [m @ z[:npr]]])

        Op = spla.LinearOperator((npr + 1, npr + 1), matvec=op)
        P = spla.LinearOperator((npr + 1, npr + 1),
                                matvec=lambda z: np.concatenate([prec(z[:npr]), z[npr:]]))
        rhs_b = np.concatenate([rhs, [0.0]])
    else:
        Op = spla.LinearOperator((npr, npr), matvec=S)
        P = spla.LinearOperator((npr, npr), matvec=prec)
        rhs_b = rhs

    x = None
    rtol = 0.1 * tol
    res = np.inf
    for _attempt in range(4):
        z, info = spla.gmres(Op, rhs_b, x0=None if x is None else x[nu:nu + len(rhs_b)],
                             M=P, rtol=rtol, atol=0.0, restart=min(100, len(rhs_b)),
                             maxiter=maxiter, callback=cb, callback_type="pr_norm")
        if bordered:
            p, mu = z[:npr], float(z[npr])
        else:
            p = z
            if m is not None:
                p = p - (m @ p) / m.sum() * ones
        u = A_lu.solve(r - GT @ p)
        x = np.concatenate([u, p] + ([[mu]] if m is not None else []))
        res = _relres(K, x, b)
        history.append(res)
        if res <= tol:
            break
        rtol *= 0.01
    return x, count[0], res


def _schur_preconditioner(system, npr):
    Mp = system.pressure_mass
    Lp = system.pressure_laplacian
    if Mp is None:
        return lambda v: v
    Mp_lu = spla.splu(sp.csc_matrix(Mp))
    if Lp is None:
        return lambda v: Mp_lu.solve(v)
    # Neumann Laplacian is singular; a small mass shift regularises it
    shift = 1e-8 * abs(Lp).max() / max(abs(Mp).max(), 1e-300)
    Lp_lu = spla.splu(sp.csc_matrix(Lp + shift * Mp))
    return lambda v: Lp_lu.solve(v) + Mp_lu.solve(v)


# --- scheme --------------------------------------------------------------------------

def _beta(config, t):
    if config.V is config.w:
        return None

    def beta(x):
        return config.V.value(t, x) - config.w.value(t, x)

    return beta


def _check_divergence_free(u0: PointwiseField, mesh):
    x = node_coords(mesh)
    inner = np.einsum("ni,ni->n", x, x) < 0.98
    x = x[inner]
    jac = u0.jacobian(x) if u0.jacobian is not None else fd_jacobian(u0, x, 1e-5)
    div = np.abs(jac[:, 0, 0] + jac[:, 1, 1]).max()
    scale = max(1.0, np.abs(jac).max())
    tol = 1e-10 if u0.jacobian is not None else 1e-5
    if div > tol * scale:
        raise ValueError(f"initial velocity is not divergence-free (max |div| = {div:.3e})")


def initialize(config: RunConfig, mesh: Optional[Mesh] = None) -> State:
    """Interpolate u_0 on the reference mesh; boundary dofs are set to zero."""
    if mesh is None:
        mesh = build_disk_mesh(config.h)
    ref = at_rest(mesh)
    if config.u0 is None:
        u = zero_function(ref, "velocity")
    else:
        _check_divergence_free(config.u0, ref)
        u = interpolate_velocity(ref, config.u0, t=0.0)
    return State(0.0, ref, u, zero_function(ref, "pressure"))


def step(state: State, config: RunConfig, dofs=None) -> tuple:
    """Advance one time step; returns ``(new_state, diagnostics)``."""
    tau = config.tau
    t1 = state.t + tau
    new_mesh = move_mesh(state.mesh.base, config.w, t1, config.substeps, start=state.mesh)
    if dofs is None:
        dofs = taylor_hood(new_mesh)

    M_old = state.mass if state.mass is not None else assemble_mass(state.mesh)
    M = assemble_mass(new_mesh)
    K = assemble_stiffness(new_mesh)
    C = assemble_convection(new_mesh, _beta(config, t1), t1, skew=config.skew)
    B, m = assemble_div(new_mesh)
    A = M + tau * K + tau * C
    if config.reaction:
        A = A + tau * config.reaction * M

    rhs = cross_mass_rhs(state.mesh, state.u, new_mesh, mass=M_old)
    if config.forcing is not None:
        rhs = rhs + tau * assemble_load(new_mesh, lambda x: config.forcing(t1, x), t1)

    # G = -tau B^T keeps p physical; the scaled Mp and Lp feed the Schur preconditioner
    system = SaddleSystem(A, -tau * B, rhs, m=m, boundary=dofs.boundary_velocity,
                          pressure_mass=assemble_pressure_mass(new_mesh) * tau,
                          pressure_laplacian=assemble_pressure_laplacian(new_mesh) * tau**2)
    system = apply_dirichlet(system)
    sol = solve_saddle(system, config.tol, config.solver, config.maxiter)

    u = FEFunction(sol.u, "velocity", t1, new_mesh)
    p = FEFunction(sol.p, "pressure", t1, new_mesh)
    div = float(np.abs(B @ sol.u).max())
    unorm = float(np.abs(sol.u).max())
    if div > 10 * config.tol * max(unorm, 1.0) * max(1.0, np.abs(B).max()):
        raise SolverError(f"divergence residual {div:.3e} exceeds the solver tolerance bound")
    energy = 0.5 * float(sol.u @ (M @ sol.u))
    diag = StepDiagnostics(0, t1, sol.iterations, sol.residual, div, energy)
    return State(t1, new_mesh, u, p, mass=M), diag


def run(config: RunConfig, mesh: Optional[Mesh] = None, callback=None) -> Trajectory:
    """Run ``ceil(T / tau)`` steps from the interpolated initial data."""
    state = initialize(config, mesh)
    traj = Trajectory(config, [state], [])
    dofs = taylor_hood(state.mesh)
    for n in range(config.n_steps):
        try:
            state, diag = step(state, config, dofs)
        except Exception as exc:
            raise StepFailure(n + 1, exc) from exc
        diag = StepDiagnostics(n + 1, diag.t, diag.iterations, diag.residual,
                               diag.divergence, diag.kinetic_energy)
        traj.states.append(state)
        traj.diagnostics.append(diag)
        if callback is not None:
            callback(state, diag)
    return traj


# --- interpolation between steps ----------------------------------------------------------

def _bracket(traj: Trajectory, t: float):
    times = traj.times
    if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
        raise ValueError(f"t={t} outside trajectory range [{times[0]}, {times[-1]}]")
    n = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    return n, traj.states[n], traj.states[n + 1]


def interpolate_state(traj: Trajectory, t: float, dt: float = 1e-3) -> PointwiseField:
    """Piola-consistent interpolant phi_t((1-theta) phi_{-t_n} u^n + theta phi_{-t_{n+1}} u^{n+1})."""
    n, s0, s1 = _bracket(traj, t)
    w = traj.config.w
    theta = (t - s0.t) / (s1.t - s0.t)

    def value(x):
        X = inverse_map(w, x, t, substeps_for(t, dt)) if t > 0 else np.asarray(x, float).reshape(-1, 2)
        pulled = []
        for s in (s0, s1):
            smp = advance_flowmap(w, X, s.t, substeps_for(s.t, dt)) if s.t > 0 else None
            if smp is None:
                pulled.append(evaluate(s.u, X))
            else:
                pulled.append(np.linalg.solve(smp.jac, evaluate(s.u, smp.phi)[..., None])[..., 0])
        blend = (1 - theta) * pulled[0] + theta * pulled[1]
        if t == 0:
            return blend
        st = advance_flowmap(w, X, t, substeps_for(t, dt))
        return np.einsum("nij,nj->ni", st.jac, blend)

    return PointwiseField(value, t=t)


def naive_interpolant(traj: Trajectory, t: float, dt: float = 1e-3) -> PointwiseField:
    """Coordinate blend ((1-theta) u^n o Phi_{t_n} + theta u^{n+1} o Phi_{t_{n+1}}) o Phi_t^{-1}."""
    n, s0, s1 = _bracket(traj, t)
    w = traj.config.w
    theta = (t - s0.t) / (s1.t - s0.t)

    def value(x):
        X = inverse_map(w, x, t, substeps_for(t, dt)) if t > 0 else np.asarray(x, float).reshape(-1, 2)
        vals = []
        for s in (s0, s1):
            y = advance_flowmap(w, X, s.t, substeps_for(s.t, dt)).phi if s.t > 0 else X
            vals.append(evaluate(s.u, y))
        return (1 - theta) * vals[0] + theta * vals[1]

    return PointwiseField(value, t=t)

"""
Pointwise Piola transforms driven by flow-map data.

Contravariant:  push  u  -> (J u) o Phi_t^{-1},       pull  u~ -> J^{-1} u~ o Phi_t
Covariant:      push  v  -> (J^{-T} v) o Phi_t^{-1},  pull  v~ -> J^T v~ o Phi_t

with J = DPhi_t evaluated at the reference point.  Evaluators on the moving
domain recover reference points by backward integration of the flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .flowmap import (FlowMapSample, VelocityField, advance_flowmap, inverse_map,
                      substeps_for)


class OutsideDomainError(ValueError):
    """Evaluation point whose reference preimage lies outside Omega_0."""


@dataclass(frozen=True)
class PointwiseField:
    """Vector field given by an evaluator ``x -> value``, shape (N, 2)."""

    value: Callable
    jacobian: Optional[Callable] = None
    t: float = 0.0

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float).reshape(-1, 2))


class FlowSampler:
    """Cached flow-map evaluation for a fixed field and RK4 step size.

    ``forward(X, t)`` returns a FlowMapSample for reference points ``X``;
    ``preimage(x, t)`` returns Phi_t^{-1}(x).  Results are cached per
    (t, point set), which matters when a kernel is queried repeatedly on the
    same quadrature points.
    """

    def __init__(self, field: VelocityField, dt: float = 1e-3, cache_size: int = 64):
        self.field = field
        self.dt = dt
        self._cache = {}
        self._order = []
        self.cache_size = cache_size

    def _key(self, tag, x, t):
        x = np.ascontiguousarray(x, dtype=float)
        return (tag, float(t), x.shape, hash(x.tobytes()))

    def _remember(self, key, value):
        self._cache[key] = value
        self._order.append(key)
        if len(self._order) > self.cache_size:
            self._cache.pop(self._order.pop(0), None)
        return value

    def forward(self, X, t) -> FlowMapSample:
        key = self._key("f", X, t)
        if key in self._cache:
            return self._cache[key]
        sample = advance_flowmap(self.field, X, t, substeps_for(t, self.dt))
        return self._remember(key, sample)

    def preimage(self, x, t):
        key = self._key("b", x, t)
        if key in self._cache:
            return self._cache[key]
        X = inverse_map(self.field, x, t, substeps_for(t, self.dt)) if t != 0 else \
            np.array(x, dtype=float).reshape(-1, 2)
        return self._remember(key, X)

    def at_image(self, x, t) -> FlowMapSample:
        """FlowMapSample whose ``phi`` are (approximately) the given points."""
        return self.forward(self.preimage(x, t), t)


def _sampler(field_or_sampler, dt):
    if isinstance(field_or_sampler, FlowSampler):
        return field_or_sampler
    return FlowSampler(field_or_sampler, dt)


def _check_reference(X, domain_radius):
    if domain_radius is None:
        return
    r = np.sqrt(np.einsum("ni,ni->n", X, X))
    if r.size and r.max() > domain_radius * (1 + 1e-6):
        raise OutsideDomainError(
            f"preimage at |X|={r.max():.6g} lies outside the reference domain "
            f"of radius {domain_radius:g}")


# --- values at sample points -------------------------------------------------

def push_values(sample: FlowMapSample, u) -> np.ndarray:
    """(phi_t u)(Phi_t X) = J u(X) at the sample's reference points."""
    return np.einsum("nij,nj->ni", sample.jac, u(sample.points))


def pull_values(sample: FlowMapSample, u_tilde) -> np.ndarray:
    """(phi_{-t} u~)(X) = J^{-1} u~(Phi_t X)."""
    return np.linalg.solve(sample.jac, u_tilde(sample.phi)[..., None])[..., 0]


# --- field transforms ---------------------------------------------------------

def piola_push(field, u, t: float, dt: float = 1e-3, domain_radius: Optional[float] = 1.0
               ) -> PointwiseField:
    """Contravariant push-forward of a field on Omega_0 to Omega(t).

    Parameters
    ----------
    field : VelocityField or FlowSampler
        The domain velocity w, or a sampler wrapping it.
    u : callable
        Field on the reference domain, ``X -> (N, 2)``.
    t : float
        Target time.
    dt : float
        RK4 step used for the flow map.
    domain_radius : float or None
        Radius of Omega_0 for the domain check; ``None`` disables it.
    """
    sampler = _sampler(field, dt)
    if t == 0:
        return PointwiseField(lambda x: u(np.asarray(x, dtype=float).reshape(-1, 2)), t=0.0)

    def value(x):
        X = sampler.preimage(x, t)
        _check_reference(X, domain_radius)
        return push_values(sampler.forward(X, t), u)

    return PointwiseField(value, t=t)


def piola_pull(field, u_tilde, t: float, dt: float = 1e-3) -> PointwiseField:
    """Contravariant pull-back of a field on Omega(t) to Omega_0."""
    sampler = _sampler(field, dt)
    if t == 0:
        return PointwiseField(lambda X: u_tilde(np.asarray(X, dtype=float).reshape(-1, 2)), t=0.0)

    def value(X):
        return pull_values(sampler.forward(X, t), u_tilde)

    return PointwiseField(value, t=0.0)


def covariant_transform(field, v, t: float, direction: str, dt: float = 1e-3,
                        domain_radius: Optional[float] = 1.0) -> PointwiseField:
    """Covariant Piola transform.

    ``direction="pull"`` maps v~ on Omega(t) to J^T v~ o Phi_t on Omega_0;
    ``direction="push"`` maps v on Omega_0 to (J^{-T} v) o Phi_t^{-1}.
    """
    sampler = _sampler(field, dt)
    if direction not in ("push", "pull"):
        raise ValueError(f"direction must be 'push' or 'pull', got {direction!r}")
    if t == 0:
        return PointwiseField(lambda x: v(np.asarray(x, dtype=float).reshape(-1, 2)), t=0.0)

    if direction == "pull":
        def value(X):
            s = sampler.forward(X, t)
            return np.einsum("nji,nj->ni", s.jac, v(s.phi))

        return PointwiseField(value, t=0.0)

    def value(x):
        X = sampler.preimage(x, t)
        _check_reference(X, domain_radius)
        s = sampler.forward(X, t)
        JT = np.swapaxes(s.jac, -1, -2)
        return np.linalg.solve(JT, v(X)[..., None])[..., 0]

    return PointwiseField(value, t=t)


# --- lambda kernel ------------------------------------------------------------

def kernel_from_sample(sample: FlowMapSample) -> np.ndarray:
    """J^{-T} d/dt(J^T J) J^{-1} at the sample's image points."""
    J, Jd = sample.jac, sample.jac_dt
    if np.any(np.abs(np.linalg.det(J)) < 1e-12):
        raise np.linalg.LinAlgError("singular flow-map Jacobian")
    Jinv = np.linalg.inv(J)
    JT = np.swapaxes(J, -1, -2)
    JdT = np.swapaxes(Jd, -1, -2)
    middle = JdT @ J + JT @ Jd
    M = np.swapaxes(Jinv, -1, -2) @ middle @ Jinv
    # symmetric by construction; remove rounding asymmetry
    return 0.5 * (M + np.swapaxes(M, -1, -2))


@dataclass
class LambdaKernel:
    """Matrix field M(t, x) on Omega(t) such that lambda(t; u, v) = int u . M v."""

    sampler: FlowSampler
    t: float

    def __call__(self, x):
        return kernel_from_sample(self.sampler.at_image(x, self.t))


def lambda_kernel(field, t: float, dt: float = 1e-3) -> LambdaKernel:
    return LambdaKernel(_sampler(field, dt), float(t))


# --- material derivatives -----------------------------------------------------

def material_derivative(field, u: Callable, t: float, convention: str, fd_step: float = 1e-4,
                        dt: float = 1e-3, t_range=(0.0, np.inf)) -> PointwiseField:
    """Central-difference material derivative of a time-dependent field.

    ``u(s, x)`` evaluates the field at time ``s`` on Omega(s).
    ``convention="phi"`` gives phi_t d/dt(phi_{-t} u); ``convention="w"`` gives
    d/dt(u o Phi_t) o Phi_t^{-1}.
    """
    if convention not in ("phi", "w"):
        raise ValueError(f"convention must be 'phi' or 'w', got {convention!r}")
    if t - fd_step < t_range[0] or t + fd_step > t_range[1]:
        raise ValueError(f"t={t} too close to the interval ends for fd_step={fd_step}")
    sampler = _sampler(field, dt)
    n_small = substeps_for(fd_step, dt)

    def value(x):
        X = sampler.preimage(x, t)
        s0 = sampler.forward(X, t)
        ends = [advance_flowmap(sampler.field, s0.phi, t + sgn * fd_step, n_small,
                                t0=t, jac0=s0.jac) for sgn in (1, -1)]
        if convention == "w":
            vals = [u(e.t, e.phi) for e in ends]
            return (vals[0] - vals[1]) / (2 * fd_step)
        pulled = [np.linalg.solve(e.jac, u(e.t, e.phi)[..., None])[..., 0] for e in ends]
        d = (pulled[0] - pulled[1]) / (2 * fd_step)
        return np.einsum("nij,nj->ni", s0.jac, d)

    return PointwiseField(value, t=t)


def material_difference_term(field, u: Callable, t: float, dt: float = 1e-3) -> PointwiseField:
    """(DPhi_t d/dt(DPhi_t^{-1})) o Phi_t^{-1} u, evaluated from flow-map data.

    Uses d/dt(J^{-1}) = -J^{-1} J' J^{-1}, so the factor is -J' J^{-1}.
    """
    sampler = _sampler(field, dt)

    def value(x):
        s = sampler.at_image(x, t)
        factor = -s.jac_dt @ np.linalg.inv(s.jac)
        return np.einsum("nij,nj->ni", factor, u(t, np.asarray(x, dtype=float).reshape(-1, 2)))

    return PointwiseField(value, t=t)


# --- finite differences -------------------------------------------------------

def fd_jacobian(f: Callable, x, step: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of a vector evaluator, shape (N, 2, 2)."""
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    n = len(x)
    shifted = np.concatenate([x + step * e for e in np.eye(2)] + [x - step * e for e in np.eye(2)])
    vals = np.asarray(f(shifted)).reshape(4, n, -1)
    cols = [(vals[k] - vals[k + 2]) / (2 * step) for k in range(2)]
    return np.stack(cols, axis=-1)


def fd_divergence(f: Callable, x, step: float = 1e-4) -> np.ndarray:
    jac = fd_jacobian(f, x, step)
    return jac[:, 0, 0] + jac[:, 1, 1]

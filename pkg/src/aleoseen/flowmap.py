"""
Closed-form divergence-free velocity fields and their flow maps.

The flow map X -> Phi_t(X) solves dPhi/dt = w(t, Phi) with Phi_0 = Id.  It is
integrated together with the variational equation dJ/dt = Dw(t, Phi) J for
J = DPhi_t using fixed-step classical RK4.

Array conventions: points have shape (N, 2); Jacobians have shape (N, 2, 2)
with ``J[n, i, j] = d(.)_i / dx_j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

KINDS = ("zero", "rigid-rotation", "shear", "stream-bump", "composite-sum")


class DomainEscapeError(RuntimeError):
    """A trajectory left the hold-all disk D."""


@dataclass(frozen=True)
class VelocityField:
    """Analytic velocity field w(t, x) with its Jacobian and time derivative.

    ``value``, ``jacobian`` and ``dt`` take ``(t, x)`` with ``x`` of shape
    (..., 2).  ``hessian`` returns the tensor ``H[..., i, j, k] = d2 w_i /
    dx_j dx_k``.  All kinds are autonomous, so ``dt`` is identically zero.
    """

    kind: str
    params: dict
    value: Callable
    jacobian: Callable
    hessian: Callable
    dt: Callable
    holdall_radius: float = 3.0
    components: tuple = field(default=())

    def __call__(self, t, x):
        return self.value(t, x)

    def divergence(self, t, x):
        jac = self.jacobian(t, x)
        return jac[..., 0, 0] + jac[..., 1, 1]


# --- stream function bump ---------------------------------------------------

def bump_derivatives(x, center, radius, amplitude, exponent, order=3):
    """Derivatives of psi(x) = A * (1 - |x - c|^2 / R^2)^k, zero outside.

    Returns ``(psi, g, H, T)`` with the gradient g (..., 2), Hessian H
    (..., 2, 2) and third derivative tensor T (..., 2, 2, 2).  Entries above
    ``order`` are returned as None.
    """
    x = np.asarray(x, dtype=float)
    y = x - np.asarray(center, dtype=float)
    k = exponent
    r2 = radius * radius
    q = 1.0 - np.einsum("...i,...i->...", y, y) / r2
    inside = q > 0.0
    qc = np.where(inside, q, 0.0)
    dq = -2.0 * y / r2
    eye = np.eye(2)
    ddq = -2.0 / r2 * eye

    def qpow(p):
        if p < 0:
            return np.zeros_like(qc)
        if p == 0:
            return inside.astype(float)
        return qc**p

    c1 = amplitude * k * qpow(k - 1)
    psi = amplitude * qpow(k)
    g = c1[..., None] * dq
    if order < 2:
        return psi, g, None, None
    c2 = amplitude * k * (k - 1) * qpow(k - 2)
    H = c2[..., None, None] * dq[..., :, None] * dq[..., None, :] + c1[..., None, None] * ddq
    if order < 3:
        return psi, g, H, None
    c3 = amplitude * k * (k - 1) * (k - 2) * qpow(k - 3)
    sym = (
        np.einsum("ij,...k->...ijk", ddq, dq)
        + np.einsum("ik,...j->...ijk", ddq, dq)
        + np.einsum("jk,...i->...ijk", ddq, dq)
    )
    T = (
        c3[..., None, None, None] * np.einsum("...i,...j,...k->...ijk", dq, dq, dq)
        + c2[..., None, None, None] * sym
    )
    return psi, g, H, T


def perp_gradient(g):
    """Rotated gradient (-g_2, g_1); divergence-free when g is a gradient."""
    return np.stack([-g[..., 1], g[..., 0]], axis=-1)


def _stream_bump(center, radius, amplitude, exponent):
    def value(t, x):
        _, g, _, _ = bump_derivatives(x, center, radius, amplitude, exponent, order=1)
        return perp_gradient(g)

    def jacobian(t, x):
        _, _, H, _ = bump_derivatives(x, center, radius, amplitude, exponent, order=2)
        return np.stack([-H[..., 1, :], H[..., 0, :]], axis=-2)

    def hessian(t, x):
        _, _, _, T = bump_derivatives(x, center, radius, amplitude, exponent)
        return np.stack([-T[..., 1, :, :], T[..., 0, :, :]], axis=-3)

    return value, jacobian, hessian


def _zeros(x):
    return np.zeros(np.shape(x), dtype=float)


def make_field(kind: str, holdall_radius: float = 3.0, **params) -> VelocityField:
    """Build a divergence-free velocity field.

    Parameters
    ----------
    kind : str
        One of ``zero``, ``rigid-rotation`` (``omega``), ``shear`` (``matrix``,
        trace-free 2x2), ``stream-bump`` (``center``, ``radius``, ``amplitude``,
        ``exponent``) or ``composite-sum`` (``components``: sequence of fields).
    holdall_radius : float
        Radius of the hold-all disk D centred at the origin.

    The stream-bump field is the perpendicular gradient of
    ``amplitude * (1 - |x - center|^2 / radius^2)^exponent``.  It vanishes
    outside the support disk; its first derivatives also vanish there when
    ``exponent >= 3``.
    """
    if holdall_radius <= 0:
        raise ValueError("holdall_radius must be positive")

    if kind == "zero":
        def value(t, x):
            return _zeros(x)

        def jacobian(t, x):
            return np.zeros(np.shape(x)[:-1] + (2, 2))

        def hessian(t, x):
            return np.zeros(np.shape(x)[:-1] + (2, 2, 2))

        return VelocityField("zero", {}, value, jacobian, hessian, lambda t, x: _zeros(x),
                             holdall_radius)

    if kind == "rigid-rotation":
        omega = float(params.get("omega", 1.0))
        A = np.array([[0.0, -omega], [omega, 0.0]])
        field_ = _linear_field(A, "rigid-rotation", {"omega": omega}, holdall_radius)
        return field_

    if kind == "shear":
        A = np.asarray(params.get("matrix", [[0.0, 1.0], [0.0, 0.0]]), dtype=float)
        if A.shape != (2, 2):
            raise ValueError("shear matrix must be 2x2")
        if abs(A[0, 0] + A[1, 1]) > 1e-14 * max(1.0, np.abs(A).max()):
            raise ValueError(f"shear matrix must be trace-free, got trace {A[0, 0] + A[1, 1]:g}")
        return _linear_field(A, "shear", {"matrix": A.tolist()}, holdall_radius)

    if kind == "stream-bump":
        center = tuple(float(c) for c in params.get("center", (0.0, 0.0)))
        radius = float(params.get("radius", 1.0))
        amplitude = float(params.get("amplitude", 1.0))
        exponent = int(params.get("exponent", 3))
        if radius <= 0:
            raise ValueError(f"bump radius must be positive, got {radius}")
        if exponent < 2:
            raise ValueError("bump exponent must be >= 2 so that the field is continuous")
        value, jacobian, hessian = _stream_bump(center, radius, amplitude, exponent)
        p = {"center": center, "radius": radius, "amplitude": amplitude, "exponent": exponent}
        return VelocityField("stream-bump", p, value, jacobian, hessian,
                             lambda t, x: _zeros(x), holdall_radius)

    if kind == "composite-sum":
        comps: Sequence[VelocityField] = tuple(params.get("components", ()))
        if not comps:
            raise ValueError("composite-sum needs at least one component")

        def value(t, x):
            return sum(c.value(t, x) for c in comps)

        def jacobian(t, x):
            return sum(c.jacobian(t, x) for c in comps)

        def hessian(t, x):
            return sum(c.hessian(t, x) for c in comps)

        def dt(t, x):
            return sum(c.dt(t, x) for c in comps)

        return VelocityField("composite-sum", {}, value, jacobian, hessian, dt,
                             holdall_radius, tuple(comps))

    raise ValueError(f"unknown field kind {kind!r}; expected one of {KINDS}")


def _linear_field(A, kind, params, holdall_radius):
    A = np.array(A, dtype=float)

    def value(t, x):
        return np.asarray(x, dtype=float) @ A.T

    def jacobian(t, x):
        return np.broadcast_to(A, np.shape(x)[:-1] + (2, 2)).copy()

    def hessian(t, x):
        return np.zeros(np.shape(x)[:-1] + (2, 2, 2))

    params = dict(params, matrix=A.tolist())
    return VelocityField(kind, params, value, jacobian, hessian, lambda t, x: _zeros(x),
                         holdall_radius)


# --- flow map integration ---------------------------------------------------

@dataclass(frozen=True)
class FlowMapSample:
    """Flow map data at time ``t`` for a set of reference points.

    ``jac_dt`` is Dw(t, phi) @ jac, the exact time derivative of DPhi_t.
    """

    t: float
    points: np.ndarray
    phi: np.ndarray
    jac: np.ndarray
    jac_dt: np.ndarray

    def __len__(self):
        return len(self.points)


def substeps_for(span: float, dt: float) -> int:
    """Number of RK4 steps of size at most ``dt`` covering ``span``."""
    return max(1, int(math.ceil(abs(span) / dt - 1e-9)))


def _check_holdall(field_, x, t):
    r = np.sqrt(np.einsum("ni,ni->n", x, x))
    if r.size and r.max() > field_.holdall_radius:
        bad = int(np.argmax(r))
        raise DomainEscapeError(
            f"point {bad} reached |x|={r[bad]:.6g} > hold-all radius "
            f"{field_.holdall_radius:g} at t={t:.6g}"
        )


def _mul2(A, B):
    # batched 2x2 product; much faster than matmul on (N, 2, 2) stacks
    out = np.empty(np.broadcast_shapes(A.shape, B.shape))
    out[..., 0, 0] = A[..., 0, 0] * B[..., 0, 0] + A[..., 0, 1] * B[..., 1, 0]
    out[..., 0, 1] = A[..., 0, 0] * B[..., 0, 1] + A[..., 0, 1] * B[..., 1, 1]
    out[..., 1, 0] = A[..., 1, 0] * B[..., 0, 0] + A[..., 1, 1] * B[..., 1, 0]
    out[..., 1, 1] = A[..., 1, 0] * B[..., 0, 1] + A[..., 1, 1] * B[..., 1, 1]
    return out


def advance_flowmap(field_: VelocityField, points, t: float, substeps: int,
                    t0: float = 0.0, jac0=None) -> FlowMapSample:
    """Integrate the flow map and its Jacobian from ``t0`` to ``t``.

    ``points`` are positions at time ``t0``; ``jac0`` is DPhi at ``t0``
    (identity when omitted), so samples can be continued from an earlier one.
    ``t < t0`` integrates backwards.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x = np.array(points, dtype=float).reshape(-1, 2)
    n = len(x)
    J = np.broadcast_to(np.eye(2), (n, 2, 2)).copy() if jac0 is None else np.array(jac0, dtype=float)
    _check_holdall(field_, x, t0)
    h = (t - t0) / substeps
    w, Dw = field_.value, field_.jacobian
    s = t0
    for _ in range(substeps):
        k1x = w(s, x)
        k1J = _mul2(Dw(s, x), J)
        x2 = x + 0.5 * h * k1x
        k2x = w(s + 0.5 * h, x2)
        k2J = _mul2(Dw(s + 0.5 * h, x2), (J + 0.5 * h * k1J))
        x3 = x + 0.5 * h * k2x
        k3x = w(s + 0.5 * h, x3)
        k3J = _mul2(Dw(s + 0.5 * h, x3), (J + 0.5 * h * k2J))
        x4 = x + h * k3x
        k4x = w(s + h, x4)
        k4J = _mul2(Dw(s + h, x4), (J + h * k3J))
        x = x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        J = J + h / 6.0 * (k1J + 2 * k2J + 2 * k3J + k4J)
        s = s + h
        _check_holdall(field_, x, s)
    jac_dt = _mul2(Dw(t, x), J)
    return FlowMapSample(float(t), np.array(points, dtype=float).reshape(-1, 2), x, J, jac_dt)


def _advance_positions(field_, x, t0, t, substeps):
    x = np.array(x, dtype=float).reshape(-1, 2)
    _check_holdall(field_, x, t0)
    h = (t - t0) / substeps
    w = field_.value
    s = t0
    for _ in range(substeps):
        k1 = w(s, x)
        k2 = w(s + 0.5 * h, x + 0.5 * h * k1)
        k3 = w(s + 0.5 * h, x + 0.5 * h * k2)
        k4 = w(s + h, x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        s = s + h
        _check_holdall(field_, x, s)
    return x


def inverse_map(field_: VelocityField, points, t: float, substeps: int):
    """Phi_t^{-1}(points), by integrating the flow backwards from t to 0."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    return _advance_positions(field_, points, t, 0.0, substeps)


def transfer_map(field_: VelocityField, points, t_from: float, t_to: float, substeps: int):
    """Phi_{t_to} o Phi_{t_from}^{-1}: move positions along the flow."""
    if t_from == t_to:
        return np.array(points, dtype=float).reshape(-1, 2)
    return _advance_positions(field_, points, t_from, t_to, substeps)


def det_deviation(sample: FlowMapSample) -> float:
    """max |det DPhi_t - 1| over the sample points."""
    if len(sample) == 0:
        return 0.0
    return float(np.abs(np.linalg.det(sample.jac) - 1.0).max())

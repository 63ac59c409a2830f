import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from aleoseen.flowmap import (DomainEscapeError, advance_flowmap, bump_derivatives,
                              det_deviation, inverse_map, make_field, substeps_for,
                              transfer_map)

from oracles import rotation_matrix

PTS = np.random.default_rng(0).uniform(-0.7, 0.7, (30, 2))


def test_rotation_matches_closed_form():
    w = make_field("rigid-rotation", omega=1.3)
    s = advance_flowmap(w, PTS, 0.8, 800)
    R = rotation_matrix(1.3 * 0.8)
    np.testing.assert_allclose(s.phi, PTS @ R.T, atol=1e-12)
    np.testing.assert_allclose(s.jac, np.broadcast_to(R, s.jac.shape), atol=1e-12)


def test_shear_matches_closed_form():
    A = np.array([[0.2, 1.0], [-0.5, -0.2]])
    w = make_field("shear", matrix=A)
    t = 0.6
    s = advance_flowmap(w, PTS, t, 600)
    E = expm(t * A)
    np.testing.assert_allclose(s.jac, np.broadcast_to(E, s.jac.shape), atol=1e-12)
    np.testing.assert_allclose(s.phi, PTS @ E.T, atol=1e-12)


def test_unit_shear_is_affine():
    w = make_field("shear", matrix=[[0.0, 1.0], [0.0, 0.0]])
    s = advance_flowmap(w, PTS, 1.0, 10)
    np.testing.assert_allclose(s.jac, np.broadcast_to([[1.0, 1.0], [0.0, 1.0]], s.jac.shape),
                               atol=1e-14)


def test_jac_dt_is_dw_times_jac():
    w = make_field("stream-bump", center=(0.2, 0.0), radius=1.1, amplitude=0.4)
    s = advance_flowmap(w, PTS, 0.5, 100)
    np.testing.assert_allclose(s.jac_dt, w.jacobian(0.5, s.phi) @ s.jac, atol=1e-15)
    # against a centred difference of the integrated Jacobian
    a = advance_flowmap(w, PTS, 0.5 + 1e-4, 101).jac
    b = advance_flowmap(w, PTS, 0.5 - 1e-4, 99).jac
    np.testing.assert_allclose((a - b) / 2e-4, s.jac_dt, atol=1e-6)


def test_stream_bump_preserves_area():
    w = make_field("stream-bump", center=(0.1, -0.2), radius=1.3, amplitude=0.6, exponent=3)
    assert det_deviation(advance_flowmap(w, PTS, 1.0, 1000)) <= 1e-10


def test_bump_derivatives_against_differences():
    x = np.random.default_rng(1).uniform(-0.8, 0.8, (20, 2))
    args = ((0.1, 0.2), 1.1, 0.7, 4)
    psi, g, H, T = bump_derivatives(x, *args)
    e = 1e-5
    for k in range(2):
        dx = np.zeros(2)
        dx[k] = e
        p_hi, g_hi, H_hi, _ = bump_derivatives(x + dx, *args)
        p_lo, g_lo, H_lo, _ = bump_derivatives(x - dx, *args)
        np.testing.assert_allclose((p_hi - p_lo) / (2 * e), g[:, k], atol=1e-8)
        np.testing.assert_allclose((g_hi - g_lo) / (2 * e), H[:, :, k], atol=1e-7)
        np.testing.assert_allclose((H_hi - H_lo) / (2 * e), T[:, :, :, k], atol=1e-6)


def test_bump_vanishes_outside_support():
    x = np.array([[2.0, 0.0], [0.0, -1.5]])
    psi, g, H, T = bump_derivatives(x, (0.0, 0.0), 1.0, 1.0, 3)
    assert not psi.any() and not g.any() and not H.any() and not T.any()
    assert bump_derivatives(x, (0.0, 0.0), 1.0, 1.0, 3, order=1)[2] is None


def test_composite_sum_adds_components():
    a = make_field("rigid-rotation", omega=0.5)
    b = make_field("stream-bump", radius=0.9)
    c = make_field("composite-sum", components=[a, b])
    np.testing.assert_allclose(c(0.0, PTS), a(0.0, PTS) + b(0.0, PTS))
    np.testing.assert_allclose(c.jacobian(0.0, PTS), a.jacobian(0.0, PTS) + b.jacobian(0.0, PTS))
    assert np.abs(c.divergence(0.0, PTS)).max() < 1e-14


def test_continuation_matches_single_run():
    w = make_field("stream-bump", center=(0.3, 0.1), radius=1.4, amplitude=0.5)
    full = advance_flowmap(w, PTS, 1.0, 100)
    half = advance_flowmap(w, PTS, 0.5, 50)
    cont = advance_flowmap(w, half.phi, 1.0, 50, t0=0.5, jac0=half.jac)
    np.testing.assert_allclose(cont.phi, full.phi, atol=1e-14)
    np.testing.assert_allclose(cont.jac, full.jac, atol=1e-13)


def test_inverse_and_transfer_maps():
    w = make_field("stream-bump", center=(0.3, 0.1), radius=1.4, amplitude=0.5)
    fwd = advance_flowmap(w, PTS, 0.7, 700).phi
    np.testing.assert_allclose(inverse_map(w, fwd, 0.7, 700), PTS, atol=1e-12)
    mid = advance_flowmap(w, PTS, 0.3, 300).phi
    np.testing.assert_allclose(transfer_map(w, mid, 0.3, 0.7, 400), fwd, atol=1e-12)
    assert transfer_map(w, mid, 0.3, 0.3, 1) is not mid


def test_escape_from_holdall():
    w = make_field("shear", holdall_radius=3.0, matrix=[[0.0, 1.0], [0.0, 0.0]])
    with pytest.raises(DomainEscapeError, match="hold-all"):
        advance_flowmap(w, [[0.0, 2.0]], 2.0, 20)


@pytest.mark.parametrize("kind,params,match", [
    ("shear", {"matrix": [[1.0, 0.0], [0.0, 0.0]]}, "trace-free"),
    ("stream-bump", {"radius": -1.0}, "radius"),
    ("stream-bump", {"exponent": 1}, "exponent"),
    ("composite-sum", {}, "component"),
    ("vortex", {}, "unknown"),
])
def test_bad_fields_rejected(kind, params, match):
    with pytest.raises(ValueError, match=match):
        make_field(kind, **params)


def test_substeps_validation():
    w = make_field("zero")
    with pytest.raises(ValueError):
        advance_flowmap(w, PTS, 1.0, 0)
    assert substeps_for(1.0, 1e-3) == 1000
    assert substeps_for(0.0, 1e-3) == 1


@settings(max_examples=30, deadline=None)
@given(omega=st.floats(-3, 3), t=st.floats(0, 2))
def test_rotation_keeps_radius_and_unit_determinant(omega, t):
    w = make_field("rigid-rotation", omega=omega)
    s = advance_flowmap(w, PTS, t, substeps_for(t, 1e-3))
    np.testing.assert_allclose(np.linalg.norm(s.phi, axis=1), np.linalg.norm(PTS, axis=1),
                               rtol=1e-9)
    assert det_deviation(s) < 1e-9


@settings(max_examples=20, deadline=None)
@given(cx=st.floats(-0.5, 0.5), cy=st.floats(-0.5, 0.5), amp=st.floats(-1, 1),
       k=st.integers(2, 6))
def test_stream_bump_is_divergence_free(cx, cy, amp, k):
    w = make_field("stream-bump", center=(cx, cy), radius=1.0, amplitude=amp, exponent=k)
    assert np.abs(w.divergence(0.0, PTS)).max() <= 1e-12 * max(1.0, abs(amp) * 4 * k * k)

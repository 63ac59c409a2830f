"""Small hand-checkable cases for each module, with the reasoning next to them."""

import math

import numpy as np
import pytest

from aleoseen.assembly import (SaddleSystem, apply_dirichlet, assemble_convection, assemble_div,
                               assemble_load, assemble_mass, assemble_stiffness,
                               cross_mass_rhs, evaluate, interpolate_velocity, zero_function,
                               FEFunction)
from aleoseen.cli import export_vtk, parse_config_text, read_csv, read_vtk, run_study
from aleoseen.flowmap import advance_flowmap, det_deviation, inverse_map, make_field
from aleoseen.mesh import (QUAD_BARY, QUAD_WEIGHTS, at_rest, build_disk_mesh, geometry,
                           move_mesh, taylor_hood, total_area)
from aleoseen.mesh import p2_basis
from aleoseen.timestepper import RunConfig, _beta, initialize, run, solve_saddle
from aleoseen.transforms import (covariant_transform, fd_divergence, fd_jacobian,
                                 lambda_kernel, material_derivative, material_difference_term,
                                 piola_pull, piola_push)
from aleoseen.verification import (StreamBump, appendix_identity_suite, error_norms, fit_orders,
                                   make_rotation_case, transport_identity_residual)

ZERO = make_field("zero")
ROT = make_field("rigid-rotation", omega=1.0)
SHEAR = make_field("shear", matrix=[[0.0, 1.0], [0.0, 0.0]])
BUMP = StreamBump((0.1, 0.0), 0.8, 1.0, 4)


def _disk(n, radius=0.8, seed=0):
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.random(n))
    a = 2 * np.pi * rng.random(n)
    return np.column_stack([r * np.cos(a), r * np.sin(a)])


def _const(v):
    return lambda x: np.tile(np.asarray(v, float), (len(np.atleast_2d(x)), 1))


# --- flow map ------------------------------------------------------------------------

def test_field_values_by_hand():
    x = np.array([[1.0, 0.0]])
    assert not ZERO(0.0, _disk(10)).any()
    np.testing.assert_allclose(ROT(0.0, x), [[0.0, 1.0]])
    # psi = (1 - |x|^2)^2: grad psi = -4 x (1 - |x|^2) = (-1.5, 0) at (0.5, 0)
    w = make_field("stream-bump", center=(0.0, 0.0), radius=1.0, amplitude=1.0, exponent=2)
    np.testing.assert_allclose(w(0.0, [[0.5, 0.0]]), [[0.0, -1.5]], atol=1e-15)


def test_flow_map_point_values():
    s = advance_flowmap(ZERO, _disk(5), 0.7, 7)
    np.testing.assert_array_equal(s.phi, s.points)
    np.testing.assert_array_equal(s.jac, np.broadcast_to(np.eye(2), (5, 2, 2)))
    s = advance_flowmap(ROT, [[1.0, 0.0]], 1.0, 1000)
    np.testing.assert_allclose(s.phi, [[0.5403023058681398, 0.8414709848078965]], atol=1e-12)
    np.testing.assert_allclose(s.jac[0], [[math.cos(1), -math.sin(1)],
                                          [math.sin(1), math.cos(1)]], atol=1e-12)
    s = advance_flowmap(SHEAR, [[1.0, 1.0]], 1.0, 1000)
    np.testing.assert_allclose(s.phi, [[2.0, 1.0]], atol=1e-14)
    np.testing.assert_allclose(s.jac[0], [[1.0, 1.0], [0.0, 1.0]], atol=1e-14)


def test_inverse_map_values():
    X = _disk(100, 1.0)
    np.testing.assert_array_equal(inverse_map(ZERO, X, 1.0, 10), X)
    np.testing.assert_allclose(inverse_map(ROT, [[0.0, 1.0]], math.pi / 2, 1571),
                               [[1.0, 0.0]], atol=1e-12)
    w = make_field("stream-bump", center=(0.2, 0.1), radius=1.2, amplitude=0.6)
    n = 1000
    fwd = advance_flowmap(w, X, 1.0, n).phi
    assert np.abs(inverse_map(w, fwd, 1.0, n) - X).max() <= 1e-8


def test_det_deviation_values():
    X = _disk(50)
    assert det_deviation(advance_flowmap(ZERO, X, 0.0, 1)) == 0.0
    assert det_deviation(advance_flowmap(ROT, X, 2.3, 2300)) < 1e-14
    w = make_field("stream-bump", center=(0.2, 0.1), radius=1.2, amplitude=0.6)
    assert det_deviation(advance_flowmap(w, X, 1.0, 1000)) <= 1e-8


# --- transforms ----------------------------------------------------------------------

def test_push_and_pull_values():
    x = _disk(20, 0.5)
    np.testing.assert_array_equal(piola_push(ROT, BUMP.value, 0.0)(x), BUMP.value(x))
    np.testing.assert_array_equal(piola_pull(ROT, BUMP.value, 0.0)(x), BUMP.value(x))
    np.testing.assert_allclose(piola_push(ROT, _const([1, 0]), math.pi / 2)(x),
                               _const([0, 1])(x), atol=1e-12)
    np.testing.assert_allclose(piola_push(SHEAR, _const([0, 1]), 1.0, domain_radius=None)(x),
                               _const([1, 1])(x), atol=1e-12)
    np.testing.assert_allclose(piola_pull(ROT, _const([0, 1]), math.pi / 2)(x),
                               _const([1, 0])(x), atol=1e-12)


def test_push_then_pull_at_many_points():
    w = make_field("stream-bump", center=(0.2, -0.1), radius=1.3, amplitude=0.5)
    X = _disk(200)
    back = piola_pull(w, piola_push(w, BUMP.value, 0.8), 0.8)
    assert np.abs(back(X) - BUMP.value(X)).max() <= 1e-8


def test_covariant_examples():
    v = lambda X: np.column_stack([np.cos(X[:, 1]), X[:, 0] ** 2])
    x = _disk(30, 0.6)
    np.testing.assert_array_equal(covariant_transform(ROT, v, 0.0, "push")(x), v(x))
    # orthogonal Jacobian: covariant and contravariant transforms agree
    diff = covariant_transform(ROT, v, 0.9, "push")(x) - piola_push(ROT, v, 0.9)(x)
    assert np.abs(diff).max() <= 1e-10


def test_covariant_duality_integral():
    w = make_field("stream-bump", center=(0.2, -0.1), radius=1.3, amplitude=0.5)
    t = 0.7
    geo = geometry(at_rest(build_disk_mesh(0.2)))
    X = geo.qpoints.reshape(-1, 2)
    wq = (geo.area[:, None] * QUAD_WEIGHTS).ravel()
    eta = lambda x: np.column_stack([np.sin(x[:, 0] + x[:, 1]), 1 + x[:, 0] * x[:, 1]])
    x = advance_flowmap(w, X, t, 700).phi
    # det DPhi = 1, so integrals over Omega(t) are integrals over Omega_0 of the composition
    lhs = np.sum(wq * np.einsum("ni,ni->n", piola_push(w, BUMP.value, t)(x), eta(x)))
    rhs = np.sum(wq * np.einsum("ni,ni->n", BUMP.value(X),
                                covariant_transform(w, eta, t, "pull")(X)))
    assert abs(lhs - rhs) <= 1e-8 * abs(rhs)


def test_kernel_of_zero_field():
    assert not lambda_kernel(ZERO, 0.5)(_disk(10)).any()


def test_material_derivatives():
    x = _disk(20, 0.5)
    static = lambda s, y: BUMP.value(y)
    for conv in ("phi", "w"):
        assert np.abs(material_derivative(ZERO, static, 0.5, conv)(x)).max() < 1e-10
    w = make_field("stream-bump", center=(0.2, -0.1), radius=1.3, amplitude=0.5)
    u = lambda s, y: np.column_stack([np.sin(s + y[:, 1]), np.cos(s * y[:, 0])])
    y = advance_flowmap(w, x, 0.6, 600).phi
    d_phi = material_derivative(w, u, 0.6, "phi")(y)
    d_w = material_derivative(w, u, 0.6, "w")(y)
    expect = material_difference_term(w, u, 0.6)(y)
    rel = np.abs((d_phi - d_w) - expect).max() / np.abs(expect).max()
    assert rel <= 1e-5


# --- mesh ----------------------------------------------------------------------------

def test_disk_mesh_areas():
    coarse = build_disk_mesh(0.5)
    assert abs(total_area(coarse) - math.pi) <= 0.05 * math.pi
    defects = [math.pi - total_area(build_disk_mesh(h)) for h in (0.2, 0.1, 0.05)]
    ratios = [defects[i] / defects[i + 1] for i in range(2)]
    assert all(3.5 <= r <= 4.5 for r in ratios)


def test_moved_mesh_examples():
    mesh = build_disk_mesh(0.2)
    np.testing.assert_array_equal(move_mesh(mesh, ZERO, 0.8, 8).vertices, mesh.vertices)
    d1, d2 = taylor_hood(mesh), taylor_hood(mesh)
    assert len(d1.boundary_velocity) > 0
    np.testing.assert_array_equal(d1.element_velocity, d2.element_velocity)
    np.testing.assert_array_equal(d1.boundary_velocity, d2.boundary_velocity)


# --- assembly ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def moved():
    w = make_field("stream-bump", center=(0.2, -0.1), radius=1.3, amplitude=0.5)
    return move_mesh(build_disk_mesh(0.15), w, 0.5, 50)


def test_mass_and_stiffness_identities(moved):
    area = total_area(moved)
    M = assemble_mass(moved)
    K = assemble_stiffness(moved)
    n = moved.n_nodes
    one = np.concatenate([np.ones(n), np.zeros(n)])
    assert one @ M @ one == pytest.approx(area, rel=1e-13)
    assert abs(M - M.T).max() == 0 and abs(K - K.T).max() == 0
    u = interpolate_velocity(moved, lambda x: np.column_stack([x[:, 0], 0 * x[:, 0]]),
                             zero_boundary=False).values
    assert u @ K @ u == pytest.approx(area, rel=1e-12)


def test_convection_examples(moved):
    cfg = RunConfig(w=ROT, V=ROT, tau=0.1, T=0.1)
    assert _beta(cfg, 0.1) is None
    assert assemble_convection(moved, _beta(cfg, 0.1)).nnz == 0
    # divergence-free beta and u vanishing on the boundary: u^T C u = 0. A linear
    # beta keeps the integrand inside the exactness degree of the rule.
    beta = lambda x: np.column_stack([0.3 - 2 * x[:, 1], x[:, 0] + 0.1])
    C = assemble_convection(moved, beta)
    u = interpolate_velocity(moved, BUMP.value).values
    assert abs(u @ C @ u) <= 1e-12 * np.abs(u).max() ** 2


def test_divergence_examples(moved):
    B, m = assemble_div(moved)
    n = moved.n_nodes
    const = np.concatenate([np.full(n, 2.0), np.full(n, -1.0)])
    assert np.abs(B @ const).max() < 1e-13
    assert m @ np.ones(moved.n_vertices) == pytest.approx(total_area(moved), rel=1e-13)


def test_interpolant_divergence_shrinks_like_h2():
    res = []
    for h in (0.2, 0.1, 0.05):
        mesh = at_rest(build_disk_mesh(h))
        B, _ = assemble_div(mesh)
        res.append(np.abs(B @ interpolate_velocity(mesh, BUMP.value).values).max())
    # a max-entry proxy: each entry integrates over a patch of area h^2, so the
    # h^2 pointwise divergence error shows up as h^4
    assert res[0] / res[1] > 4 and res[1] / res[2] > 4


def test_cross_mass_examples():
    mesh = build_disk_mesh(0.2)
    old = move_mesh(mesh, ROT, 0.3, 300)
    u = interpolate_velocity(old, BUMP.value)
    np.testing.assert_array_equal(cross_mass_rhs(old, u, old), assemble_mass(old) @ u.values)
    assert not cross_mass_rhs(old, zero_function(old, "velocity")).any()


def test_cross_mass_against_composed_quadrature():
    rng = np.random.default_rng(7)
    errs = []
    for h in (0.2, 0.1):
        mesh = build_disk_mesh(h)
        old = move_mesh(mesh, ROT, 0.3, 300)
        new = move_mesh(mesh, ROT, 0.4, 100, start=old)
        u = interpolate_velocity(old, lambda x: BUMP.value(x @ np.array(
            [[math.cos(0.3), -math.sin(0.3)], [math.sin(0.3), math.cos(0.3)]])))
        rhs = cross_mass_rhs(old, u, new)
        geo = geometry(old)
        x = geo.qpoints.reshape(-1, 2)
        wq = (geo.area[:, None] * QUAD_WEIGHTS).ravel()
        c = rng.standard_normal(2 * mesh.n_nodes)
        c[taylor_hood(mesh).boundary_velocity] = 0.0
        R = np.array([[math.cos(0.1), -math.sin(0.1)], [math.sin(0.1), math.cos(0.1)]])
        eta = FEFunction(c, "velocity", 0.4, new)
        direct = np.sum(wq * np.einsum("ni,ni->n", u(x), eta(x @ R.T)))
        errs.append(abs(direct - c @ rhs) / abs(direct))
    assert errs[-1] <= errs[0] and errs[-1] < 1e-6


def test_load_examples(moved):
    assert not assemble_load(moved, _const([0, 0])).any()
    b = assemble_load(moved, _const([1, 0]))
    assert b[:moved.n_nodes].sum() == pytest.approx(total_area(moved), rel=1e-13)


def test_manufactured_load_against_refined_quadrature():
    # exponent 8 keeps f four times differentiable across the edge of the bump
    # support; with lower exponents the elements cut by that circle dominate the gap
    case = make_rotation_case(omega=5.0, center=(0.1, 0.0), radius=0.9, amplitude=0.1,
                              exponent=8)
    mesh = at_rest(build_disk_mesh(0.04))
    f = lambda x: case.forcing(0.3, x)
    b = assemble_load(mesh, f)
    # split every triangle into four and integrate with the same rule on each
    ref = np.zeros_like(b)
    v = mesh.vertices[mesh.triangles]
    mids = [(0, 1), (1, 2), (2, 0)]
    corners = np.eye(3)
    mid_bary = [0.5 * (corners[i] + corners[j]) for i, j in mids]
    subs = [(corners[0], mid_bary[0], mid_bary[2]), (mid_bary[0], corners[1], mid_bary[1]),
            (mid_bary[2], mid_bary[1], corners[2]), (mid_bary[0], mid_bary[1], mid_bary[2])]
    area = geometry(mesh).area
    nodes = mesh.element_nodes
    n = mesh.n_nodes
    for sub in subs:
        lam = QUAD_BARY @ np.array(sub)                 # (Q, 3) parent coordinates
        x = np.einsum("qk,tkd->tqd", lam, v)
        fv = f(x.reshape(-1, 2)).reshape(len(v), -1, 2)
        phi = p2_basis(lam)                             # (Q, 6)
        loc = np.einsum("q,t,qa,tqd->tda", QUAD_WEIGHTS, area / 4, phi, fv)
        np.add.at(ref, nodes.ravel(), loc[:, 0].ravel())
        np.add.at(ref, nodes.ravel() + n, loc[:, 1].ravel())
    assert np.abs(b - ref).max() <= 1e-8


def test_dirichlet_examples(moved):
    dofs = taylor_hood(moved)
    B, m = assemble_div(moved)
    A = assemble_mass(moved) + 0.1 * assemble_stiffness(moved)
    r = np.random.default_rng(1).standard_normal(A.shape[0])
    system = SaddleSystem(A, -0.1 * B, r, m=m, boundary=dofs.boundary_velocity)
    reduced = apply_dirichlet(system)
    sol = solve_saddle(reduced)
    assert not sol.u[dofs.boundary_velocity].any()
    interior = np.setdiff1d(np.arange(A.shape[0]), dofs.boundary_velocity)
    assert abs(reduced.B[:, interior] - system.B[:, interior]).max() == 0
    plain = SaddleSystem(A, B, r, m=m)
    assert apply_dirichlet(plain) is plain


# --- time stepping -------------------------------------------------------------------

def test_initial_states():
    cfg = RunConfig(w=ROT, V=ROT, tau=0.1, T=0.1, h=0.2)
    assert not initialize(cfg).u.values.any()
    res = []
    for h in (0.2, 0.1, 0.05):
        s = initialize(RunConfig(w=ROT, V=ROT, tau=0.1, T=0.1, h=h, u0=BUMP.field()))
        assert not s.u.values[taylor_hood(s.mesh).boundary_velocity].any()
        B, _ = assemble_div(s.mesh)
        res.append(np.abs(B @ s.u.values).max())
    assert res[0] / res[1] > 4 and res[1] / res[2] > 4


def test_energy_strictly_decreases_without_flow():
    traj = run(RunConfig(w=ZERO, V=ZERO, tau=0.05, T=0.5, h=0.15, u0=BUMP.field()))
    u0 = traj.states[0].u.values
    E = [0.5 * u0 @ assemble_mass(traj.states[0].mesh) @ u0]
    E += [d.kinetic_energy for d in traj.diagnostics]
    assert all(b < a for a, b in zip(E, E[1:]))


def test_interpolation_endpoints_to_tolerance():
    from aleoseen.timestepper import interpolate_state
    traj = run(RunConfig(w=SHEAR, V=SHEAR, tau=0.1, T=0.2, h=0.15, u0=BUMP.field()))
    x = _disk(20, 0.5)
    for k in (1, 2):
        s = traj.states[k]
        pts = advance_flowmap(SHEAR, x, s.t, 100).phi
        assert np.abs(interpolate_state(traj, s.t)(pts) - s.u(pts)).max() <= 1e-10


# --- verification --------------------------------------------------------------------

def test_manufactured_forcing_matches_strong_operator():
    case = make_rotation_case(omega=1.5, center=(0.05, 0.0), radius=0.9, exponent=4)
    x = np.array([[0.5, 0.0]])
    e = 1e-4
    u = case.velocity
    dt = (u(e, x) - u(-e, x)) / (2 * e)
    Du = fd_jacobian(lambda y: u(0.0, y), x, e)
    lap = sum((u(0.0, x + e * d) - 2 * u(0.0, x) + u(0.0, x - e * d)) / e ** 2
              for d in np.eye(2))
    grad_p = fd_jacobian(lambda y: np.column_stack([case.pressure(0.0, y)] * 2), x, e)[:, 0]
    strong = dt + np.einsum("nij,nj->ni", Du, case.V(0.0, x)) - lap + grad_p
    assert np.abs(case.forcing(0.0, x) - strong).max() <= 1e-5


def test_manufactured_solution_divergence_free():
    case = make_rotation_case(omega=1.5, center=(0.05, 0.0), radius=0.9, exponent=4)
    x = _disk(100, 0.95)
    for t in np.linspace(0, 1, 5):
        assert np.abs(fd_divergence(lambda y: case.velocity(t, y), x, 1e-4)).max() <= 1e-6


def test_error_norm_examples():
    mesh = at_rest(build_disk_mesh(0.3))
    zero = zero_function(mesh, "velocity")
    assert error_norms(mesh, zero, StreamBump(radius=0.5, amplitude=0.0).field()) == (0.0, 0.0)
    f = StreamBump((0.1, 0.0), 0.8, 1.0, 4)
    errs = []
    for h in (0.1, 0.05):
        m = at_rest(build_disk_mesh(h))
        errs.append(error_norms(m, interpolate_velocity(m, f.value), f.field())[0])
    order = math.log(errs[0] / errs[1]) / math.log(2)
    assert 2.7 <= order <= 3.3


def test_order_arithmetic():
    assert fit_orders([0.1, 0.05], [0.4, 0.2])[1] == pytest.approx(1.0)
    assert fit_orders([0.1, 0.05], [0.08, 0.02])[1] == pytest.approx(2.0)


def test_transport_examples():
    u, v = BUMP.value, StreamBump((-0.1, 0.1), 0.8, 1.0, 4).value
    mesh = build_disk_mesh(0.2)
    assert transport_identity_residual(ZERO, u, v, 0.5, 1e-3, mesh) == 0.0
    for delta, h in ((1e-3, 0.1), (5e-4, 0.05)):
        r = transport_identity_residual(SHEAR, u, v, 0.5, delta, build_disk_mesh(h))
        assert r <= 5 * (delta ** 2 + h ** 2)


def test_identity_suite_examples():
    mesh = build_disk_mesh(0.3)
    zero = appendix_identity_suite(ZERO, 0.5, n_points=20, mesh=mesh)
    assert zero.passed
    assert zero.get("jacobi").value == 0.0
    rot = appendix_identity_suite(ROT, 0.5, n_points=20, mesh=mesh)
    push = rot.get("push_H")
    assert push.passed and push.value / push.bound == pytest.approx(1.0, abs=1e-12)
    shear = appendix_identity_suite(SHEAR, 1.0, n_points=50, mesh=mesh)
    assert shear.get("jacobi").value <= 1e-6


# --- command line --------------------------------------------------------------------

SMOKE = "[domain]\nh = 0.3\n[flow]\nkind = zero\n[time]\ntau = 0.1\nT = 0.1\n"


def test_smoke_run(tmp_path, monkeypatch):
    monkeypatch.setenv("ALEOSEEN_OUTPUT_DIR", str(tmp_path))
    assert run_study(parse_config_text(SMOKE), log=lambda *_: None) == 0
    _, rows = read_csv(tmp_path / "diagnostics.csv")
    assert len(rows) == 1


def test_geometry_only_vtk(tmp_path):
    mesh = at_rest(build_disk_mesh(0.4))
    path = export_vtk(mesh, None, tmp_path / "g.vtk")
    text = path.read_text()
    assert text.splitlines()[0] == "# vtk DataFile Version 3.0"
    assert f"POINTS {mesh.n_vertices} double" in text
    assert "POINT_DATA" not in text
    assert len(read_vtk(path)["points"]) == mesh.n_vertices

"""
Command line front end: config files, runs, studies and file export.

Config files are INI-style (``configparser``); see README for the grammar.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .flowmap import KINDS, make_field
from .mesh import build_disk_mesh, taylor_hood, total_area
from .timestepper import RunConfig, StepFailure, run
from .transforms import PointwiseField
from .verification import StreamBump, convergence_study, error_norms, make_rotation_case

OUTPUT_ENV = "ALEOSEEN_OUTPUT_DIR"
_ZERO = PointwiseField(lambda x: np.zeros((len(x), 2)), lambda x: np.zeros((len(x), 2, 2)))
ERRORS_HEADER = ["tau", "l2_error", "h1_error", "order_l2", "order_h1", "runtime_s"]
DIAGNOSTICS_HEADER = ["tau", "step", "t", "iterations", "residual", "divergence",
                      "kinetic_energy"]
VTK_HEADER = "# vtk DataFile Version 3.0"

FIELD_KEYS = {"kind", "omega", "matrix", "center", "radius", "amplitude", "exponent",
              "components"}
SCHEMA = {
    "domain": {"h", "holdall_radius"},
    "flow": FIELD_KEYS,
    "advection": FIELD_KEYS,
    "forcing": {"kind", "u0", "center", "radius", "amplitude", "exponent",
                "pressure_amplitude"},
    "time": {"tau", "taus", "T", "substeps"},
    "solver": {"tol", "maxiter", "method", "skew", "reaction"},
    "output": {"directory", "csv", "vtk_stride", "timing"},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OutputOptions:
    directory: str = "output"
    csv: bool = True
    vtk_stride: int = 0
    timing: bool = False


# --- parsing -------------------------------------------------------------------------

class _Section:
    """Typed accessors that record resolved values and name the key on error."""

    def __init__(self, parser, name, resolved):
        self.name = name
        self.data = dict(parser[name]) if parser.has_section(name) else {}
        self.resolved = resolved.setdefault(name, {})

    def _fail(self, key, msg):
        raise ConfigError(f"{self.name}.{key}: {msg}")

    def has(self, key):
        return key in self.data

    def raw(self, key, default=None, required=False):
        if key in self.data:
            return self.data[key].strip()
        if required:
            self._fail(key, "missing required key")
        return default

    def number(self, key, default=None, required=False, lo=None, hi=None,
               lo_open=False, integer=False):
        text = self.raw(key, None, required)
        if text is None:
            value = default
        else:
            try:
                value = int(text) if integer else float(text)
            except ValueError:
                self._fail(key, f"expected {'an integer' if integer else 'a number'}, got {text!r}")
            if not math.isfinite(value):
                self._fail(key, f"must be finite, got {text}")
        if value is not None:
            if lo is not None and (value < lo or (lo_open and value == lo)):
                self._fail(key, f"must be {'>' if lo_open else '>='} {lo:g}, got {value:g}")
            if hi is not None and value > hi:
                self._fail(key, f"must be <= {hi:g}, got {value:g}")
        self.resolved[key] = value
        return value

    def vector(self, key, n, default=None):
        text = self.raw(key)
        if text is None:
            value = default
        else:
            try:
                value = tuple(float(v) for v in text.replace(",", " ").split())
            except ValueError:
                self._fail(key, f"expected {n} numbers, got {text!r}")
            if len(value) != n or not all(math.isfinite(v) for v in value):
                self._fail(key, f"expected {n} finite numbers, got {text!r}")
        self.resolved[key] = value
        return value

    def flag(self, key, default):
        text = self.raw(key)
        if text is None:
            value = default
        else:
            low = text.lower()
            if low in ("on", "true", "yes", "1"):
                value = True
            elif low in ("off", "false", "no", "0"):
                value = False
            else:
                self._fail(key, f"expected on/off, got {text!r}")
        self.resolved[key] = value
        return value

    def choice(self, key, options, default=None, required=False):
        value = self.raw(key, default, required)
        if value not in options:
            self._fail(key, f"must be one of {', '.join(options)}, got {value!r}")
        self.resolved[key] = value
        return value


def _check_keys(parser):
    for name in parser.sections():
        base = name.split(".", 1)[0]
        if base not in SCHEMA or (name != base and base != "flow"):
            raise ConfigError(f"unknown section [{name}]")
        allowed = SCHEMA["flow"] if name.startswith("flow.") else SCHEMA[base]
        for key in parser[name]:
            if key not in allowed:
                raise ConfigError(f"{name}.{key}: unknown key")


def _field_from(parser, sec: _Section, holdall, resolved, depth=0):
    kind = sec.choice("kind", KINDS, required=True)
    try:
        if kind == "zero":
            return make_field("zero", holdall_radius=holdall)
        if kind == "rigid-rotation":
            return make_field(kind, holdall_radius=holdall,
                              omega=sec.number("omega", required=True))
        if kind == "shear":
            m = sec.vector("matrix", 4)
            if m is None:
                sec._fail("matrix", "missing required key")
            return make_field(kind, holdall_radius=holdall,
                              matrix=np.array(m).reshape(2, 2))
        if kind == "stream-bump":
            return make_field(kind, holdall_radius=holdall,
                              center=sec.vector("center", 2, (0.0, 0.0)),
                              radius=sec.number("radius", 1.0, lo=0.0, lo_open=True),
                              amplitude=sec.number("amplitude", 1.0),
                              exponent=sec.number("exponent", 3, lo=2, integer=True))
        names = (sec.raw("components") or "").split()
        if not names:
            sec._fail("components", "composite-sum needs at least one component section")
        if depth > 4:
            sec._fail("components", "nesting too deep")
        sec.resolved["components"] = " ".join(names)
        parts = []
        for n in names:
            full = f"flow.{n}"
            if not parser.has_section(full):
                sec._fail("components", f"no section [{full}]")
            parts.append(_field_from(parser, _Section(parser, full, resolved), holdall,
                                     resolved, depth + 1))
        return make_field("composite-sum", holdall_radius=holdall, components=parts)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{sec.name}: {exc}") from exc


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    _check_keys(parser)
    resolved: Dict[str, dict] = {}
    S = lambda name: _Section(parser, name, resolved)  # noqa: E731

    dom = S("domain")
    h = dom.number("h", required=True, lo=0.0, lo_open=True, hi=1.0)
    if h >= 1.0:
        dom._fail("h", f"must be < 1, got {h:g}")
    holdall = dom.number("holdall_radius", 3.0, lo=1.0, lo_open=True)

    w = _field_from(parser, S("flow"), holdall, resolved)
    adv = S("advection")
    if adv.raw("kind", "equal-w") == "equal-w":
        adv.resolved["kind"] = "equal-w"
        for key in adv.data:
            if key != "kind":
                adv._fail(key, "not allowed with kind = equal-w")
        V = w
    else:
        V = _field_from(parser, adv, holdall, resolved)

    tm = S("time")
    if tm.has("tau") and tm.has("taus"):
        tm._fail("taus", "give either tau or taus, not both")
    if tm.has("taus"):
        try:
            taus = tuple(float(v) for v in tm.raw("taus").replace(",", " ").split())
        except ValueError:
            tm._fail("taus", f"expected a list of numbers, got {tm.raw('taus')!r}")
        if not taus or any(not (t > 0 and math.isfinite(t)) for t in taus):
            tm._fail("taus", "all step sizes must be finite and > 0")
        taus = tuple(sorted(taus, reverse=True))
        tm.resolved["taus"] = " ".join(f"{t:.17g}" for t in taus)
        tau = taus[0]
    else:
        tau = tm.number("tau", required=True, lo=0.0, lo_open=True)
        taus = (tau,)
    T = tm.number("T", required=True, lo=0.0, lo_open=True)
    if T < tau:
        tm._fail("T", f"must be >= the largest tau ({tau:g}), got {T:g}")
    substeps = tm.number("substeps", 10, lo=1, integer=True)

    sol = S("solver")
    tol = sol.number("tol", 1e-10, lo=0.0, lo_open=True, hi=1e-4)
    maxiter = sol.number("maxiter", 500, lo=1, integer=True)
    method = sol.choice("method", ("auto", "direct", "schur"), "auto")
    skew = sol.flag("skew", False)
    reaction = sol.number("reaction", 0.0, lo=0.0)

    out = S("output")
    options = OutputOptions(directory=out.raw("directory", "output"),
                            csv=out.flag("csv", True),
                            vtk_stride=out.number("vtk_stride", 0, lo=0, integer=True),
                            timing=out.flag("timing", False))
    out.resolved["directory"] = options.directory

    frc = S("forcing")
    kind = frc.choice("kind", ("zero", "manufactured:rotation"), "zero")
    case = None
    forcing = None
    u0 = None
    if kind == "manufactured:rotation":
        if w.kind != "rigid-rotation":
            frc._fail("kind", "manufactured:rotation needs flow.kind = rigid-rotation")
        if frc.has("u0"):
            frc._fail("u0", "initial data is fixed by the manufactured case")
        try:
            case = make_rotation_case(
                omega=w.params["omega"],
                center=frc.vector("center", 2, (0.0, 0.0)),
                radius=frc.number("radius", 1.0, lo=0.0, lo_open=True),
                amplitude=frc.number("amplitude", 1.0),
                exponent=frc.number("exponent", 4, lo=2, integer=True),
                advection=None if adv.resolved["kind"] == "equal-w" else V,
                pressure_amplitude=frc.number("pressure_amplitude", 1.0),
                holdall_radius=holdall)
        except ValueError as exc:
            raise ConfigError(f"forcing: {exc}") from exc
        w, V = case.w, case.V
        u0, forcing = case.u0, case.forcing
    else:
        choice = frc.choice("u0", ("none", "bump"), "none")
        if frc.has("pressure_amplitude"):
            frc._fail("pressure_amplitude", "only used by manufactured forcing")
        if choice == "bump":
            bump = StreamBump(frc.vector("center", 2, (0.0, 0.0)),
                              frc.number("radius", 1.0, lo=0.0, lo_open=True),
                              frc.number("amplitude", 1.0),
                              frc.number("exponent", 4, lo=2, integer=True))
            u0 = bump.field()
        else:
            for key in ("center", "radius", "amplitude", "exponent"):
                if frc.has(key):
                    frc._fail(key, "only used with u0 = bump")

    try:
        return RunConfig(w=w, V=V, tau=tau, T=T, h=h, u0=u0, forcing=forcing,
                         substeps=substeps, tol=tol, maxiter=maxiter, reaction=reaction,
                         skew=skew, solver=method, taus=taus, output=options, case=case,
                         settings=resolved)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path) -> RunConfig:
    """Read and validate a config file; missing or bad keys raise ConfigError."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def format_settings(config: RunConfig) -> str:
    """Resolved settings (defaults included) as INI text."""
    lines = []
    for section, values in (config.settings or {}).items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if isinstance(value, bool):
                value = "on" if value else "off"
            elif isinstance(value, tuple):
                value = " ".join(f"{v:.17g}" for v in value)
            elif isinstance(value, float):
                value = f"{value:.17g}"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


# --- files ----------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, rows


def export_vtk(mesh, fields=None, path="out.vtk", title="aleoseen"):
    """Legacy ASCII VTK unstructured grid of the (moved) mesh.

    ``fields`` maps names to velocity or pressure FEFunctions on ``mesh``;
    velocities become VECTORS and pressures SCALARS, both at vertices.
    """
    fields = dict(fields or {})
    for name, fn in fields.items():
        if fn.mesh is not mesh:
            raise ValueError(f"field {name!r} does not live on the exported mesh")
    verts = mesh.vertices
    tris = mesh.triangles
    nv = len(verts)
    lines = [VTK_HEADER, title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {nv} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in verts]
    lines.append(f"CELLS {len(tris)} {4 * len(tris)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in tris]
    lines.append(f"CELL_TYPES {len(tris)}")
    lines += ["5"] * len(tris)
    if fields:
        lines.append(f"POINT_DATA {nv}")
        for name, fn in fields.items():
            if fn.space == "velocity":
                ux, uy = fn.components()
                lines.append(f"VECTORS {name} double")
                lines += [f"{a:.17g} {b:.17g} 0" for a, b in zip(ux[:nv], uy[:nv])]
            else:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines += [f"{v:.17g}" for v in fn.values[:nv]]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc}") from exc
    return Path(path)


def read_vtk(path):
    """Parse files written by :func:`export_vtk` back into arrays."""
    tokens = Path(path).read_text().split("\n")
    if tokens[0] != VTK_HEADER:
        raise ValueError("not a legacy VTK file")
    it = iter(tokens[4:])
    out = {"vectors": {}, "scalars": {}}
    for line in it:
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "POINTS":
            n = int(parts[1])
            out["points"] = np.array([[float(v) for v in next(it).split()] for _ in range(n)])
        elif tag == "CELLS":
            n = int(parts[1])
            out["cells"] = np.array([[int(v) for v in next(it).split()[1:]] for _ in range(n)])
        elif tag == "CELL_TYPES":
            out["cell_types"] = np.array([int(next(it)) for _ in range(int(parts[1]))])
        elif tag == "POINT_DATA":
            n = int(parts[1])
        elif tag == "VECTORS":
            out["vectors"][parts[1]] = np.array(
                [[float(v) for v in next(it).split()] for _ in range(n)])
        elif tag == "SCALARS":
            next(it)  # lookup table
            out["scalars"][parts[1]] = np.array([float(next(it)) for _ in range(n)])
    return out


# --- orchestration --------------------------------------------------------------------

def output_directory(config: RunConfig) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    base = env if env else (config.output.directory if config.output else "output")
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _export_states(traj, out_dir, index, stride):
    if stride <= 0:
        return
    for n, state in enumerate(traj.states):
        if n % stride == 0:
            export_vtk(state.mesh, {"velocity": state.u, "pressure": state.p},
                       out_dir / f"state_{index:02d}_{n:05d}.vtk",
                       title=f"tau={traj.config.tau:.17g} t={state.t:.17g}")


def run_study(config: RunConfig, guard: Optional[bool] = None, log=print) -> int:
    """Run every tau of the config and write the CSV tables.

    Returns 0 on success, 1 on solver failure and 2 when the spatial-error
    guard marks a convergence study invalid.
    """
    options = config.output or OutputOptions()
    out_dir = output_directory(config)
    taus = tuple(config.taus) or (config.tau,)
    if guard is None:
        guard = config.case is not None and len(taus) > 1
    mesh = build_disk_mesh(config.h)
    trajs = {}
    err_rows = []
    status = 0

    def collect(tau, traj):
        trajs[tau] = traj

    try:
        if config.case is not None:
            report = convergence_study(config.case, taus, config.h, config.T,
                                       substeps=config.substeps, tol=config.tol, guard=guard,
                                       mesh=mesh, timing=options.timing, on_run=collect)
            err_rows = report.rows()
            if not report.valid:
                log(f"study invalid: {report.note}")
                status = 2
            elif report.note:
                log(report.note)
        else:
            zero_solution = config.u0 is None and config.forcing is None
            for tau in taus:
                start = time.perf_counter()
                traj = run(replace(config, tau=tau), mesh=mesh)
                elapsed = time.perf_counter() - start if options.timing else 0.0
                collect(tau, traj)
                l2 = h1 = float("nan")
                if zero_solution:
                    l2, h1 = error_norms(traj.final.mesh, traj.final.u, _ZERO)
                err_rows.append((tau, l2, h1, float("nan"), float("nan"), elapsed))
    except StepFailure as exc:
        log(f"solver failure: {exc}")
        status = 1
    diag_rows = []
    for i, tau in enumerate(sorted(trajs, reverse=True)):
        for d in trajs[tau].diagnostics:
            diag_rows.append((tau, d.step, d.t, d.iterations, d.residual, d.divergence,
                              d.kinetic_energy))
        _export_states(trajs[tau], out_dir, i, options.vtk_stride)
    if options.csv:
        write_csv(out_dir / "diagnostics.csv", DIAGNOSTICS_HEADER, diag_rows)
        if err_rows:
            write_csv(out_dir / "errors.csv", ERRORS_HEADER, err_rows)
    for row in err_rows:
        log("tau=%.6g  L2=%.6e  H1=%.6e  order_L2=%.3f  order_H1=%.3f" % row[:5])
    return status


def mesh_info(config: RunConfig) -> Dict[str, float]:
    mesh = build_disk_mesh(config.h)
    dofs = taylor_hood(mesh)
    return {"h_target": config.h, "h": mesh.h, "vertices": mesh.n_vertices,
            "triangles": len(mesh.triangles), "edges": mesh.n_edges,
            "boundary_vertices": int(mesh.boundary_vertex.sum()),
            "velocity_dofs": dofs.n_velocity, "pressure_dofs": dofs.n_pressure,
            "area": total_area(mesh), "area_defect": math.pi - total_area(mesh)}


def verify(log=print) -> bool:
    """Flow-map oracles, lambda-kernel identities and the identity suite."""
    from .flowmap import advance_flowmap, det_deviation
    from .transforms import lambda_kernel
    from .verification import appendix_identity_suite

    ok = True

    def report(name, passed, detail=""):
        nonlocal ok
        ok = ok and passed
        log(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")

    rot = make_field("rigid-rotation", omega=1.0)
    s = advance_flowmap(rot, [[1.0, 0.0]], 1.0, 1000)
    err = max(np.abs(s.phi[0] - [math.cos(1), math.sin(1)]).max(),
              np.abs(s.jac[0] - [[math.cos(1), -math.sin(1)], [math.sin(1), math.cos(1)]]).max())
    report("rotation flow map", err <= 1e-8, f"err={err:.2e}")
    shear = make_field("shear", matrix=[[0.0, 1.0], [0.0, 0.0]])
    s = advance_flowmap(shear, [[1.0, 1.0]], 1.0, 1000)
    err = max(np.abs(s.phi[0] - [2, 1]).max(), np.abs(s.jac[0] - [[1, 1], [0, 1]]).max())
    report("shear flow map", err <= 1e-8, f"err={err:.2e}")
    bump = make_field("stream-bump", center=(0.1, 0.0), radius=1.2, amplitude=0.5)
    pts = np.random.default_rng(0).uniform(-0.6, 0.6, (50, 2))
    dev = det_deviation(advance_flowmap(bump, pts, 1.0, 1000))
    report("stream-bump det", dev <= 1e-8, f"dev={dev:.2e}")
    x = np.random.default_rng(1).uniform(-0.5, 0.5, (20, 2))
    k_rot = np.abs(lambda_kernel(rot, 0.7)(x)).max()
    report("lambda kernel rotation", k_rot <= 1e-12, f"max={k_rot:.2e}")
    k_sh = np.abs(lambda_kernel(shear, 0.7)(x) - [[0, 1], [1, 0]]).max()
    report("lambda kernel shear", k_sh <= 1e-8, f"err={k_sh:.2e}")
    fields = {"zero": make_field("zero"), "rigid-rotation": rot, "shear": shear,
              "stream-bump": bump,
              "composite-sum": make_field("composite-sum", components=[rot, bump])}
    for name, f in fields.items():
        for t in (0.1, 0.5, 1.0):
            r = appendix_identity_suite(f, t)
            worst = ", ".join(f"{c.name}={c.value:.2e}/{c.bound:.2e}" for c in r.checks
                              if c.name in ("div_push", "jacobi"))
            report(f"identities {name} t={t:g}", r.passed, worst)
    return ok


# --- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aleoseen",
                                description="Moving-domain Oseen solver and verification tools")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run one trajectory per tau (no spatial guard)"),
                        ("study", "convergence study over the tau list"),
                        ("mesh-info", "print mesh statistics for the configured h")):
        sp_ = sub.add_parser(name, help=help_)
        sp_.add_argument("config")
    sub.add_parser("verify", help="run the identity and oracle checks")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        return 0 if verify() else 1
    try:
        config = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "mesh-info":
        for key, value in mesh_info(config).items():
            print(f"{key}: {value}")
        return 0
    print(format_settings(config))
    if args.command == "study" and config.case is None:
        print("study needs forcing.kind = manufactured:rotation", file=sys.stderr)
        return 2
    return run_study(config, guard=(args.command == "study"))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Moving-domain parabolic Oseen solver built on flow maps and Piola transforms."""

from .flowmap import (DomainEscapeError, FlowMapSample, VelocityField, advance_flowmap,
                      det_deviation, inverse_map, make_field)
from .mesh import Mesh, MovedMesh, build_disk_mesh, move_mesh, taylor_hood
from .timestepper import RunConfig, Trajectory, run, solve_saddle, step
from .transforms import PointwiseField, lambda_kernel, piola_pull, piola_push

__all__ = [
    "DomainEscapeError", "FlowMapSample", "VelocityField", "advance_flowmap", "det_deviation",
    "inverse_map", "make_field", "Mesh", "MovedMesh", "build_disk_mesh", "move_mesh",
    "taylor_hood", "RunConfig", "Trajectory", "run", "solve_saddle", "step", "PointwiseField",
    "lambda_kernel", "piola_pull", "piola_push",
]

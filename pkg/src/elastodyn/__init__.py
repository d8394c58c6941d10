"""Meshless elastodynamics with quadratic moving-least-squares reduction,
implicit time integration, and inverse-warped volume rendering."""

from .field import (
    AnalyticField,
    GridField,
    GridFormatError,
    Primitive,
    density_gradient,
    load_grid,
    sample_color,
    sample_density,
    save_grid,
)
from .material import MaterialParams, lame_from_young_poisson
from .sampling import (
    IPSet,
    KernelSet,
    ParticleCloud,
    fit_cuboid,
    place_integrator_points,
    poisson_disk_sample,
    select_kernels,
)
from .dynamics import CutQuad, Simulation, build_ip_tensors
from .render import Camera, WarpData, warp_point, warp_points

__all__ = [
    "AnalyticField",
    "Camera",
    "CutQuad",
    "GridField",
    "GridFormatError",
    "IPSet",
    "KernelSet",
    "MaterialParams",
    "ParticleCloud",
    "Primitive",
    "Simulation",
    "WarpData",
    "build_ip_tensors",
    "density_gradient",
    "fit_cuboid",
    "lame_from_young_poisson",
    "load_grid",
    "place_integrator_points",
    "poisson_disk_sample",
    "sample_color",
    "sample_density",
    "save_grid",
    "select_kernels",
    "warp_point",
    "warp_points",
]

__version__ = "0.1.0"

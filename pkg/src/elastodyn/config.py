"""Scene configuration: strict JSON parsing with field-path diagnostics.

Unknown keys are rejected everywhere so typos fail fast; every numeric
range is validated at load time. `build_scene` turns a validated config
into the field/cloud/kernels/IP chain, and `make_simulation` finishes the
job (optionally reusing a sidecar's precomputed tensors).
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import field as field_mod
from .dynamics import Simulation
from .material import MaterialParams
from .render import Camera
from .sampling import build_ip_set, poisson_disk_sample, select_kernels


class ConfigError(ValueError):
    """Malformed scene configuration; the message names the offending field."""


def _fail(path, msg):
    raise ConfigError(f"config error at {path}: {msg}")


def _require_keys(obj, path, required, optional=()):
    if not isinstance(obj, dict):
        _fail(path, f"expected an object, got {type(obj).__name__}")
    for key in obj:
        if key not in required and key not in optional:
            _fail(f"{path}.{key}", "unknown key")
    for key in required:
        if key not in obj:
            _fail(f"{path}.{key}", "missing required key")


def _number(obj, path, lo=None, hi=None, lo_open=False, hi_open=False):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        _fail(path, f"expected a number, got {type(obj).__name__}")
    v = float(obj)
    if lo is not None and (v <= lo if lo_open else v < lo):
        _fail(path, f"must be {'>' if lo_open else '>='} {lo}, got {v}")
    if hi is not None and (v >= hi if hi_open else v > hi):
        _fail(path, f"must be {'<' if hi_open else '<='} {hi}, got {v}")
    return v


def _integer(obj, path, lo=None, hi=None):
    if isinstance(obj, bool) or not isinstance(obj, int):
        _fail(path, f"expected an integer, got {type(obj).__name__}")
    if lo is not None and obj < lo:
        _fail(path, f"must be >= {lo}, got {obj}")
    if hi is not None and obj > hi:
        _fail(path, f"must be <= {hi}, got {obj}")
    return int(obj)


def _vec(obj, path, n=3):
    if not isinstance(obj, list) or len(obj) != n:
        _fail(path, f"expected a list of {n} numbers")
    return [_number(v, f"{path}[{i}]") for i, v in enumerate(obj)]


def _choice(obj, path, options):
    if obj not in options:
        _fail(path, f"must be one of {sorted(options)}, got {obj!r}")
    return obj


_PRIMITIVE_KEYS = {
    "sphere": ({"shape", "center", "radius"}, {"density", "color", "falloff"}),
    "box": ({"shape", "center", "half_extents"}, {"density", "color", "falloff"}),
    "rounded_box": (
        {"shape", "center", "half_extents", "radius"},
        {"density", "color", "falloff"},
    ),
}


def _parse_primitive(obj, path):
    if not isinstance(obj, dict) or "shape" not in obj:
        _fail(path, "primitive needs a 'shape' key")
    shape = _choice(obj["shape"], f"{path}.shape", set(_PRIMITIVE_KEYS))
    required, optional = _PRIMITIVE_KEYS[shape]
    _require_keys(obj, path, required, optional)
    kwargs = dict(
        shape=shape,
        center=_vec(obj["center"], f"{path}.center"),
        density=_number(obj.get("density", 1.0), f"{path}.density", lo=0, lo_open=True),
        falloff=_number(obj.get("falloff", 0.05), f"{path}.falloff", lo=0, lo_open=True),
    )
    color = _vec(obj.get("color", [1.0, 1.0, 1.0]), f"{path}.color")
    for i, c in enumerate(color):
        if not 0.0 <= c <= 1.0:
            _fail(f"{path}.color[{i}]", f"must be within [0, 1], got {c}")
    kwargs["color"] = tuple(color)
    if "radius" in required:
        kwargs["radius"] = _number(obj["radius"], f"{path}.radius", lo=0, lo_open=True)
    if "half_extents" in required:
        kwargs["half_extents"] = _vec(obj["half_extents"], f"{path}.half_extents")
    return field_mod.Primitive(**kwargs)


def _parse_field(obj, path, base_dir):
    _require_keys(obj, path, {"kind"}, {"primitives", "path"})
    kind = _choice(obj["kind"], f"{path}.kind", {"analytic", "grid"})
    if kind == "analytic":
        prims = obj.get("primitives")
        if not isinstance(prims, list) or not prims:
            _fail(f"{path}.primitives", "analytic field needs a nonempty primitive list")
        return field_mod.AnalyticField(
            [_parse_primitive(p, f"{path}.primitives[{i}]") for i, p in enumerate(prims)]
        )
    if "path" not in obj:
        _fail(f"{path}.path", "grid field needs a file path")
    grid_path = obj["path"]
    if not os.path.isabs(grid_path):
        grid_path = os.path.join(base_dir, grid_path)
    if not os.path.exists(grid_path):
        _fail(f"{path}.path", f"grid file not found: {grid_path}")
    return field_mod.load_grid(grid_path)


def _parse_region(obj, path):
    _require_keys(obj, path, {"kind"}, {"min", "max", "center", "radius"})
    kind = _choice(obj["kind"], f"{path}.kind", {"aabb", "sphere"})
    if kind == "aabb":
        for key in ("min", "max"):
            if key not in obj:
                _fail(f"{path}.{key}", "aabb region needs min and max")
        return {
            "kind": "aabb",
            "min": _vec(obj["min"], f"{path}.min"),
            "max": _vec(obj["max"], f"{path}.max"),
        }
    for key in ("center", "radius"):
        if key not in obj:
            _fail(f"{path}.{key}", "sphere region needs center and radius")
    return {
        "kind": "sphere",
        "center": _vec(obj["center"], f"{path}.center"),
        "radius": _number(obj["radius"], f"{path}.radius", lo=0, lo_open=True),
    }


class SceneConfig:
    """Validated scene description."""

    def __init__(self, raw, base_dir="."):
        _require_keys(
            raw,
            "$",
            {"field", "sampling", "material", "dynamics"},
            {"camera", "render", "constraints", "interpolation", "interaction"},
        )
        self.field = _parse_field(raw["field"], "field", base_dir)

        s = raw["sampling"]
        _require_keys(
            s, "sampling", {"r_bar", "n_kernels"},
            {"kappa", "seed", "m_extra_ips", "K_covariance"},
        )
        self.r_bar = _number(s["r_bar"], "sampling.r_bar", lo=0, lo_open=True)
        self.kappa = _number(s.get("kappa", 1.0), "sampling.kappa", lo=0, lo_open=True)
        self.seed = _integer(s.get("seed", 0), "sampling.seed", lo=0)
        self.n_kernels = _integer(s["n_kernels"], "sampling.n_kernels", lo=1)
        self.m_extra_ips = _integer(s.get("m_extra_ips", 0), "sampling.m_extra_ips", lo=0)
        self.k_covariance = _integer(s.get("K_covariance", 16), "sampling.K_covariance", lo=4)

        m = raw["material"]
        _require_keys(m, "material", {"model"}, {"E", "nu", "beta", "rho"})
        model = _choice(m["model"], "material.model", {"neo_hookean", "arap"})
        kwargs = {"model": model}
        if "E" in m:
            kwargs["E"] = _number(m["E"], "material.E", lo=0, lo_open=True)
        if "nu" in m:
            kwargs["nu"] = _number(m["nu"], "material.nu", lo=0, hi=0.5, hi_open=True)
        if "beta" in m:
            kwargs["beta"] = _number(m["beta"], "material.beta", lo=0, lo_open=True)
        if "rho" in m:
            kwargs["rho"] = _number(m["rho"], "material.rho", lo=0, lo_open=True)
        try:
            self.material = MaterialParams(**kwargs)
        except ValueError as exc:
            _fail("material", str(exc))

        d = raw["dynamics"]
        _require_keys(d, "dynamics", {"dt"}, {"gravity", "damping", "ground_plane"})
        self.dt = _number(d["dt"], "dynamics.dt", lo=0, lo_open=True)
        self.gravity = _vec(d.get("gravity", [0.0, 0.0, -9.8]), "dynamics.gravity")
        self.damping = _number(d.get("damping", 0.0), "dynamics.damping", lo=0)
        self.ground = None
        if "ground_plane" in d:
            g = d["ground_plane"]
            _require_keys(g, "dynamics.ground_plane", {"z", "stiffness"})
            self.ground = {
                "z": _number(g["z"], "dynamics.ground_plane.z"),
                "stiffness": _number(
                    g["stiffness"], "dynamics.ground_plane.stiffness", lo=0, lo_open=True
                ),
            }

        c = raw.get("camera", {})
        _require_keys(
            c, "camera", set(),
            {"position", "look_at", "up", "fov_deg", "width", "height", "near", "far"},
        )
        try:
            self.camera = Camera(
                position=_vec(c.get("position", [0.0, -3.0, 1.0]), "camera.position"),
                look_at=_vec(c.get("look_at", [0.0, 0.0, 0.0]), "camera.look_at"),
                up=_vec(c.get("up", [0.0, 0.0, 1.0]), "camera.up"),
                fov_deg=_number(c.get("fov_deg", 40.0), "camera.fov_deg", lo=0, hi=180,
                                lo_open=True, hi_open=True),
                width=_integer(c.get("width", 256), "camera.width", lo=1),
                height=_integer(c.get("height", 256), "camera.height", lo=1),
                near=_number(c.get("near", 0.05), "camera.near", lo=0, lo_open=True),
                far=_number(c.get("far", 100.0), "camera.far", lo=0, lo_open=True),
            )
        except ValueError as exc:
            _fail("camera", str(exc))

        r = raw.get("render", {})
        _require_keys(r, "render", set(), {"step_scale", "density_scale"})
        self.step_scale = _number(r.get("step_scale", 1.0), "render.step_scale",
                                  lo=0, lo_open=True)
        self.density_scale = _number(r.get("density_scale", 1.0), "render.density_scale",
                                     lo=0, lo_open=True)

        cons = raw.get("constraints", [])
        if not isinstance(cons, list):
            _fail("constraints", "expected a list")
        self.constraints = []
        for i, entry in enumerate(cons):
            _require_keys(entry, f"constraints[{i}]", {"region"}, {"target"})
            region = _parse_region(entry["region"], f"constraints[{i}].region")
            target = None
            if "target" in entry:
                target = _vec(entry["target"], f"constraints[{i}].target")
            self.constraints.append({"region": region, "target": target})

        self.order = _choice(
            raw.get("interpolation", "quadratic"), "interpolation",
            {"quadratic", "linear"},
        )

        inter = raw.get("interaction", {})
        _require_keys(inter, "interaction", set(), {"drag_stiffness"})
        self.drag_stiffness = _number(
            inter.get("drag_stiffness", 50.0), "interaction.drag_stiffness",
            lo=0, lo_open=True,
        )

    @property
    def march_step(self):
        if self.field.kind == "grid":
            base = float(np.min(self.field.spacing))
        else:
            base = self.r_bar / 2.0
        return self.step_scale * base


def load_scene(path) -> SceneConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"scene file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scene file is not valid JSON: {exc}")
    return SceneConfig(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def build_scene(cfg: SceneConfig, seed=None):
    """Sample the field and build the kernel/IP reduction."""
    seed = cfg.seed if seed is None else seed
    cloud = poisson_disk_sample(cfg.field, cfg.r_bar, cfg.kappa, seed)
    if cfg.n_kernels > len(cloud):
        raise ConfigError(
            f"config error at sampling.n_kernels: {cfg.n_kernels} kernels exceed "
            f"the {len(cloud)} sampled particles"
        )
    kernels = select_kernels(cloud, cfg.n_kernels, seed)
    ips = build_ip_set(cloud, kernels, cfg.m_extra_ips, seed, K=cfg.k_covariance)
    return cloud, kernels, ips


def make_simulation(cfg: SceneConfig, cloud, kernels, ips, tensors=None) -> Simulation:
    sim = Simulation(
        cloud, kernels, ips, cfg.material, cfg.dt,
        gravity=cfg.gravity, damping=cfg.damping, order=cfg.order,
        ground=cfg.ground, k_covariance=cfg.k_covariance, tensors=tensors,
    )
    for con in cfg.constraints:
        sim.pin_region(con["region"], con["target"])
    return sim

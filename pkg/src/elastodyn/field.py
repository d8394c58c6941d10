"""Rest-pose density/color fields: analytic primitives and trilinear grids.

A field answers three queries at arbitrary 3D points: scalar density,
RGB color, and the spatial density gradient. Analytic primitives use a
compactly supported smoothstep edge so the gradient is nonzero in a band
of configurable width around the surface and exactly zero elsewhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dataclass_field

import numpy as np

GRID_MAGIC = "PIEGRID1"


class GridFormatError(ValueError):
    """Raised for malformed grid files (bad magic, dims, channels, payload)."""


def _as_points(p):
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    return np.atleast_2d(pts), single


@dataclass(frozen=True)
class Primitive:
    """One analytic solid: sphere, box, or rounded box with a smooth edge."""

    shape: str
    center: np.ndarray
    density: float = 1.0
    color: tuple = (1.0, 1.0, 1.0)
    falloff: float = 0.05
    radius: float = 0.0
    half_extents: np.ndarray | None = None

    def __post_init__(self):
        if self.shape not in ("sphere", "box", "rounded_box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if self.shape != "sphere" and self.half_extents is None:
            raise ValueError(f"{self.shape} primitive needs half_extents")
        if self.falloff <= 0:
            raise ValueError("falloff width must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if self.half_extents is not None:
            object.__setattr__(
                self, "half_extents", np.asarray(self.half_extents, dtype=np.float64)
            )

    def signed_distance(self, pts):
        """Signed distance to the primitive surface, negative inside, with gradient."""
        rel = pts - self.center
        if self.shape == "sphere":
            d = np.linalg.norm(rel, axis=-1)
            sd = d - self.radius
            with np.errstate(invalid="ignore", divide="ignore"):
                grad = np.where(d[:, None] > 1e-300, rel / np.maximum(d, 1e-300)[:, None], 0.0)
            return sd, grad
        half = self.half_extents
        rnd = self.radius if self.shape == "rounded_box" else 0.0
        box = half - rnd
        qv = np.abs(rel) - box
        outside = np.maximum(qv, 0.0)
        out_norm = np.linalg.norm(outside, axis=-1)
        inner = np.minimum(np.max(qv, axis=-1), 0.0)
        sd = out_norm + inner - rnd
        grad = np.zeros_like(rel)
        is_out = out_norm > 1e-300
        grad[is_out] = outside[is_out] / out_norm[is_out, None]
        # inside: push along the axis closest to a face (a.e. gradient of the max)
        ins = ~is_out
        if np.any(ins):
            ax = np.argmax(qv[ins], axis=-1)
            g = np.zeros((ins.sum(), 3))
            g[np.arange(len(ax)), ax] = 1.0
            grad[ins] = g
        grad *= np.where(np.signbit(rel), -1.0, 1.0)
        return sd, grad

    def density_at(self, pts):
        sd, grad = self.signed_distance(pts)
        # smoothstep from full density (sd <= -w/2) down to exactly 0 (sd >= +w/2)
        u = np.clip(0.5 - sd / self.falloff, 0.0, 1.0)
        s = u * u * (3.0 - 2.0 * u)
        ds_du = 6.0 * u * (1.0 - u)
        dens = self.density * s
        dgrad = (-self.density / self.falloff) * ds_du[:, None] * grad
        return dens, dgrad

    def bounds(self):
        if self.shape == "sphere":
            ext = np.full(3, self.radius)
        else:
            ext = np.asarray(self.half_extents, dtype=np.float64)
        pad = ext + 0.5 * self.falloff
        return self.center - pad, self.center + pad


@dataclass
class AnalyticField:
    """Union of analytic primitives; density is the pointwise maximum."""

    primitives: list = dataclass_field(default_factory=list)

    kind = "analytic"

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("analytic field needs at least one primitive")

    def _stack(self, pts):
        dens = np.empty((len(self.primitives), len(pts)))
        grads = np.empty((len(self.primitives), len(pts), 3))
        for i, prim in enumerate(self.primitives):
            dens[i], grads[i] = prim.density_at(pts)
        return dens, grads

    def density(self, p):
        pts, single = _as_points(p)
        dens, _ = self._stack(pts)
        out = dens.max(axis=0)
        return float(out[0]) if single else out

    def gradient(self, p):
        pts, single = _as_points(p)
        dens, grads = self._stack(pts)
        win = np.argmax(dens, axis=0)
        out = grads[win, np.arange(len(pts))]
        return out[0] if single else out

    def color(self, p):
        pts, single = _as_points(p)
        dens, _ = self._stack(pts)
        win = np.argmax(dens, axis=0)
        cols = np.array([prim.color for prim in self.primitives], dtype=np.float64)
        out = cols[win] * (dens.max(axis=0) > 0.0)[:, None]
        return out[0] if single else out

    def bounds(self):
        los, his = zip(*(prim.bounds() for prim in self.primitives))
        return np.min(los, axis=0), np.max(his, axis=0)


@dataclass
class GridField:
    """Regular grid with trilinear interpolation; queries outside return 0."""

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray  # (nx, ny, nz, channels) float32, channels in {1, 4}

    kind = "grid"

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 4 or self.values.shape[3] not in (1, 4):
            raise ValueError("grid values must be (nx, ny, nz, 1|4)")
        if np.any(np.array(self.values.shape[:3]) < 1):
            raise ValueError("grid dims must be positive")

    @property
    def dims(self):
        return self.values.shape[:3]

    def bounds(self):
        hi = self.origin + self.spacing * (np.array(self.dims) - 1)
        return self.origin.copy(), hi

    def _interp(self, pts, chan):
        nx, ny, nz = self.dims
        rel = (pts - self.origin) / self.spacing
        lo, hi = self.bounds()
        inside = np.all((pts >= lo) & (pts <= hi), axis=-1)
        rel = np.clip(rel, 0.0, np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64))
        i0 = np.minimum(rel.astype(np.int64), np.array([nx - 2, ny - 2, nz - 2]).clip(min=0))
        f = rel - i0
        i1 = np.minimum(i0 + 1, np.array([nx - 1, ny - 1, nz - 1]))
        v = self.values[..., chan].astype(np.float64)

        def at(ix, iy, iz):
            return v[ix, iy, iz]

        c000 = at(i0[:, 0], i0[:, 1], i0[:, 2])
        c100 = at(i1[:, 0], i0[:, 1], i0[:, 2])
        c010 = at(i0[:, 0], i1[:, 1], i0[:, 2])
        c110 = at(i1[:, 0], i1[:, 1], i0[:, 2])
        c001 = at(i0[:, 0], i0[:, 1], i1[:, 2])
        c101 = at(i1[:, 0], i0[:, 1], i1[:, 2])
        c011 = at(i0[:, 0], i1[:, 1], i1[:, 2])
        c111 = at(i1[:, 0], i1[:, 1], i1[:, 2])
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        c00 = c000 * (1 - fx) + c100 * fx
        c10 = c010 * (1 - fx) + c110 * fx
        c01 = c001 * (1 - fx) + c101 * fx
        c11 = c011 * (1 - fx) + c111 * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out = c0 * (1 - fz) + c1 * fz
        return np.where(inside, out, 0.0)

    def density(self, p):
        pts, single = _as_points(p)
        out = self._interp(pts, 0)
        return float(out[0]) if single else out

    def color(self, p):
        pts, single = _as_points(p)
        if self.values.shape[3] == 1:
            out = np.ones((len(pts), 3)) * (self._interp(pts, 0) > 0)[:, None]
        else:
            out = np.stack([self._interp(pts, c) for c in (1, 2, 3)], axis=-1)
        return out[0] if single else out

    def gradient(self, p):
        """Central differences of the interpolant, step = grid spacing per axis.

        Falls back to one-sided differences within one spacing of the domain
        boundary, where the central stencil would sample the zero exterior.
        """
        pts, single = _as_points(p)
        lo, hi = self.bounds()
        out = np.zeros_like(pts)
        for ax in range(3):
            h = self.spacing[ax]
            step = np.zeros(3)
            step[ax] = h
            p_hi = pts + step
            p_lo = pts - step
            over = p_hi[:, ax] > hi[ax]
            under = p_lo[:, ax] < lo[ax]
            p_hi[over] = pts[over]
            p_lo[under] = pts[under]
            span = p_hi[:, ax] - p_lo[:, ax]
            span = np.where(span > 0, span, 1.0)
            out[:, ax] = (self._interp(p_hi, 0) - self._interp(p_lo, 0)) / span
        return out[0] if single else out


def sample_density(field, p):
    """Density σ(p) ≥ 0; zero outside the field's domain."""
    return field.density(p)


def sample_color(field, p):
    return field.color(p)


def density_gradient(field, p):
    """∇σ(p): analytic for primitives, finite differences for grids."""
    return field.gradient(p)


def save_grid(field: GridField, path):
    """Write the PIEGRID1 format: ASCII header then little-endian float32 payload."""
    nx, ny, nz = field.dims
    chan = field.values.shape[3]
    with open(path, "wb") as fh:
        fh.write(f"{GRID_MAGIC}\n".encode("ascii"))
        fh.write(f"dims {nx} {ny} {nz}\n".encode("ascii"))
        fh.write(("origin %.17g %.17g %.17g\n" % tuple(field.origin)).encode("ascii"))
        fh.write(("spacing %.17g %.17g %.17g\n" % tuple(field.spacing)).encode("ascii"))
        fh.write(f"channels {chan}\n".encode("ascii"))
        payload = np.ascontiguousarray(
            field.values.transpose(2, 1, 0, 3), dtype="<f4"
        )  # x-fastest ordering, channels interleaved
        fh.write(payload.tobytes())


def _read_header_line(fh, what):
    raw = fh.readline()
    if not raw.endswith(b"\n"):
        raise GridFormatError(f"truncated header: missing {what}")
    return raw.decode("ascii", errors="replace").strip()


def load_grid(path) -> GridField:
    """Read a PIEGRID1 file; raises GridFormatError with a distinct diagnostic."""
    with open(path, "rb") as fh:
        magic = _read_header_line(fh, "magic")
        if magic != GRID_MAGIC:
            raise GridFormatError(f"bad magic {magic!r}, expected {GRID_MAGIC!r}")
        toks = _read_header_line(fh, "dims").split()
        if len(toks) != 4 or toks[0] != "dims":
            raise GridFormatError("malformed dims line")
        try:
            nx, ny, nz = (int(t) for t in toks[1:])
        except ValueError as exc:
            raise GridFormatError("malformed dims line") from exc
        if min(nx, ny, nz) <= 0:
            raise GridFormatError(f"bad dims {nx} {ny} {nz}: must be positive")
        toks = _read_header_line(fh, "origin").split()
        if len(toks) != 4 or toks[0] != "origin":
            raise GridFormatError("malformed origin line")
        origin = np.array([float(t) for t in toks[1:]])
        toks = _read_header_line(fh, "spacing").split()
        if len(toks) != 4 or toks[0] != "spacing":
            raise GridFormatError("malformed spacing line")
        spacing = np.array([float(t) for t in toks[1:]])
        toks = _read_header_line(fh, "channels").split()
        if len(toks) != 2 or toks[0] != "channels":
            raise GridFormatError("malformed channels line")
        chan = int(toks[1])
        if chan not in (1, 4):
            raise GridFormatError(f"bad channel count {chan}: must be 1 or 4")
        want = nx * ny * nz * chan * 4
        payload = fh.read(want + 1)
        if len(payload) < want:
            raise GridFormatError(
                f"truncated payload: expected {want} bytes, got {len(payload)}"
            )
        if len(payload) > want:
            raise GridFormatError("trailing bytes after payload")
        flat = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx, chan)
        values = flat.transpose(2, 1, 0, 3)
        return GridField(origin=origin, spacing=spacing, values=values)


def unit_sphere(radius=1.0, density=1.0, falloff=0.05, center=(0.0, 0.0, 0.0),
                color=(1.0, 1.0, 1.0)):
    return AnalyticField([Primitive("sphere", center, density, color, falloff, radius)])


def box_field(half_extents, density=1.0, falloff=0.05, center=(0.0, 0.0, 0.0),
              color=(1.0, 1.0, 1.0)):
    return AnalyticField(
        [Primitive("box", center, density, color, falloff, half_extents=half_extents)]
    )

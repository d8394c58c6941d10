"""Deformed-body rendering: quadratic inverse warping of ray samples to the
rest pose, then emission-absorption raymarching of the rest density field.

Warping solves, per sample point and per nearby integrator point, the
second-order Taylor model of the deformation map for the rest-space offset,
then blends the three per-point displacement estimates with inverse-distance
weights. Working with displacement deltas (x = sample - delta) keeps the
rest state an exact fixed point: with q = 0 every delta is exactly zero and
the warped render is bit-identical to marching the rest field directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .field import sample_color, sample_density

WARP_MAX_ITERS = 50
TRANSMITTANCE_FLOOR = 1e-3
BLEND_EPS = 1e-8


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = (0.0, 0.0, 1.0)
    fov_deg: float = 40.0
    width: int = 256
    height: int = 256
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("vertical FOV must be in (0, 180) degrees")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def basis(self):
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right = right / np.linalg.norm(right)
        up = np.cross(right, fwd)
        return fwd, right, up

    def rays(self):
        """Ray directions for all pixels, row-major (H, W, 3), pixel centers."""
        fwd, right, up = self.basis()
        tan_y = np.tan(np.deg2rad(self.fov_deg) / 2.0)
        tan_x = tan_y * self.width / self.height
        px = (np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0
        py = 1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0
        d = (
            fwd[None, None, :]
            + px[None, :, None] * tan_x * right[None, None, :]
            + py[:, None, None] * tan_y * up[None, None, :]
        )
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, points):
        """Pixel coordinates and depth of world points; valid=False behind
        the near plane."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        fwd, right, up = self.basis()
        rel = pts - self.position
        z = rel @ fwd
        x = rel @ right
        y = rel @ up
        tan_y = np.tan(np.deg2rad(self.fov_deg) / 2.0)
        tan_x = tan_y * self.width / self.height
        valid = z > self.near
        with np.errstate(divide="ignore", invalid="ignore"):
            ndc_x = np.where(valid, x / (z * tan_x), 0.0)
            ndc_y = np.where(valid, y / (z * tan_y), 0.0)
        px = (ndc_x + 1.0) / 2.0 * self.width - 0.5
        py = (1.0 - ndc_y) / 2.0 * self.height - 0.5
        return np.stack([px, py], axis=-1), z, valid


@dataclass(frozen=True)
class WarpResult:
    rest: np.ndarray
    converged: bool
    iterations: int
    residual: float
    in_body: bool


class WarpData:
    """Per-frame deformation snapshot used by the inverse warp."""

    def __init__(self, rest_positions, displacements, grad_u, grad_F, cuboid_diags,
                 order="quadratic"):
        self.rest_positions = np.asarray(rest_positions, dtype=np.float64)
        self.displacements = np.asarray(displacements, dtype=np.float64)
        self.deformed_positions = self.rest_positions + self.displacements
        self.grad_u = np.asarray(grad_u, dtype=np.float64)
        self.grad_F = np.asarray(grad_F, dtype=np.float64)
        self.cutoff = 2.0 * float(np.max(cuboid_diags))
        self.order = order
        self.tree = cKDTree(self.deformed_positions)

    @classmethod
    def from_simulation(cls, sim, q=None):
        F = sim.def_gradients(q)
        return cls(
            rest_positions=sim.ips.positions,
            displacements=sim.ip_displacements(q),
            grad_u=F - np.eye(3)[None],
            grad_F=sim.grad_def_gradients(q),
            cuboid_diags=np.linalg.norm(sim.ips.edges, axis=1),
            order=sim.order,
        )


def _solve3(J, r):
    """Batched 3x3 solve via the adjugate; exact for identity Jacobians."""
    det = (
        J[:, 0, 0] * (J[:, 1, 1] * J[:, 2, 2] - J[:, 1, 2] * J[:, 2, 1])
        - J[:, 0, 1] * (J[:, 1, 0] * J[:, 2, 2] - J[:, 1, 2] * J[:, 2, 0])
        + J[:, 0, 2] * (J[:, 1, 0] * J[:, 2, 1] - J[:, 1, 1] * J[:, 2, 0])
    )
    adj = np.empty_like(J)
    adj[:, 0, 0] = J[:, 1, 1] * J[:, 2, 2] - J[:, 1, 2] * J[:, 2, 1]
    adj[:, 0, 1] = J[:, 0, 2] * J[:, 2, 1] - J[:, 0, 1] * J[:, 2, 2]
    adj[:, 0, 2] = J[:, 0, 1] * J[:, 1, 2] - J[:, 0, 2] * J[:, 1, 1]
    adj[:, 1, 0] = J[:, 1, 2] * J[:, 2, 0] - J[:, 1, 0] * J[:, 2, 2]
    adj[:, 1, 1] = J[:, 0, 0] * J[:, 2, 2] - J[:, 0, 2] * J[:, 2, 0]
    adj[:, 1, 2] = J[:, 0, 2] * J[:, 1, 0] - J[:, 0, 0] * J[:, 1, 2]
    adj[:, 2, 0] = J[:, 1, 0] * J[:, 2, 1] - J[:, 1, 1] * J[:, 2, 0]
    adj[:, 2, 1] = J[:, 0, 1] * J[:, 2, 0] - J[:, 0, 0] * J[:, 2, 1]
    adj[:, 2, 2] = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    ok = np.abs(det) > 1e-300
    sol = np.einsum("nij,nj->ni", adj, r)
    sol[ok] /= det[ok, None]
    return sol, ok


def warp_points(data: WarpData, samples, tol=1e-9, max_iters=WARP_MAX_ITERS):
    """Vectorized inverse warp of deformed-space samples to rest space.

    Returns (rest, converged, in_body, iterations, residual, disagreement).
    iterations counts Newton updates of the worst of the blended solves.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    npts = len(samples)
    k = min(3, len(data.rest_positions))
    dist, idx = data.tree.query(samples, k=k)
    dist = dist.reshape(npts, k)
    idx = idx.reshape(npts, k)
    in_body = dist[:, 0] <= data.cutoff

    scale = max(data.cutoff, 1e-12)
    quad = data.order == "quadratic"
    deltas = np.zeros((npts, k, 3))
    solved = np.zeros((npts, k), dtype=bool)
    res_norm = np.zeros((npts, k))
    iters = np.zeros((npts, k), dtype=np.int64)

    for j in range(k):
        ki = idx[:, j]
        xk = data.rest_positions[ki]
        Gu = data.grad_u[ki]
        GF = data.grad_F[ki]
        b = samples - data.deformed_positions[ki]
        s = samples - xk
        d = np.zeros((npts, 3))
        res = np.full(npts, np.inf)
        active = np.arange(npts)
        for it in range(max_iters + 1):
            da = d[active]
            Gd = np.einsum("nrce,ne->nrc", GF[active], da) if quad else None
            r = da + np.einsum("nrc,nc->nr", Gu[active], da) - b[active]
            if quad:
                r = r + 0.5 * np.einsum("nrc,nc->nr", Gd, da)
            rn = np.linalg.norm(r, axis=1)
            res[active] = rn
            pending = rn > tol * scale
            if not pending.any() or it == max_iters:
                break
            sub = active[pending]
            J = np.eye(3)[None] + Gu[sub]
            if quad:
                J = J + Gd[pending]
            stp, ok = _solve3(np.ascontiguousarray(J), r[pending])
            d[sub[ok]] -= stp[ok]
            iters[sub, j] += 1
            res[sub[~ok]] = np.inf  # singular Jacobian: give up
            active = sub[ok]
        solved[:, j] = res <= tol * scale
        res_norm[:, j] = res
        deltas[:, j] = s - d

    w = 1.0 / (dist + BLEND_EPS)
    w = w / w.sum(axis=1, keepdims=True)
    delta = np.einsum("nk,nkc->nc", w, deltas)
    rest = samples - delta
    converged = solved.all(axis=1)
    spread = np.linalg.norm(
        deltas - deltas.mean(axis=1, keepdims=True), axis=2
    ).max(axis=1)
    disagree = spread > 0.1 * scale
    return rest, converged, in_body, iters.max(axis=1), res_norm.max(axis=1), disagree


def warp_point(data: WarpData, sample, tol=1e-9, max_iters=WARP_MAX_ITERS) -> WarpResult:
    """Single-point inverse warp."""
    rest, conv, in_body, iters, res, _ = warp_points(data, sample, tol, max_iters)
    return WarpResult(
        rest=rest[0],
        converged=bool(conv[0]),
        iterations=int(iters[0]),
        residual=float(res[0]),
        in_body=bool(in_body[0]),
    )


def deformed_bounds(field, data: WarpData | None):
    """Rest AABB dilated by the max IP displacement plus the warp cutoff."""
    lo, hi = field.bounds()
    if data is None:
        return lo, hi
    pad = float(np.max(np.linalg.norm(data.displacements, axis=1))) + data.cutoff / 2.0
    return lo - pad, hi + pad


def _ray_aabb(origins, dirs, lo, hi, near, far):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t1 = (lo[None, :] - origins) * inv
    t2 = (hi[None, :] - origins) * inv
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    t_enter = np.maximum(tmin, near)
    t_exit = np.minimum(tmax, far)
    return t_enter, np.maximum(t_exit, t_enter)


def _march(camera, sample_fn, lo, hi, step, density_scale):
    dirs = camera.rays().reshape(-1, 3)
    nray = len(dirs)
    origins = np.broadcast_to(camera.position, (nray, 3))
    t_enter, t_exit = _ray_aabb(origins, dirs, lo, hi, camera.near, camera.far)

    color = np.zeros((nray, 3))
    trans = np.ones(nray)
    t = t_enter + 0.5 * step
    n_steps = int(np.ceil((t_exit - t_enter).max() / step)) if nray else 0
    for _ in range(max(n_steps, 0)):
        active = (t < t_exit) & (trans >= TRANSMITTANCE_FLOOR)
        if not active.any():
            break
        pts = origins[active] + t[active, None] * dirs[active]
        sigma, rgb = sample_fn(pts)
        att = np.exp(-sigma * step * density_scale)
        weight = trans[active] * (1.0 - att)
        color[active] += weight[:, None] * rgb
        trans[active] *= att
        t = t + step
    img = np.zeros((nray, 4))
    img[:, :3] = color
    img[:, 3] = 1.0 - trans
    return img.reshape(camera.height, camera.width, 4)


def render(camera, field, warp=None, step=None, density_scale=1.0, bounds=None):
    """Raymarch the deformed body (or, with warp=None, the rest field).

    Samples whose inverse warp fails to converge, or that lie beyond the
    warp cutoff from every integrator point, contribute zero density.
    """
    if step is None or step <= 0:
        raise ValueError("march step must be positive")
    if bounds is None:
        lo, hi = deformed_bounds(field, warp)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)

    if warp is None:
        def sample_fn(pts):
            return sample_density(field, pts), sample_color(field, pts)
    else:
        def sample_fn(pts):
            rest, conv, in_body, _, _, _ = warp_points(warp, pts)
            ok = conv & in_body
            sigma = np.where(ok, sample_density(field, rest), 0.0)
            rgb = sample_color(field, rest) * ok[:, None]
            return sigma, rgb

    return _march(camera, sample_fn, lo, hi, step, density_scale)


def render_reference_shifted(camera, field, translation, step, density_scale=1.0,
                             bounds=None):
    """Reference for rigid translation: march the same bounds, querying the
    rest field at the back-shifted position."""
    t = np.asarray(translation, dtype=np.float64)
    if bounds is None:
        lo, hi = field.bounds()
        lo, hi = lo + t, hi + t
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)

    def sample_fn(pts):
        back = pts - t
        return sample_density(field, back), sample_color(field, back)

    return _march(camera, sample_fn, lo, hi, step, density_scale)


def render_points(camera, positions):
    """Project points for UI overlays: (pixels (N,2), depth (N,), valid)."""
    return camera.project(positions)


def to_uint8(img):
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img):
    """img: float (H,W,4) in [0,1] or uint8; path may be a file object."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(arr, mode="RGBA").save(path, format="PNG")


def read_png(path):
    return np.asarray(Image.open(path).convert("RGBA"))


def write_ppm(path, img):
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr[:, :, :3].tobytes())

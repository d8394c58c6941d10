"""Meshless shape proxy: adaptive Poisson-disk particles, reduction kernels,
integrator points, and per-point cuboid fitting.

Sampling is sequential and fully deterministic for a given seed. The
particle radius shrinks where the density gradient is large (model
boundaries), following r = min(r_bar, kappa * r_bar / sqrt(|grad sigma| + alpha)).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.spatial import cKDTree

from .field import density_gradient, sample_density

DENSITY_EPS = 1e-2
GRAD_ALPHA = 1e-3
RING_CANDIDATES = 30
MAX_SEED_PROBES = 100_000
RESEED_PROBES = 4096  # extra probes after the active list empties (disconnected parts)
SUPPORT_GAMMA = 1.5
MIN_COVERAGE = 4
LLOYD_IP_ITERS = 5
DEGENERATE_EIG_RATIO = 1e-12
DEGENERATE_EDGE_FACTOR = 1e-2


class EmptyFieldError(RuntimeError):
    """No point with density above the acceptance threshold was found."""


@dataclass
class ParticleCloud:
    positions: np.ndarray  # (N, 3)
    radii: np.ndarray      # (N,)
    volumes: np.ndarray    # (N,)
    densities: np.ndarray  # (N,)

    def __len__(self):
        return len(self.positions)


@dataclass
class KernelSet:
    centers: np.ndarray  # (n, 3)
    radii: np.ndarray    # (n,) support radii

    def __len__(self):
        return len(self.centers)


@dataclass
class IPSet:
    """Integrator points with fitted cuboids.

    axes[k] holds the three orthonormal cuboid axes as columns, ordered by
    decreasing edge length; edges[k] the matching lengths.
    """

    positions: np.ndarray   # (m, 3)
    axes: np.ndarray        # (m, 3, 3)
    edges: np.ndarray       # (m, 3)
    volumes: np.ndarray     # (m,)
    kernel_ip: np.ndarray   # (m,) bool
    tensors: object = dataclass_field(default=None, repr=False)

    def __len__(self):
        return len(self.positions)


def adaptive_radius(field, p, r_bar, kappa):
    g = np.linalg.norm(density_gradient(field, p))
    return min(r_bar, kappa * r_bar / np.sqrt(g + GRAD_ALPHA))


def poisson_disk_sample(field, r_bar, kappa, seed) -> ParticleCloud:
    """Bridson-style adaptive Poisson-disk sampling over the density field.

    Pairwise invariant: |x_p - x_q| >= min(r_p, r_q). Candidates whose
    density falls below DENSITY_EPS are rejected outright. Per parent, the
    ring candidates are drawn in one batch (density and gradient queries are
    vectorized) but accepted sequentially so the blue-noise check always
    sees previously accepted points.
    """
    if r_bar <= 0 or kappa <= 0:
        raise ValueError("r_bar and kappa must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = field.bounds()
    span = hi - lo

    cell = r_bar  # candidates have r <= r_bar, so the 27-cell stencil suffices
    grid: dict[tuple, list[int]] = {}
    cap = 1024
    pts = np.empty((cap, 3))
    radii = np.empty(cap)
    dens = np.empty(cap)
    count = 0

    def cell_of(p):
        return (int((p[0] - lo[0]) // cell), int((p[1] - lo[1]) // cell),
                int((p[2] - lo[2]) // cell))

    def neighbors(p):
        cx, cy, cz = cell_of(p)
        idx = []
        for ix in range(cx - 1, cx + 2):
            for iy in range(cy - 1, cy + 2):
                for iz in range(cz - 1, cz + 2):
                    bucket = grid.get((ix, iy, iz))
                    if bucket:
                        idx.extend(bucket)
        return idx

    def fits(p, r):
        idx = neighbors(p)
        if not idx:
            return True
        d = np.linalg.norm(pts[idx] - p, axis=1)
        return bool(np.all(d >= np.minimum(r, radii[idx])))

    def accept(p, r, sigma):
        nonlocal cap, pts, radii, dens, count
        if count == cap:
            cap *= 2
            pts = np.resize(pts, (cap, 3))
            radii = np.resize(radii, cap)
            dens = np.resize(dens, cap)
        pts[count], radii[count], dens[count] = p, r, sigma
        grid.setdefault(cell_of(p), []).append(count)
        count += 1
        return count - 1

    def probe_seed(budget):
        """Random probe for a valid, non-conflicting point (covers
        disconnected components the ring growth cannot reach)."""
        while budget > 0:
            batch = min(1024, budget)
            budget -= batch
            cand = lo + rng.random((batch, 3)) * span
            sigma = sample_density(field, cand)
            grad = np.linalg.norm(density_gradient(field, cand), axis=1)
            rc = np.minimum(r_bar, kappa * r_bar / np.sqrt(grad + GRAD_ALPHA))
            for j in np.flatnonzero(sigma >= DENSITY_EPS):
                if fits(cand[j], rc[j]):
                    return cand[j], rc[j], float(sigma[j]), budget
        return None, None, None, 0

    p0, r0, sigma0, _ = probe_seed(MAX_SEED_PROBES)
    if p0 is None:
        raise EmptyFieldError(
            f"no seed particle found after {MAX_SEED_PROBES} random probes"
        )
    active = [accept(p0, r0, sigma0)]
    probes_left = RESEED_PROBES

    while active or probes_left > 0:
        if not active:
            p, r, sigma, probes_left = probe_seed(probes_left)
            if p is None:
                break
            active.append(accept(p, r, sigma))
        pick = int(rng.integers(len(active)))
        parent = active[pick]
        rp = radii[parent]
        direction = rng.normal(size=(RING_CANDIDATES, 3))
        norm = np.linalg.norm(direction, axis=1)
        ok = norm > 1e-12
        direction[ok] /= norm[ok, None]
        # uniform in the annulus volume [r_p, 2 r_p]
        rho = rp * (1.0 + 7.0 * rng.random(RING_CANDIDATES)) ** (1.0 / 3.0)
        cand = pts[parent] + rho[:, None] * direction
        ok &= np.all((cand >= lo) & (cand <= hi), axis=1)
        sigma = np.where(ok, sample_density(field, cand), 0.0)
        ok &= sigma >= DENSITY_EPS
        grad = np.linalg.norm(density_gradient(field, cand), axis=1)
        rc = np.minimum(r_bar, kappa * r_bar / np.sqrt(grad + GRAD_ALPHA))
        placed = False
        for j in np.flatnonzero(ok):
            if fits(cand[j], rc[j]):
                active.append(accept(cand[j], rc[j], float(sigma[j])))
                placed = True
        if not placed:
            active.pop(pick)

    positions = pts[:count].copy()
    final_radii = radii[:count].copy()
    return ParticleCloud(
        positions=positions,
        radii=final_radii,
        volumes=(4.0 / 3.0) * np.pi * final_radii**3,
        densities=dens[:count].copy(),
    )


def _kmeanspp(positions, weights, n, rng):
    idx = [int(rng.choice(len(positions), p=weights / weights.sum()))]
    d2 = np.full(len(positions), np.inf)
    for _ in range(n - 1):
        diff = positions - positions[idx[-1]]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", diff, diff))
        probs = weights * d2
        total = probs.sum()
        if total <= 0:
            # remaining points coincide with chosen centers: pick unchosen
            remaining = np.setdiff1d(np.arange(len(positions)), idx)
            idx.append(int(remaining[0]))
            continue
        idx.append(int(rng.choice(len(positions), p=probs / total)))
    return positions[idx].copy()


def select_kernels(cloud: ParticleCloud, n, seed, max_iters=200) -> KernelSet:
    """Volume-weighted k-means (Lloyd) over particles; k-means++ init.

    The converged centers are volume-weighted centroids of their member
    particles, and support radii are set so every particle sees at least
    min(MIN_COVERAGE, n) kernels.
    """
    npart = len(cloud)
    if not 1 <= n <= npart:
        raise ValueError(f"kernel count n={n} must be within [1, particle count {npart}]")
    rng = np.random.default_rng(seed)
    w = cloud.volumes
    centers = _kmeanspp(cloud.positions, w, n, rng)

    assign = None
    for _ in range(max_iters):
        d2 = ((cloud.positions[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        for i in range(n):
            sel = new_assign == i
            if not np.any(sel):
                far = int(np.argmax(d2.min(axis=1)))
                centers[i] = cloud.positions[far]
                new_assign[far] = i
                sel = new_assign == i
            ws = w[sel]
            centers[i] = (cloud.positions[sel] * ws[:, None]).sum(axis=0) / ws.sum()
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign

    radii = _support_radii(centers, cloud.positions)
    return KernelSet(centers=centers, radii=radii)


def _support_radii(centers, particles):
    n = len(centers)
    c_eff = min(MIN_COVERAGE, n)
    if n == 1:
        base = np.array([np.linalg.norm(particles - centers[0], axis=1).max()])
        radii = SUPPORT_GAMMA * np.maximum(base, 1e-12)
    else:
        tree = cKDTree(centers)
        k = min(c_eff + 1, n)  # +1: query includes the center itself
        dist, _ = tree.query(centers, k=k)
        radii = SUPPORT_GAMMA * dist[:, -1]
    # grow radii minimally until every particle is covered c_eff times
    for _ in range(64):
        d = np.linalg.norm(particles[:, None, :] - centers[None, :, :], axis=2)
        covered = (d < radii[None, :]).sum(axis=1)
        bad = np.flatnonzero(covered < c_eff)
        if len(bad) == 0:
            break
        for p in bad:
            order = np.argsort(d[p])[:c_eff]
            for i in order:
                if d[p, i] >= radii[i]:
                    radii[i] = 1.05 * d[p, i]
    return radii


def place_integrator_points(cloud: ParticleCloud, kernels: KernelSet, m_extra, seed=None):
    """Kernel centers plus m_extra farthest-point-initialized, Lloyd-relaxed IPs.

    Returns (positions (n+m, 3), kernel_ip mask). The seed argument is
    accepted for interface symmetry; placement is deterministic.
    """
    if m_extra < 0:
        raise ValueError("m_extra must be nonnegative")
    n = len(kernels)
    ips = [c.copy() for c in kernels.centers]
    if m_extra > 0:
        dmin = np.min(
            np.linalg.norm(cloud.positions[:, None, :] - kernels.centers[None], axis=2),
            axis=1,
        )
        for _ in range(m_extra):
            far = int(np.argmax(dmin))
            ips.append(cloud.positions[far].copy())
            dmin = np.minimum(dmin, np.linalg.norm(cloud.positions - ips[-1], axis=1))
        pos = np.array(ips)
        for _ in range(LLOYD_IP_ITERS):
            d2 = ((cloud.positions[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
            assign = np.argmin(d2, axis=1)
            for j in range(n, n + m_extra):
                sel = assign == j
                if np.any(sel):
                    ws = cloud.volumes[sel]
                    pos[j] = (cloud.positions[sel] * ws[:, None]).sum(axis=0) / ws.sum()
        ips = pos
    else:
        ips = np.array(ips).reshape(n, 3)
    kernel_ip = np.zeros(len(ips), dtype=bool)
    kernel_ip[:n] = True
    return np.asarray(ips), kernel_ip


def fit_cuboid(cloud: ParticleCloud, ip_position, K=16, neighbor_mask=None):
    """Eigen-fit an integration cuboid from the K nearest particles.

    Covariance is centered at the IP. Edge lengths share the ratio of the
    covariance eigenvalue square roots, with their product pinned to the
    total neighbor volume; near-zero eigenvalue axes (coplanar neighborhoods)
    get a small edge proportional to the largest regular one. Returns
    (axes (3,3) columns, edges (3,), volume), edges sorted descending.
    """
    ip_position = np.asarray(ip_position, dtype=np.float64)
    positions = cloud.positions
    volumes = cloud.volumes
    if neighbor_mask is not None:
        positions = positions[neighbor_mask]
        volumes = volumes[neighbor_mask]
    if len(positions) < K:
        raise ValueError(f"cuboid fit needs at least K={K} particles, have {len(positions)}")
    if K < 4:
        raise ValueError("K must be at least 4")
    d2 = ((positions - ip_position) ** 2).sum(axis=1)
    nearest = np.argsort(d2, kind="stable")[:K]
    rel = positions[nearest] - ip_position
    vols = volumes[nearest]
    total_volume = vols.sum()
    C = np.einsum("j,ja,jb->ab", vols, rel, rel)
    lam, vec = np.linalg.eigh(C)
    lam = lam[::-1].copy()
    vec = vec[:, ::-1].copy()
    lam[lam < 0] = 0.0

    degenerate = lam < DEGENERATE_EIG_RATIO * max(lam[0], 1e-300)
    reg = ~degenerate
    h = np.zeros(3)
    sq = np.sqrt(lam[reg])
    scale = (total_volume / np.prod(sq)) ** (1.0 / reg.sum())
    h[reg] = scale * sq
    if np.any(degenerate):
        h[degenerate] = DEGENERATE_EDGE_FACTOR * h[reg].max()

    # deterministic axis orientation: dominant component positive, right-handed
    for i in range(3):
        j = np.argmax(np.abs(vec[:, i]))
        if vec[j, i] < 0:
            vec[:, i] = -vec[:, i]
    if np.linalg.det(vec) < 0:
        vec[:, 2] = -vec[:, 2]
    return vec, h, float(h.prod())


def build_ip_set(cloud, kernels, m_extra, seed=None, K=16, visibility=None) -> IPSet:
    """Place IPs and fit their cuboids in one pass."""
    positions, kernel_ip = place_integrator_points(cloud, kernels, m_extra, seed)
    m = len(positions)
    axes = np.empty((m, 3, 3))
    edges = np.empty((m, 3))
    vols = np.empty(m)
    for k in range(m):
        mask = visibility(positions[k]) if visibility is not None else None
        axes[k], edges[k], vols[k] = fit_cuboid(cloud, positions[k], K=K, neighbor_mask=mask)
    return IPSet(positions=positions, axes=axes, edges=edges, volumes=vols, kernel_ip=kernel_ip)

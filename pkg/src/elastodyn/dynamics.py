"""Reduced elastodynamics: mass/stiffness assembly, constraints, cutting,
and implicit-Euler time stepping with a line-searched Newton solver.

Each step minimizes the incremental objective
    E(q) = 1/2 |q - q*|_M^2 + damping/2 * h |q - q_n|_M^2 + h^2 (U(q) - q.f)
over the unpinned DOFs, with q* = q_n + h qdot_n. The Newton matrix uses a
positive-semidefinite projection of the energy Hessian (per-quadrature-node
eigenvalue clamp for Neo-Hookean, the frozen-rotation Gram form for the
rotation penalty, whose tangent is then constant and its factorization
cached across steps).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field as dataclass_field

import numpy as np
import scipy.linalg as sla

from . import gmls, material as mat
from .material import MaterialParams
from .sampling import IPSet, fit_cuboid

NEWTON_MAX_ITERS = 10
NEWTON_TOL = 1e-6
LINESEARCH_C = 1e-4
LINESEARCH_MAX_BACKTRACKS = 20


class StepFailure(RuntimeError):
    """Newton matrix factorization failed after PSD projection."""


@dataclass(frozen=True)
class CutQuad:
    """Finite planar rectangle: origin corner plus two edge vectors."""

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray

    def __post_init__(self):
        for name in ("origin", "edge_u", "edge_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))


def segments_hit_quads(starts, ends, quads) -> np.ndarray:
    """True per segment when it crosses any of the rectangles."""
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    ends = np.atleast_2d(np.asarray(ends, dtype=np.float64))
    hit = np.zeros(len(starts), dtype=bool)
    for quad in quads:
        n = np.cross(quad.edge_u, quad.edge_v)
        d = ends - starts
        denom = d @ n
        live = np.abs(denom) > 1e-300
        t = np.zeros(len(starts))
        t[live] = ((quad.origin - starts[live]) @ n) / denom[live]
        on_seg = live & (t >= 0.0) & (t <= 1.0)
        p = starts + t[:, None] * d
        rel = p - quad.origin
        uu = quad.edge_u @ quad.edge_u
        vv = quad.edge_v @ quad.edge_v
        s = rel @ quad.edge_u / uu
        r = rel @ quad.edge_v / vv
        hit |= on_seg & (s >= 0.0) & (s <= 1.0) & (r >= 0.0) & (r <= 1.0)
    return hit


@dataclass
class StepStats:
    newton_iters: int = 0
    energy: float = 0.0
    kinetic: float = 0.0
    volume_ratio: float = 1.0
    assembly_ms: float = 0.0
    solve_ms: float = 0.0
    converged: bool = True


@dataclass
class IpTensors:
    """Padded per-IP shape tensors shared by assembly and rendering."""

    slot_idx: np.ndarray   # (K, S) global slot index (kernel*nt + t), 0-padded
    valid: np.ndarray      # (K, S) padding mask
    values: np.ndarray     # (K, S) shape values (zero on padding)
    grads: np.ndarray      # (K, S, 3)
    hess: np.ndarray       # (K, S, 3, 3)
    quad_off: np.ndarray   # (K, nq, 3) node offsets from the IP
    quad_wt: np.ndarray    # (K, nq)
    quad_B: np.ndarray     # (K, nq, S, 3) grads + hess . offset per node
    second_moment: np.ndarray  # (K, 3, 3)
    rows: list             # per IP: global DOF indices (true support only)
    local_n: np.ndarray    # (K,) true slot count per IP

    def rebuild_rows(self):
        self.rows = []
        nt_rows = []
        for k in range(len(self.slot_idx)):
            sl = self.slot_idx[k][self.valid[k]]
            rows = (sl[:, None] * 3 + np.arange(3)[None, :]).reshape(-1)
            nt_rows.append(rows)
        self.rows = nt_rows
        return self


def kernel_visibility(kernels, point, cuts):
    """Per-kernel visibility of a point: False when the segment to the
    kernel center crosses a cut."""
    if not cuts:
        return None
    n = len(kernels.centers)
    blocked = segments_hit_quads(
        np.broadcast_to(point, (n, 3)), kernels.centers, cuts
    )
    return ~blocked


def build_ip_tensors(cloud, kernels, ips: IPSet, order="quadratic", quad_pts=3,
                     cuts=(), k_covariance=16) -> IpTensors:
    """Evaluate shape tensors and quadrature data at every IP.

    With cuts present, cuboids are refit against cut-visible particles and
    kernel weights are masked by segment visibility.
    """
    m = len(ips)
    nt = gmls.n_slots(order)
    if cuts:
        for k in range(m):
            blocked = segments_hit_quads(
                np.broadcast_to(ips.positions[k], (len(cloud), 3)),
                cloud.positions,
                cuts,
            )
            visible = ~blocked
            if visible.sum() < k_covariance:
                warnings.warn(
                    f"IP {k}: cuts hide all but {int(visible.sum())} particles; "
                    "keeping unmasked neighbors for the cuboid fit"
                )
                visible = None
            ips.axes[k], ips.edges[k], ips.volumes[k] = fit_cuboid(
                cloud, ips.positions[k], K=k_covariance, neighbor_mask=visible
            )

    evs = []
    for k in range(m):
        mask = kernel_visibility(kernels, ips.positions[k], cuts)
        evs.append(
            gmls.evaluate_shapes(
                kernels, ips.positions[k], order=order, derivatives=2, mask=mask
            )
        )
    smax = max(len(ev.support) for ev in evs) * nt
    nq = quad_pts**3
    T = IpTensors(
        slot_idx=np.zeros((m, smax), dtype=np.int64),
        valid=np.zeros((m, smax), dtype=bool),
        values=np.zeros((m, smax)),
        grads=np.zeros((m, smax, 3)),
        hess=np.zeros((m, smax, 3, 3)),
        quad_off=np.zeros((m, nq, 3)),
        quad_wt=np.zeros((m, nq)),
        quad_B=np.zeros((m, nq, smax, 3)),
        second_moment=np.zeros((m, 3, 3)),
        rows=[],
        local_n=np.zeros(m, dtype=np.int64),
    )
    for k, ev in enumerate(evs):
        ns = len(ev.support)
        sl = (ev.support[:, None] * nt + np.arange(nt)[None, :]).reshape(-1)
        T.slot_idx[k, : ns * nt] = sl
        T.valid[k, : ns * nt] = True
        T.values[k, : ns * nt] = ev.values.reshape(-1)
        T.grads[k, : ns * nt] = ev.gradients.reshape(-1, 3)
        T.hess[k, : ns * nt] = ev.hessians.reshape(-1, 3, 3)
        offs, wts = mat.cuboid_quadrature(ips.axes[k], ips.edges[k], quad_pts)
        T.quad_off[k], T.quad_wt[k] = offs, wts
        T.quad_B[k] = T.grads[k][None] + np.einsum("sce,me->msc", T.hess[k], offs)
        T.second_moment[k] = mat.second_moment(ips.axes[k], ips.edges[k])
        rows = (sl[:, None] * 3 + np.arange(3)[None, :]).reshape(-1)
        T.rows.append(rows)
        T.local_n[k] = ns * nt
    return T


class Simulation:
    """Owner of the simulation state and all assembled operators."""

    def __init__(self, cloud, kernels, ips: IPSet, params: MaterialParams, dt,
                 gravity=(0.0, 0.0, -9.8), damping=0.0, order="quadratic",
                 quad_pts=3, ground=None, k_covariance=16, tensors=None):
        if dt <= 0:
            raise ValueError("time step must be positive")
        self.cloud = cloud
        self.kernels = kernels
        self.ips = ips
        self.params = params
        self.dt = float(dt)
        self.gravity = np.asarray(gravity, dtype=np.float64)
        self.damping = float(damping)
        self.order = order
        self.quad_pts = int(quad_pts)
        self.ground = ground  # None or dict(z=..., stiffness=...)
        self.k_covariance = int(k_covariance)

        self.nt = gmls.n_slots(order)
        self.n_kernels = len(kernels)
        self.ndof = 3 * self.nt * self.n_kernels

        self.q = np.zeros(self.ndof)
        self.qdot = np.zeros(self.ndof)
        self.t = 0.0
        self.cuts: list[CutQuad] = []
        self.pins: dict[int, np.ndarray] = {}
        self.point_forces: list[tuple[np.ndarray, np.ndarray]] = []  # (rows, values)
        self.last_stats = StepStats()

        self._rebuild(tensors)

    # ------------------------------------------------------------------ setup

    def _kernel_visibility(self, point):
        return kernel_visibility(self.kernels, point, self.cuts)

    def _rebuild(self, tensors=None):
        """(Re)compute all rest-pose tensors: shape data, cuboids, mass."""
        if tensors is None:
            tensors = build_ip_tensors(
                self.cloud, self.kernels, self.ips, order=self.order,
                quad_pts=self.quad_pts, cuts=self.cuts,
                k_covariance=self.k_covariance,
            )
        self.tensors = tensors
        self.ips.tensors = tensors

        self.mass = self._assemble_mass()
        e_g = np.zeros(self.ndof)
        e_g.reshape(-1, 3)[0 :: self.nt] = self.gravity
        self.gravity_force = self.mass @ e_g
        self._warn_isolated_kernels()
        self._invalidate_solver_cache()

    def _warn_isolated_kernels(self):
        if not self.cuts:
            return
        for i in range(self.n_kernels):
            d = np.linalg.norm(self.cloud.positions - self.kernels.centers[i], axis=1)
            near = np.flatnonzero(d < self.kernels.radii[i])
            if len(near) == 0:
                warnings.warn(f"isolated kernel {i}: no particle in support")
                continue
            blocked = segments_hit_quads(
                self.cloud.positions[near],
                np.broadcast_to(self.kernels.centers[i], (len(near), 3)),
                self.cuts,
            )
            if blocked.all():
                warnings.warn(f"isolated kernel {i}: cut away from all particles")

    def _invalidate_solver_cache(self):
        self._cached_tangent = None
        self._cached_factor = None

    def _assemble_mass(self):
        M = np.zeros((self.ndof, self.ndof))
        rho = self.params.rho
        T = self.tensors
        eye = np.eye(3)
        for k, rows in enumerate(T.rows):
            ns = T.local_n[k]
            nu = T.values[k, :ns]
            block = rho * self.ips.volumes[k] * np.einsum("s,t,rc->srtc", nu, nu, eye)
            M[np.ix_(rows, rows)] += block.reshape(len(rows), len(rows))
        return M

    # ------------------------------------------------------- kinematic fields

    def _gather(self, q):
        qs = q.reshape(-1, 3)
        return qs[self.tensors.slot_idx]  # (K, S, 3)

    def def_gradients(self, q=None):
        """F at every IP, (K, 3, 3)."""
        q = self.q if q is None else q
        Q = self._gather(q)
        return np.eye(3)[None] + np.einsum("ksr,ksc->krc", Q, self.tensors.grads)

    def grad_def_gradients(self, q=None):
        q = self.q if q is None else q
        Q = self._gather(q)
        return np.einsum("ksr,ksce->krce", Q, self.tensors.hess)

    def ip_displacements(self, q=None):
        q = self.q if q is None else q
        Q = self._gather(q)
        return np.einsum("ks,ksr->kr", self.tensors.values, Q)

    def volume_ratio(self, q=None):
        F = self.def_gradients(q)
        det = np.linalg.det(F)
        V = self.ips.volumes
        return float((V * det).sum() / V.sum())

    # -------------------------------------------------------------- potential

    def _node_F(self, q):
        Q = self._gather(q)
        return np.eye(3)[None, None] + np.einsum("ksr,kmsc->kmrc", Q, self.tensors.quad_B)

    def potential(self, q=None):
        """Total strain energy integrated over all IP cuboids."""
        q = self.q if q is None else q
        p = self.params
        if p.model == mat.ARAP:
            F0 = self.def_gradients(q)
            G = self.grad_def_gradients(q)
            R = mat.polar_rotations(F0)
            d = F0 - R
            per_ip = self.ips.volumes * np.einsum("kij,kij->k", d, d)
            per_ip = per_ip + np.einsum(
                "krce,kef,krcf->k", G, self.tensors.second_moment, G
            )
            return float(p.beta * per_ip.sum())
        Fm = self._node_F(q)
        psi = mat.nh_energy(Fm, p.mu, p.lam)
        return float((self.tensors.quad_wt * psi).sum())

    def internal_force(self, q=None):
        """-dU/dq assembled over IPs."""
        q = self.q if q is None else q
        p = self.params
        T = self.tensors
        if p.model == mat.ARAP:
            F0 = self.def_gradients(q)
            G = self.grad_def_gradients(q)
            R = mat.polar_rotations(F0)
            d = F0 - R
            floc = np.einsum("k,krc,ksc->ksr", self.ips.volumes, d, T.grads)
            floc += np.einsum("krce,kef,kscf->ksr", G, T.second_moment, T.hess)
            floc *= 2.0 * p.beta
        else:
            Fm = self._node_F(q)
            Pm = mat.nh_pk1(Fm, p.mu, p.lam)
            floc = np.einsum("km,kmrc,kmsc->ksr", T.quad_wt, Pm, T.quad_B, optimize=True)
        f = np.zeros((self.ndof // 3, 3))
        np.add.at(f, T.slot_idx, floc)
        return -f.reshape(-1)

    def _project_psd(self, Tn):
        lam, vec = np.linalg.eigh(Tn)
        lam = np.maximum(lam, 0.0)
        return np.einsum("...ij,...j,...kj->...ik", vec, lam, vec)

    def tangent_stiffness(self, q=None, project=False):
        """d2U/dq2; with project=True each quadrature node's 9x9 energy
        Hessian is eigenvalue-clamped to PSD before accumulation (the Newton
        matrix form)."""
        q = self.q if q is None else q
        p = self.params
        T = self.tensors
        K = np.zeros((self.ndof, self.ndof))
        if p.model == mat.ARAP:
            Kc = self._arap_constant_tangent()
            if project:
                return Kc
            F0 = self.def_gradients(q)
            dR = mat.rotation_gradient(F0).reshape(-1, 3, 3, 3, 3)
            corr = np.einsum(
                "k,krcpe,ksc,kte->ksrtp",
                2.0 * p.beta * self.ips.volumes, dR, T.grads, T.grads,
                optimize=True,
            )
            for k, rows in enumerate(T.rows):
                ns = T.local_n[k]
                blk = corr[k, :ns, :, :ns, :].reshape(len(rows), len(rows))
                K[np.ix_(rows, rows)] -= blk
            return Kc + K
        Fm = self._node_F(q)
        Tn = mat.nh_hessian(Fm, p.mu, p.lam)
        if project:
            Tn = self._project_psd(Tn)
        Kloc = self._chain_hessian(Tn)
        for k, rows in enumerate(T.rows):
            ns = T.local_n[k]
            blk = Kloc[k, :ns, :, :ns, :].reshape(len(rows), len(rows))
            K[np.ix_(rows, rows)] += blk
        return K

    def _chain_hessian(self, Tn):
        """Pull the per-node 9x9 energy Hessians back to local coordinates:
        Kloc[k, s, r, t, p] = sum_m w_m T[m,(r,c),(p,e)] B[m,s,c] B[m,t,e],
        organized as two batched matmuls."""
        T = self.tensors
        nip, nq, S = T.quad_B.shape[0], T.quad_B.shape[1], T.quad_B.shape[2]
        T4 = Tn.reshape(nip, nq, 3, 3, 3, 3)
        # tmp[k,m,s,(r,p,e)] = sum_c B[k,m,s,c] T4[k,m,r,c,p,e]
        M1 = np.ascontiguousarray(T4.transpose(0, 1, 3, 2, 4, 5)).reshape(
            nip, nq, 3, 27
        )
        tmp = np.matmul(T.quad_B, M1)  # (nip, nq, S, 27)
        tmp *= T.quad_wt[:, :, None, None]
        tmp = np.ascontiguousarray(
            tmp.reshape(nip, nq, S, 9, 3).transpose(0, 2, 3, 1, 4)
        ).reshape(nip, S * 9, nq * 3)
        B2 = np.ascontiguousarray(T.quad_B.transpose(0, 1, 3, 2)).reshape(
            nip, nq * 3, S
        )
        out = np.matmul(tmp, B2)  # (nip, S*9, S)
        return out.reshape(nip, S, 3, 3, S).transpose(0, 1, 2, 4, 3)

    def _arap_constant_tangent(self):
        """Frozen-rotation tangent 2 beta (V D D^T + H M2 H) kron I3; constant
        in q, so it is assembled once (in slot space, then expanded) and
        reused."""
        if self._cached_tangent is not None:
            return self._cached_tangent
        T = self.tensors
        nip, S = T.grads.shape[0], T.grads.shape[1]
        gram = self.ips.volumes[:, None, None] * np.matmul(
            T.grads, T.grads.transpose(0, 2, 1)
        )
        HM = np.matmul(T.hess.reshape(nip, S * 3, 3), T.second_moment).reshape(
            nip, S, 9
        )
        gram += np.matmul(HM, T.hess.reshape(nip, S, 9).transpose(0, 2, 1))
        gram *= 2.0 * self.params.beta
        nslots = self.ndof // 3
        Ks = np.zeros((nslots, nslots))
        for k in range(nip):
            ns = T.local_n[k]
            sl = T.slot_idx[k, :ns]
            Ks[np.ix_(sl, sl)] += gram[k, :ns, :ns]
        K = (Ks[:, None, :, None] * np.eye(3)[None, :, None, :]).reshape(
            self.ndof, self.ndof
        )
        self._cached_tangent = K
        return K

    # ------------------------------------------------------------ constraints

    def pinned_mask(self):
        mask = np.zeros(self.ndof, dtype=bool)
        for i in self.pins:
            base = i * self.nt * 3
            mask[base : base + self.nt * 3] = True
        return mask

    def pin_region(self, region, target=None):
        """Pin whole kernel blocks whose rest center satisfies the region.

        region: callable(center) -> bool, or dict {kind: aabb|sphere, ...}.
        target: None (hold current), displacement 3-vector, or a full block.
        Returns the pinned kernel indices.
        """
        pred = _region_predicate(region)
        picked = [i for i, c in enumerate(self.kernels.centers) if pred(c)]
        for i in picked:
            self.pin_kernel(i, target)
        return picked

    def pin_kernel(self, i, target=None):
        block = np.zeros(self.nt * 3)
        if target is None:
            block[:] = self.q[i * self.nt * 3 : (i + 1) * self.nt * 3]
        else:
            target = np.asarray(target, dtype=np.float64).reshape(-1)
            if target.shape == (3,):
                block[:3] = target
            elif target.shape == (self.nt * 3,):
                block[:] = target
            else:
                raise ValueError("pin target must be a displacement or a full block")
        self.pins[i] = block
        self._invalidate_factor_only()

    def unpin(self):
        self.pins.clear()
        self._invalidate_factor_only()

    def _invalidate_factor_only(self):
        self._cached_factor = None

    # ----------------------------------------------------------------- forces

    def apply_point_force(self, world_point, force, warp=None):
        """Map a world-space force at a (deformed) point into generalized
        coordinates via J^T at the rest-pose preimage.

        warp: optional callable mapping the deformed point to rest
        coordinates (identity when omitted, valid at/near the rest state).
        Returns False (with a warning) when the point is outside every
        kernel support.
        """
        point = np.asarray(world_point, dtype=np.float64)
        rest = np.asarray(warp(point), dtype=np.float64) if warp is not None else point
        try:
            ev = gmls.evaluate_shapes(
                self.kernels, rest, order=self.order, derivatives=0,
                mask=self._kernel_visibility(rest),
            )
        except gmls.OutsideSupportError:
            warnings.warn("point force ignored: outside all kernel supports")
            return False
        force = np.asarray(force, dtype=np.float64)
        sl = (ev.support[:, None] * self.nt + np.arange(self.nt)[None, :]).reshape(-1)
        vals = ev.values.reshape(-1)
        self.point_forces.append((sl, vals[:, None] * force[None, :]))
        return True

    def clear_forces(self):
        self.point_forces.clear()

    def external_force(self):
        f = np.zeros((self.ndof // 3, 3))
        for sl, contrib in self.point_forces:
            np.add.at(f, sl, contrib)
        return self.gravity_force + f.reshape(-1)

    # ------------------------------------------------------------------- cuts

    def cut(self, quad: CutQuad):
        """Register a cut rectangle and re-precompute all rest tensors."""
        self.cuts.append(quad)
        self._rebuild()

    # ------------------------------------------------------------- step logic

    def _ground_terms(self, q, want="energy"):
        if not self.ground:
            return 0.0 if want == "energy" else (np.zeros(self.ndof), None)
        z0 = float(self.ground["z"])
        kg = float(self.ground["stiffness"])
        T = self.tensors
        u = self.ip_displacements(q)
        z = self.ips.positions[:, 2] + u[:, 2]
        depth = np.maximum(z0 - z, 0.0)
        V = self.ips.volumes
        if want == "energy":
            return 0.5 * kg * float((V * depth**2).sum())
        grad = np.zeros((self.ndof // 3, 3))
        coeff = -kg * V * depth  # dE/du_z
        np.add.at(grad, T.slot_idx, (coeff[:, None] * T.values)[:, :, None] * np.array([0.0, 0.0, 1.0]))
        H = np.zeros((self.ndof, self.ndof))
        active = np.flatnonzero(depth > 0)
        for k in active:
            rows = T.rows[k]
            ns = T.local_n[k]
            nu = T.values[k, :ns]
            zz = np.zeros((3, 3))
            zz[2, 2] = 1.0
            blk = kg * V[k] * np.einsum("s,t,rc->srtc", nu, nu, zz)
            H[np.ix_(rows, rows)] += blk.reshape(len(rows), len(rows))
        return grad.reshape(-1), H

    def _objective(self, q, qstar, qn, fq):
        h = self.dt
        dq = q - qstar
        E = 0.5 * dq @ (self.mass @ dq)
        if self.damping > 0:
            dn = q - qn
            E += 0.5 * self.damping * h * dn @ (self.mass @ dn)
        E += h * h * (self.potential(q) - q @ fq)
        if self.ground:
            E += h * h * self._ground_terms(q, "energy")
        return E

    def _objective_grad(self, q, qstar, qn, fq):
        h = self.dt
        g = self.mass @ (q - qstar)
        if self.damping > 0:
            g += self.damping * h * (self.mass @ (q - qn))
        g += h * h * (-self.internal_force(q) - fq)
        if self.ground:
            gg, _ = self._ground_terms(q, "grad")
            g += h * h * gg
        return g

    def _newton_matrix(self, q):
        h = self.dt
        A = (1.0 + self.damping * h) * self.mass + h * h * self.tangent_stiffness(
            q, project=True
        )
        if self.ground:
            _, H = self._ground_terms(q, "grad")
            A += h * h * H
        return A

    def step(self):
        """Advance one implicit-Euler step; returns StepStats."""
        h = self.dt
        stats = StepStats()
        qn = self.q.copy()
        free = ~self.pinned_mask()
        q = self.q.copy()
        for i, block in self.pins.items():
            q[i * self.nt * 3 : (i + 1) * self.nt * 3] = block
        qstar = qn + h * self.qdot
        fq = self.external_force()

        arap_cacheable = (
            self.params.model == mat.ARAP and not self.ground
        )
        t_assm = t_solve = 0.0
        grad0_norm = None
        best_q, best_E = q.copy(), None
        factor = None  # reused within the step (modified Newton)
        factor_fresh = False
        for it in range(NEWTON_MAX_ITERS):
            t0 = time.perf_counter()
            g = self._objective_grad(q, qstar, qn, fq)[free]
            t_assm += time.perf_counter() - t0
            gnorm = np.linalg.norm(g)
            if grad0_norm is None:
                grad0_norm = gnorm
            if gnorm <= NEWTON_TOL * max(1.0, grad0_norm):
                break
            stats.newton_iters = it + 1

            if factor is None and arap_cacheable and self._cached_factor is not None:
                factor = self._cached_factor
                factor_fresh = False
            if factor is None:
                t1 = time.perf_counter()
                A = self._newton_matrix(q)[np.ix_(free, free)]
                t_assm += time.perf_counter() - t1
                t1 = time.perf_counter()
                try:
                    factor = sla.cho_factor(A, lower=True, check_finite=False)
                except np.linalg.LinAlgError as exc:
                    raise StepFailure(
                        f"Newton matrix factorization failed at iteration {it}"
                    ) from exc
                factor_fresh = True
                if arap_cacheable:
                    self._cached_factor = factor
                t_solve += time.perf_counter() - t1
            t1 = time.perf_counter()
            dq = sla.cho_solve(factor, -g, check_finite=False)
            t_solve += time.perf_counter() - t1

            E_base = self._objective(q, qstar, qn, fq)
            if best_E is None or E_base < best_E:
                best_E, best_q = E_base, q.copy()
            slope = g @ dq
            alpha = 1.0
            accepted = False
            for _ in range(LINESEARCH_MAX_BACKTRACKS):
                trial = q.copy()
                trial[free] += alpha * dq
                try:
                    E_trial = self._objective(trial, qstar, qn, fq)
                except mat.InvertedElementError:
                    E_trial = np.inf
                if E_trial <= E_base + LINESEARCH_C * alpha * slope:
                    q = trial
                    accepted = True
                    if E_trial < best_E:
                        best_E, best_q = E_trial, trial.copy()
                    break
                alpha *= 0.5
            if accepted and alpha < 0.25 and not factor_fresh:
                factor = None  # stale matrix slowed us down; refresh next time
            if not accepted:
                if not factor_fresh and not arap_cacheable:
                    factor = None  # retry the iteration with a fresh matrix
                    continue
                warnings.warn("line search failed; keeping best-energy iterate")
                q = best_q
                stats.converged = False
                break

        self.qdot = (q - qn) / h
        self.q = q
        self.t += h
        stats.energy = self.potential(q)
        stats.kinetic = 0.5 * self.qdot @ (self.mass @ self.qdot)
        stats.volume_ratio = self.volume_ratio(q)
        stats.assembly_ms = t_assm * 1e3
        stats.solve_ms = t_solve * 1e3
        self.last_stats = stats
        return stats

    def reset(self):
        self.q = np.zeros(self.ndof)
        self.qdot = np.zeros(self.ndof)
        self.t = 0.0
        self.point_forces.clear()

    def set_dt(self, dt):
        if dt <= 0:
            raise ValueError("time step must be positive")
        self.dt = float(dt)
        self._invalidate_factor_only()

    def set_material(self, params: MaterialParams):
        rho_changed = params.rho != self.params.rho
        self.params = params
        self._invalidate_solver_cache()
        if rho_changed:
            self.mass = self._assemble_mass()
            e_g = np.zeros(self.ndof)
            e_g.reshape(-1, 3)[0 :: self.nt] = self.gravity
            self.gravity_force = self.mass @ e_g

    def set_damping(self, damping):
        self.damping = float(damping)
        self._invalidate_factor_only()

    # ------------------------------------------------------------ conveniences

    def translation_coordinate(self, t):
        """q encoding the rigid translation u(x) = t."""
        e = np.zeros(self.ndof)
        e.reshape(-1, 3)[0 :: self.nt] = np.asarray(t, dtype=np.float64)
        return e

    def com_displacement(self, q=None):
        """Mass-weighted mean IP displacement."""
        u = self.ip_displacements(self.q if q is None else q)
        w = self.ips.volumes
        return (u * w[:, None]).sum(axis=0) / w.sum()


def _region_predicate(region):
    if callable(region):
        return region
    kind = region.get("kind")
    if kind == "aabb":
        lo = np.asarray(region["min"], dtype=np.float64)
        hi = np.asarray(region["max"], dtype=np.float64)
        return lambda c: bool(np.all(c >= lo) and np.all(c <= hi))
    if kind == "sphere":
        ctr = np.asarray(region["center"], dtype=np.float64)
        rad = float(region["radius"])
        return lambda c: bool(np.linalg.norm(c - ctr) <= rad)
    raise ValueError(f"unknown pin region kind {kind!r}")

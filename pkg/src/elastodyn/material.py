"""Hyperelastic energy models and per-cuboid integration.

Two models: compressible Neo-Hookean with a log-determinant volume barrier,
and the rotation-penalty (ARAP) energy beta * ||F - R(F)||_F^2. Stress and
Hessian formulas are closed-form; the Hessian of the rotation penalty
includes the derivative of the polar rotation via the SVD twist modes.

Cuboid integration uses tensor-product Gauss-Legendre quadrature on the
deformation gradient linearized in the local offset h. For the rotation
penalty (rotation frozen at the cuboid center) the integrand is exactly
quadratic in h, and a closed form via the cuboid second moment is provided
as a fast path.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

NEO_HOOKEAN = "neo_hookean"
ARAP = "arap"


class InvertedElementError(FloatingPointError):
    """det F <= 0 where the Neo-Hookean log barrier is undefined."""


def lame_from_young_poisson(E, nu):
    """(mu, lambda) from Young's modulus and Poisson ratio; nu in [0, 0.5)."""
    if E <= 0:
        raise ValueError("Young's modulus must be positive")
    if not 0.0 <= nu < 0.5:
        raise ValueError("incompressible limit unsupported: need 0 <= nu < 0.5")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


@dataclass(frozen=True)
class MaterialParams:
    model: str = NEO_HOOKEAN
    E: float = 1.0e4
    nu: float = 0.3
    beta: float = 1.0e4
    rho: float = 1.0e3
    mu: float = dataclass_field(init=False, default=0.0)
    lam: float = dataclass_field(init=False, default=0.0)

    def __post_init__(self):
        if self.model not in (NEO_HOOKEAN, ARAP):
            raise ValueError(f"unknown material model {self.model!r}")
        if self.rho <= 0:
            raise ValueError("mass density must be positive")
        if self.model == ARAP and self.beta <= 0:
            raise ValueError("ARAP stiffness beta must be positive")
        mu, lam = lame_from_young_poisson(self.E, self.nu)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "lam", lam)


def polar_rotation(F):
    """Rotation factor of F via SVD, reflections folded into the stretch."""
    U, s, Vt = np.linalg.svd(F)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


def polar_rotations(F):
    """Batched polar rotations for (N, 3, 3) inputs."""
    U, s, Vt = np.linalg.svd(F)
    det = np.linalg.det(np.einsum("nij,njk->nik", U, Vt))
    flip = det < 0
    U = U.copy()
    U[flip, :, -1] = -U[flip, :, -1]
    return np.einsum("nij,njk->nik", U, Vt)


def _det3(F):
    return (
        F[..., 0, 0] * (F[..., 1, 1] * F[..., 2, 2] - F[..., 1, 2] * F[..., 2, 1])
        - F[..., 0, 1] * (F[..., 1, 0] * F[..., 2, 2] - F[..., 1, 2] * F[..., 2, 0])
        + F[..., 0, 2] * (F[..., 1, 0] * F[..., 2, 1] - F[..., 1, 1] * F[..., 2, 0])
    )


def _inv_transpose3(F, det):
    """Batched inverse-transpose via the adjugate."""
    cof = np.empty_like(F)
    cof[..., 0, 0] = F[..., 1, 1] * F[..., 2, 2] - F[..., 1, 2] * F[..., 2, 1]
    cof[..., 0, 1] = F[..., 1, 2] * F[..., 2, 0] - F[..., 1, 0] * F[..., 2, 2]
    cof[..., 0, 2] = F[..., 1, 0] * F[..., 2, 1] - F[..., 1, 1] * F[..., 2, 0]
    cof[..., 1, 0] = F[..., 0, 2] * F[..., 2, 1] - F[..., 0, 1] * F[..., 2, 2]
    cof[..., 1, 1] = F[..., 0, 0] * F[..., 2, 2] - F[..., 0, 2] * F[..., 2, 0]
    cof[..., 1, 2] = F[..., 0, 1] * F[..., 2, 0] - F[..., 0, 0] * F[..., 2, 1]
    cof[..., 2, 0] = F[..., 0, 1] * F[..., 1, 2] - F[..., 0, 2] * F[..., 1, 1]
    cof[..., 2, 1] = F[..., 0, 2] * F[..., 1, 0] - F[..., 0, 0] * F[..., 1, 2]
    cof[..., 2, 2] = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    return cof / det[..., None, None]


def nh_energy(F, mu, lam):
    """Batched Neo-Hookean energy density; raises on inversion."""
    F = np.asarray(F, dtype=np.float64)
    J = _det3(F)
    if np.any(J <= 0):
        raise InvertedElementError("inverted element: det F <= 0")
    Ic = np.einsum("...ij,...ij->...", F, F)
    logJ = np.log(J)
    return 0.5 * mu * (Ic - 3.0) - mu * logJ + 0.5 * lam * logJ**2


def nh_pk1(F, mu, lam):
    F = np.asarray(F, dtype=np.float64)
    J = _det3(F)
    if np.any(J <= 0):
        raise InvertedElementError("inverted element: det F <= 0")
    B = _inv_transpose3(F, J)
    logJ = np.log(J)
    return mu * F + (lam * logJ - mu)[..., None, None] * B


def nh_hessian(F, mu, lam):
    """Batched d2(energy)/dF2 as (..., 9, 9), row-major (row, col) vec order."""
    F = np.asarray(F, dtype=np.float64)
    J = _det3(F)
    if np.any(J <= 0):
        raise InvertedElementError("inverted element: det F <= 0")
    B = _inv_transpose3(F, J)
    logJ = np.log(J)
    shape = F.shape[:-2]
    eye9 = np.eye(9)
    Bv = B.reshape(shape + (9,))
    T = mu * np.broadcast_to(eye9, shape + (9, 9)).copy()
    T += lam * Bv[..., :, None] * Bv[..., None, :]
    # (mu - lam logJ) * B_il B_kj over vec indices (ij),(kl)
    corr = np.einsum("...il,...kj->...ijkl", B, B).reshape(shape + (9, 9))
    T += (mu - lam * logJ)[..., None, None] * corr
    return T


_TWIST_PAIRS = ((0, 1), (0, 2), (1, 2))


def rotation_gradient(F):
    """Batched d vec(R)/d vec(F) (…,9,9) of the polar rotation, via SVD."""
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 2
    Fb = F[None] if single else F
    U, s, Vt = np.linalg.svd(Fb)
    det = np.linalg.det(np.einsum("nij,njk->nik", U, Vt))
    U = U.copy()
    s = s.copy()
    flip = det < 0
    U[flip, :, -1] = -U[flip, :, -1]
    s[flip, -1] = -s[flip, -1]
    out = np.zeros(Fb.shape[:-2] + (9, 9))
    for i, j in _TWIST_PAIRS:
        E = np.zeros((3, 3))
        E[i, j] = 1.0
        E[j, i] = -1.0
        T = np.einsum("nab,bc,ncd->nad", U, E / np.sqrt(2.0), Vt)
        tv = T.reshape(-1, 9)
        denom = s[:, i] + s[:, j]
        out += (2.0 / denom)[:, None, None] * tv[:, :, None] * tv[:, None, :]
    return out[0] if single else out


def arap_energy(F, beta):
    F = np.asarray(F, dtype=np.float64)
    R = polar_rotations(F) if F.ndim == 3 else polar_rotation(F)
    d = F - R
    return beta * np.einsum("...ij,...ij->...", d, d)


def arap_pk1(F, beta):
    F = np.asarray(F, dtype=np.float64)
    R = polar_rotations(F) if F.ndim == 3 else polar_rotation(F)
    return 2.0 * beta * (F - R)


def arap_hessian(F, beta):
    """Exact ARAP Hessian 2*beta*(I9 - dR/dF)."""
    F = np.asarray(F, dtype=np.float64)
    shape = F.shape[:-2]
    eye9 = np.broadcast_to(np.eye(9), shape + (9, 9))
    return 2.0 * beta * (eye9 - rotation_gradient(F))


def energy_density(params: MaterialParams, F):
    """Energy per unit rest volume at deformation gradient F."""
    if params.model == NEO_HOOKEAN:
        return nh_energy(F, params.mu, params.lam)
    return arap_energy(F, params.beta)


def pk1(params: MaterialParams, F):
    """First Piola-Kirchhoff stress dPsi/dF."""
    if params.model == NEO_HOOKEAN:
        return nh_pk1(F, params.mu, params.lam)
    return arap_pk1(F, params.beta)


def pk1_hessian(params: MaterialParams, F):
    """Exact d2Psi/dF2 as a 9x9 in row-major vec order."""
    if params.model == NEO_HOOKEAN:
        return nh_hessian(F, params.mu, params.lam)
    return arap_hessian(F, params.beta)


def energy_hessian_batch(params, F):
    if params.model == NEO_HOOKEAN:
        return nh_hessian(F, params.mu, params.lam)
    return arap_hessian(F, params.beta)


def gauss_nodes_1d(npts):
    return np.polynomial.legendre.leggauss(npts)


def cuboid_quadrature(axes, edges, npts=3):
    """Tensor-product Gauss-Legendre nodes/weights over an oriented cuboid.

    Returns (offsets (nq, 3), weights (nq,)); offsets are world-space
    displacements from the cuboid center.
    """
    xi, wt = gauss_nodes_1d(npts)
    pts = []
    wts = []
    half = np.asarray(edges, dtype=np.float64) / 2.0
    for a in range(npts):
        for b in range(npts):
            for c in range(npts):
                local = np.array([xi[a] * half[0], xi[b] * half[1], xi[c] * half[2]])
                pts.append(axes @ local)
                wts.append(wt[a] * wt[b] * wt[c] * half.prod())
    return np.array(pts), np.array(wts)


def second_moment(axes, edges):
    """Integral of h h^T over the cuboid: V * sum_i (h_i^2/12) c_i c_i^T."""
    V = float(np.prod(edges))
    M = np.zeros((3, 3))
    for i in range(3):
        c = axes[:, i]
        M += (edges[i] ** 2 / 12.0) * np.outer(c, c)
    return V * M


def integrate_cuboid(params, F0, grad_F, axes, edges, npts=3, derivatives=False):
    """Integral of the energy density over a cuboid with F(h) = F0 + grad_F . h.

    With derivatives=True also returns (dU/dF0, dU/dgrad_F) obtained by
    differentiating under the quadrature sum.
    """
    F0 = np.asarray(F0, dtype=np.float64)
    grad_F = np.asarray(grad_F, dtype=np.float64)
    offs, wts = cuboid_quadrature(axes, edges, npts)
    Fm = F0[None] + np.einsum("rce,me->mrc", grad_F, offs)
    psi = energy_density(params, Fm)
    U = float(wts @ psi)
    if not derivatives:
        return U
    Pm = pk1(params, Fm)
    dF0 = np.einsum("m,mrc->rc", wts, Pm)
    dGrad = np.einsum("m,mrc,me->rce", wts, Pm, offs)
    return U, dF0, dGrad


def arap_cuboid_closed(params, F0, grad_F, axes, edges, derivatives=False):
    """Closed-form cuboid integral of the rotation penalty (R frozen at F0).

    The integrand is exactly quadratic in h, so this equals the 3x3x3
    Gauss-Legendre result to rounding.
    """
    V = float(np.prod(edges))
    M2 = second_moment(axes, edges)
    R = polar_rotation(F0)
    d = F0 - R
    U = params.beta * (V * float(np.einsum("ij,ij->", d, d))
                       + float(np.einsum("rce,ef,rcf->", grad_F, M2, grad_F)))
    if not derivatives:
        return U
    dF0 = 2.0 * params.beta * V * d
    dGrad = 2.0 * params.beta * np.einsum("rce,ef->rcf", grad_F, M2)
    return U, dF0, dGrad

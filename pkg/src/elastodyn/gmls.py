"""Generalized moving-least-squares interpolation with derivative targets.

Each kernel carries a local jet of the displacement field: the value, the
three first derivatives, and (in quadratic mode) the six distinct second
derivatives, i.e. 10 scalar slots = 30 DOFs per kernel and component.
Shape functions arise from a weighted least-squares fit of a polynomial to
those jets; the fit is performed in coordinates shifted to the query point,
which keeps the moment matrix well conditioned regardless of where the
model sits in space and leaves the interpolant itself unchanged.

The moment matrix, its first and second spatial derivatives, and hence the
shape-function derivatives needed for deformation gradients are all
assembled analytically; the weight, the shifted basis, and the inverse
moment matrix are differentiated by the product rule. Because the basis is
(at most) quadratic, third derivatives of basis vectors vanish, which keeps
the bookkeeping finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

# second-derivative slot ordering: xx, yy, zz, xy, xz, yz
SECOND_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


class OutsideSupportError(ValueError):
    """Query point not covered by any kernel support."""


class DegenerateKernelError(ValueError):
    """Moment matrix numerically singular beyond the regularization floor."""


def n_basis(order: str) -> int:
    return 10 if order == "quadratic" else 4


def n_slots(order: str) -> int:
    return 10 if order == "quadratic" else 4


def dofs_per_kernel(order: str) -> int:
    return 3 * n_slots(order)


def _check_order(order):
    if order not in ("quadratic", "linear"):
        raise ValueError(f"interpolation order must be quadratic or linear, got {order!r}")


def basis_values(d, order):
    """Monomial vector p(d) for each row of d, shape (N, nb)."""
    d = np.atleast_2d(d)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    one = np.ones_like(x)
    cols = [one, x, y, z]
    if order == "quadratic":
        cols += [x * x, y * y, z * z, x * y, x * z, y * z]
    return np.stack(cols, axis=-1)


def basis_gradients(d, order):
    """First derivatives p_,j(d), shape (N, 3, nb)."""
    d = np.atleast_2d(d)
    n = len(d)
    nb = n_basis(order)
    out = np.zeros((n, 3, nb))
    out[:, 0, 1] = 1.0
    out[:, 1, 2] = 1.0
    out[:, 2, 3] = 1.0
    if order == "quadratic":
        x, y, z = d[:, 0], d[:, 1], d[:, 2]
        out[:, 0, 4] = 2 * x
        out[:, 0, 7] = y
        out[:, 0, 8] = z
        out[:, 1, 5] = 2 * y
        out[:, 1, 7] = x
        out[:, 1, 9] = z
        out[:, 2, 6] = 2 * z
        out[:, 2, 8] = x
        out[:, 2, 9] = y
    return out


def basis_second_table(order):
    """Constant second derivatives p_,jk as a (3, 3, nb) table."""
    nb = n_basis(order)
    tab = np.zeros((3, 3, nb))
    if order == "quadratic":
        tab[0, 0, 4] = 2.0
        tab[1, 1, 5] = 2.0
        tab[2, 2, 6] = 2.0
        tab[0, 1, 7] = tab[1, 0, 7] = 1.0
        tab[0, 2, 8] = tab[2, 0, 8] = 1.0
        tab[1, 2, 9] = tab[2, 1, 9] = 1.0
    return tab


def weight(x, center, radius):
    """Compactly supported MLS weight (1 - ||d/R||^2)^3, zero at the boundary."""
    v = np.asarray(x, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    s = v @ v / (radius * radius)
    return (1.0 - s) ** 3 if s < 1.0 else 0.0


def _weights_and_derivs(x, centers, radii, derivatives):
    v = x[None, :] - centers
    r2 = radii * radii
    s = np.einsum("ij,ij->i", v, v) / r2
    inside = s < 1.0
    one_m = np.where(inside, 1.0 - s, 0.0)
    w = one_m**3
    dw = d2w = None
    if derivatives >= 1:
        dw = (-6.0 * one_m**2 / r2)[:, None] * v
    if derivatives >= 2:
        d2w = (24.0 * one_m / (r2 * r2))[:, None, None] * v[:, :, None] * v[:, None, :]
        d2w -= (6.0 * one_m**2 / r2)[:, None, None] * np.eye(3)[None]
    return w, dw, d2w, inside


def _slot_basis(d, order):
    """Per-kernel slot basis S[i, t, :] and its x-derivatives dS, d2S."""
    nt = n_slots(order)
    nb = n_basis(order)
    n = len(d)
    sec = basis_second_table(order)
    S = np.zeros((n, nt, nb))
    S[:, 0, :] = basis_values(d, order)
    P1 = basis_gradients(d, order)
    S[:, 1:4, :] = P1
    if order == "quadratic":
        for k, (j, l) in enumerate(SECOND_PAIRS):
            S[:, 4 + k, :] = sec[j, l]
    # d/dx_a of p^{(t)}(x_i - x): one sign flip per derivative order
    dS = np.zeros((n, nt, nb, 3))
    for a in range(3):
        dS[:, 0, :, a] = -P1[:, a, :]
        for j in range(3):
            dS[:, 1 + j, :, a] = -sec[j, a]
    d2S = np.zeros((n, nt, nb, 3, 3))
    d2S[:, 0] = sec.transpose(2, 0, 1)[None]
    return S, dS, d2S


@dataclass(frozen=True)
class ShapeEvaluation:
    """Shape values (and optional spatial derivatives) at one query point.

    ``values[i, t]`` multiplies the t-th jet slot of support kernel i in the
    displacement interpolant; ``gradients``/``hessians`` are its first and
    second derivatives with respect to the query point.
    """

    support: np.ndarray
    values: np.ndarray
    gradients: np.ndarray | None = None
    hessians: np.ndarray | None = None


def _support(kernels, x, mask):
    d = kernels.centers - x[None, :]
    dist2 = np.einsum("ij,ij->i", d, d)
    ok = dist2 < kernels.radii**2
    if mask is not None:
        ok &= mask
    return np.flatnonzero(ok)


def _moment_chol(G):
    mu = 1e-8 * np.trace(G) / G.shape[0]
    Greg = G + mu * np.eye(G.shape[0])
    try:
        return sla.cho_factor(Greg, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DegenerateKernelError(
            f"degenerate kernel configuration (cond ~ {np.linalg.cond(G):.3e})"
        ) from exc


def _refined_solver(G, chol):
    """Solver for G y = rhs using the regularized factorization plus two
    refinement sweeps, which cancels the regularization bias whenever G is
    invertible while staying bounded for singular G."""

    def solve(rhs):
        y = sla.cho_solve(chol, rhs)
        for _ in range(2):
            y = y + sla.cho_solve(chol, rhs - G @ y)
        return y

    return solve


def evaluate_shapes(kernels, x, order="quadratic", derivatives=2, mask=None):
    """Shape values N, their gradients, and Hessians at point x.

    mask, when given, is a boolean per-kernel visibility vector (cut
    surfaces zero a kernel's weight for this query point).
    """
    _check_order(order)
    x = np.asarray(x, dtype=np.float64)
    sup = _support(kernels, x, mask)
    if len(sup) == 0:
        raise OutsideSupportError("point outside all kernel supports")
    centers = kernels.centers[sup]
    radii = kernels.radii[sup]
    w, dw, d2w, _ = _weights_and_derivs(x, centers, radii, derivatives)
    d = centers - x[None, :]
    S, dS, d2S = _slot_basis(d, order)

    G = np.einsum("i,itb,itc->bc", w, S, S, optimize=True)
    chol = _moment_chol(G)
    solve = _refined_solver(G, chol)
    nb = G.shape[0]
    e1 = np.zeros(nb)
    e1[0] = 1.0
    g = solve(e1)

    values = w[:, None] * (S @ g)
    if derivatives == 0:
        return ShapeEvaluation(sup, values)

    t1 = np.einsum("ia,itb,itc->bca", dw, S, S, optimize=True)
    t2 = np.einsum("i,itba,itc->bca", w, dS, S, optimize=True)
    dG = t1 + t2 + t2.transpose(1, 0, 2)
    g_a = -np.stack([solve(dG[:, :, a] @ g) for a in range(3)], axis=-1)

    Sg = S @ g  # (ns, nt)
    Sga = np.einsum("itb,ba->ita", S, g_a)
    dSg = np.einsum("itba,b->ita", dS, g)
    grads = dw[:, None, :] * Sg[:, :, None] + w[:, None, None] * (Sga + dSg)
    if derivatives == 1:
        return ShapeEvaluation(sup, values, grads)

    u1 = np.einsum("iab,itc,itd->cdab", d2w, S, S, optimize=True)
    u2 = np.einsum("ia,itcb,itd->cdab", dw, dS, S, optimize=True)
    u2 = u2 + u2.transpose(1, 0, 2, 3)
    u3 = u2.transpose(0, 1, 3, 2)
    u4a = np.einsum("i,itcab,itd->cdab", w, d2S, S, optimize=True)
    u4a = u4a + u4a.transpose(1, 0, 2, 3)
    u4b = np.einsum("i,itca,itdb->cdab", w, dS, dS, optimize=True)
    u4b = u4b + u4b.transpose(0, 1, 3, 2)
    d2G = u1 + u2 + u3 + u4a + u4b

    g_ab = np.empty((nb, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            rhs = d2G[:, :, a, b] @ g + dG[:, :, a] @ g_a[:, b] + dG[:, :, b] @ g_a[:, a]
            g_ab[:, a, b] = g_ab[:, b, a] = -solve(rhs)

    Sgab = np.einsum("itb,bcd->itcd", S, g_ab)
    dSga = np.einsum("itba,bc->itac", dS, g_a)  # [i,t,a,b] = (d_a S)·(d_b g)
    d2Sg = np.einsum("b,itbcd->itcd", g, d2S)
    hess = (
        d2w[:, None, :, :] * Sg[:, :, None, None]
        + dw[:, None, :, None] * (Sga + dSg)[:, :, None, :]
        + dw[:, None, None, :] * (Sga + dSg)[:, :, :, None]
        + w[:, None, None, None] * (Sgab + dSga + dSga.transpose(0, 1, 3, 2) + d2Sg)
    )
    return ShapeEvaluation(sup, values, grads, hess)


def moment_matrix(kernels, x, order="quadratic", mask=None):
    """Assemble the (regularization-free) moment matrix G(x)."""
    _check_order(order)
    x = np.asarray(x, dtype=np.float64)
    sup = _support(kernels, x, mask)
    if len(sup) == 0:
        raise OutsideSupportError("point outside all kernel supports")
    w, _, _, _ = _weights_and_derivs(x, kernels.centers[sup], kernels.radii[sup], 0)
    S, _, _ = _slot_basis(kernels.centers[sup] - x[None, :], order)
    return np.einsum("i,itb,itc->bc", w, S, S, optimize=True)


def shape_functions(kernels, x, order="quadratic", mask=None):
    """Spec-level shape values: (support indices, N_i, N_i^j, N_i^jk)."""
    ev = evaluate_shapes(kernels, x, order=order, derivatives=0, mask=mask)
    first = ev.values[:, 1:4]
    second = ev.values[:, 4:] if order == "quadratic" else None
    return ev.support, ev.values[:, 0], first, second


def jacobian(kernels, x, order="quadratic", derivatives=0, mask=None):
    """Dense displacement Jacobian J(x) (3 x 3*slots*n), optionally with
    its spatial derivative tensors stacked along trailing axes."""
    _check_order(order)
    nt = n_slots(order)
    n = len(kernels.centers)
    ev = evaluate_shapes(kernels, x, order=order, derivatives=derivatives, mask=mask)
    J = np.zeros((3, 3 * nt * n))
    eye = np.eye(3)
    for local, i in enumerate(ev.support):
        for t in range(nt):
            col = (i * nt + t) * 3
            J[:, col : col + 3] = ev.values[local, t] * eye
    if derivatives == 0:
        return J
    dJ = np.zeros((3, 3 * nt * n, 3))
    for local, i in enumerate(ev.support):
        for t in range(nt):
            col = (i * nt + t) * 3
            for a in range(3):
                dJ[:, col : col + 3, a] = ev.gradients[local, t, a] * eye
    if derivatives == 1:
        return J, dJ
    d2J = np.zeros((3, 3 * nt * n, 3, 3))
    for local, i in enumerate(ev.support):
        for t in range(nt):
            col = (i * nt + t) * 3
            d2J[:, col : col + 3] = np.einsum("ab,rc->rcab", ev.hessians[local, t], eye)
    return J, dJ, d2J


def encode_polynomial(kernels, const, lin=None, quad=None, order="quadratic"):
    """Encode the global field u_c(x) = const_c + lin[c]·x + x·quad[c]·x into q.

    quad must be symmetric in its last two axes. In linear mode quad is
    rejected (the jet has no second-derivative slots).
    """
    _check_order(order)
    const = np.asarray(const, dtype=np.float64).reshape(3)
    lin = np.zeros((3, 3)) if lin is None else np.asarray(lin, dtype=np.float64)
    if quad is not None and order == "linear":
        raise ValueError("quadratic coefficients cannot be encoded in linear mode")
    nt = n_slots(order)
    n = len(kernels.centers)
    q = np.zeros(3 * nt * n)
    for i, xi in enumerate(kernels.centers):
        base = i * nt * 3
        val = const + lin @ xi
        grad = lin.copy()  # grad[c, j] = du_c/dx_j
        if quad is not None:
            val = val + np.einsum("cjk,j,k->c", quad, xi, xi)
            grad = grad + 2.0 * np.einsum("cjk,k->cj", quad, xi)
        q[base : base + 3] = val
        for j in range(3):
            q[base + 3 * (1 + j) : base + 3 * (2 + j)] = grad[:, j]
        if order == "quadratic":
            for k, (j, l) in enumerate(SECOND_PAIRS):
                sec = 2.0 * quad[:, j, l] if quad is not None else np.zeros(3)
                q[base + 3 * (4 + k) : base + 3 * (5 + k)] = sec
    return q


def _gather(q, support, nt):
    blocks = [q[(i * nt) * 3 : (i * nt + nt) * 3].reshape(nt, 3) for i in support]
    return np.stack(blocks, axis=0)  # (ns, nt, 3)


def displacement(kernels, q, x, order="quadratic", mask=None):
    """u(x) = J(x) q, via the compact support."""
    ev = evaluate_shapes(kernels, x, order=order, derivatives=0, mask=mask)
    loc = _gather(q, ev.support, n_slots(order))
    return np.einsum("it,itc->c", ev.values, loc)


def deformation_gradient(kernels, q, x, order="quadratic", mask=None):
    """F(x) = I + grad u(x)."""
    ev = evaluate_shapes(kernels, x, order=order, derivatives=1, mask=mask)
    loc = _gather(q, ev.support, n_slots(order))
    grad_u = np.einsum("itc,ita->ca", loc, ev.gradients)
    return np.eye(3) + grad_u


def grad_deformation(kernels, q, x, order="quadratic", mask=None):
    """Spatial derivative of F: (3,3,3) with indices [row, col, d/dx]."""
    ev = evaluate_shapes(kernels, x, order=order, derivatives=2, mask=mask)
    loc = _gather(q, ev.support, n_slots(order))
    return np.einsum("itc,itab->cab", loc, ev.hessians)

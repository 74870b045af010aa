"""Small dense LMI feasibility solver (logarithmic barrier, damped Newton).

Solves: find ``x`` with ``F(x) = F0 + sum_i x_i F_i < 0`` (negative definite),
optionally subject to ``G(x) = G0 + sum_i x_i G_i > 0``.  The problem is cast
as ``min t  s.t.  t I - F(x) > 0`` inside the ball ``|x| <= radius`` and
followed along the central path until either a point with a strictly negative
``max eig F`` is found or the duality gap certifies ``t* >= 0``.

Intended for problems with a few hundred variables and matrices up to ~50x50.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class SolverError(RuntimeError):
    """The barrier iteration failed to converge."""


@dataclass
class LmiResult:
    feasible: bool
    x: np.ndarray
    max_eig: float  # largest eigenvalue of F(x)
    lower_bound: float  # certified lower bound on min_x max eig F(x) inside the ball
    newton_steps: int


def _affine(m0: np.ndarray, basis: np.ndarray, x: np.ndarray) -> np.ndarray:
    return m0 + np.tensordot(x, basis, axes=1)


def _scaled_basis(chol: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """``L^{-1} M_i L^{-T}`` for every basis matrix, as a (p, k, k) array."""
    p, k, _ = basis.shape
    w = solve_triangular(chol, basis.transpose(1, 0, 2).reshape(k, p * k), lower=True)
    w = w.reshape(k, p, k).transpose(1, 2, 0)  # W_i^T
    kk = solve_triangular(chol, w.transpose(1, 0, 2).reshape(k, p * k), lower=True)
    return kk.reshape(k, p, k).transpose(1, 0, 2)


def _logdet_terms(mat: np.ndarray, basis: np.ndarray):
    """Value, gradient and Hessian of ``-logdet(mat)`` w.r.t. coefficients of ``basis``."""
    chol = np.linalg.cholesky(mat)
    val = -2.0 * np.sum(np.log(np.diag(chol)))
    kb = _scaled_basis(chol, basis)
    flat = kb.reshape(kb.shape[0], -1)
    grad = -np.einsum("ijj->i", kb)
    hess = flat @ flat.T
    return val, grad, hess


def _is_pd(mat: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        return False
    return True


def solve_lmi(
    f0: np.ndarray,
    f_basis: np.ndarray,
    g0: np.ndarray | None = None,
    g_basis: np.ndarray | None = None,
    x0: np.ndarray | None = None,
    radius: float | None = None,
    margin: float = 1e-8,
    gap_tol: float = 1e-9,
    mu: float = 10.0,
    max_newton: int = 60,
    max_total: int = 3000,
) -> LmiResult:
    """Search for ``x`` with ``max eig F(x) <= -(margin + slack)``.

    ``slack = 64 k eps max|F(x)|`` covers the backward error of the
    symmetric eigensolver, so a reported feasible point is feasible in exact
    arithmetic as well.  Each centering runs at most
    ``max_newton`` damped Newton steps; near the feasibility frontier the
    Hessian becomes badly conditioned and convergence turns linear, in which
    case the barrier weight is raised from an approximately central point.
    Infeasibility is only concluded from points where centering converged,
    since the duality bound ``t - nu / tau`` is valid only there.
    Raises :class:`SolverError` when no decision is reached within
    ``max_total`` steps; an infeasible problem returns ``feasible=False`` with
    ``lower_bound >= -margin``.
    """
    f0 = np.asarray(f0, dtype=float)
    f_basis = np.asarray(f_basis, dtype=float)
    p, k = f_basis.shape[0], f0.shape[0]
    x = np.zeros(p) if x0 is None else np.array(x0, dtype=float)
    if radius is None:
        radius = 1e4 * (1.0 + np.linalg.norm(x))
    has_g = g0 is not None
    if has_g:
        g0 = np.asarray(g0, dtype=float)
        g_basis = np.asarray(g_basis, dtype=float)
        if not _is_pd(_affine(g0, g_basis, x)):
            raise ValueError("initial point violates G(x) > 0")
    if np.linalg.norm(x) >= radius:
        raise ValueError("initial point outside the search ball")

    # z = (x, t); dS/dx_i = -F_i, dS/dt = I
    s_basis = np.concatenate([-f_basis, np.eye(k)[None]], axis=0)
    if has_g:
        g_full = np.concatenate([g_basis, np.zeros((1,) + g0.shape)], axis=0)
    nu = k + (g0.shape[0] if has_g else 0) + 1

    def f_of(xv):
        return _affine(f0, f_basis, xv)

    def feasible_domain(z):
        xv, t = z[:-1], z[-1]
        if np.dot(xv, xv) >= radius**2:
            return False
        if not _is_pd(t * np.eye(k) - f_of(xv)):
            return False
        return not has_g or _is_pd(_affine(g0, g_basis, xv))

    def barrier(z, tau, derivs=True):
        xv, t = z[:-1], z[-1]
        s = t * np.eye(k) - f_of(xv)
        r = radius**2 - np.dot(xv, xv)
        if not derivs:
            val = -np.linalg.slogdet(s)[1] - np.log(r)
            if has_g:
                val -= np.linalg.slogdet(_affine(g0, g_basis, xv))[1]
            return tau * t + val
        val, grad, hess = _logdet_terms(s, s_basis)
        if has_g:
            gv, gg, gh = _logdet_terms(_affine(g0, g_basis, xv), g_full)
            val, grad, hess = val + gv, grad + gg, hess + gh
        val -= np.log(r)
        grad = grad.copy()
        grad[:-1] += 2 * xv / r
        hess[:-1, :-1] += 2 * np.eye(p) / r + 4 * np.outer(xv, xv) / r**2
        grad[-1] += tau
        return tau * t + val, grad, hess

    def threshold(fx):
        return margin + 64 * k * np.finfo(float).eps * float(np.abs(fx).max())

    t0 = float(np.linalg.eigvalsh(f_of(x)).max())
    z = np.concatenate([x, [t0 + 1.0]])
    tau = nu / max(1.0, abs(t0))
    steps = 0
    while True:
        # centering
        centered = False
        for _ in range(max_newton):
            val, grad, hess = barrier(z, tau)
            # Jacobi scaling keeps the solve accurate when P has a wide eigenvalue spread
            dscale = 1.0 / np.sqrt(np.diag(hess))
            hs = hess * np.outer(dscale, dscale)
            hs[np.diag_indices_from(hs)] += 1e-13
            try:
                dz = -dscale * np.linalg.solve(hs, dscale * grad)
            except np.linalg.LinAlgError as exc:
                raise SolverError("singular Newton system") from exc
            dec = -float(grad @ dz)
            if dec / 2 <= 1e-7:
                centered = True
                break
            alpha = 1.0
            while True:
                zn = z + alpha * dz
                if feasible_domain(zn) and barrier(zn, tau, derivs=False) <= val - 0.25 * alpha * dec:
                    break
                alpha *= 0.5
                if alpha < 1e-8:
                    break
            if alpha < 1e-8:
                # stalled in floating point; the point is as central as it gets
                centered = True
                break
            z = zn
            steps += 1
            if z[-1] < 0:
                fx = f_of(z[:-1])
                lam = float(np.linalg.eigvalsh(fx).max())
                if lam <= -threshold(fx):
                    return LmiResult(True, z[:-1], lam, -np.inf, steps)
            if steps > max_total:
                raise SolverError(f"no decision after {steps} Newton steps")

        xv, t = z[:-1], z[-1]
        fx = f_of(xv)
        lam = float(np.linalg.eigvalsh(fx).max())
        lower = t - nu / tau
        if lam <= -threshold(fx):
            return LmiResult(True, xv, lam, lower, steps)
        if centered and (lower > -margin or nu / tau < gap_tol):
            return LmiResult(False, xv, lam, lower, steps)
        if centered or nu / tau >= gap_tol:
            tau *= mu


def sym_basis(n: int) -> np.ndarray:
    """Basis of symmetric n x n matrices (upper-triangular parameterization)."""
    idx = np.triu_indices(n)
    out = np.zeros((len(idx[0]), n, n))
    for k, (i, j) in enumerate(zip(*idx)):
        out[k, i, j] = 1.0
        out[k, j, i] = 1.0
    return out


def sym_from_vector(v: np.ndarray, n: int) -> np.ndarray:
    return np.tensordot(v, sym_basis(n), axes=1)

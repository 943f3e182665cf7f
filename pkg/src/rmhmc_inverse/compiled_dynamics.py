"""Compiled Hamiltonian trajectories for small-mesh posterior targets.

Mirrors :func:`rmhmc_inverse.samplers.leapfrog` and the generalized leapfrog
loop of :func:`rmhmc_inverse.samplers.rmhmc_step` step for step, including
Newton start points, stopping rules and solve accounting, so the two routes
produce the same trajectories up to round-off.  Only the posterior of the heat
conduction problem is supported; the evaluation reuses the kernels of
:mod:`rmhmc_inverse.compiled`.

Status codes: 0 finished, 1 evaluation failed, 2 Newton failure, 3 energy
error beyond the guard.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .compiled import _fisher, _forward, _metric_derivatives, _misfit_gradient

OK, EVAL_FAILED, NEWTON_FAILED, ENERGY_GUARD = 0, 1, 2, 3
_EXP_LIMIT = 700.0


@njit(cache=True)
def _placeholder_forward(n):
    return np.zeros((6, n - 1)), np.ones(n - 1), np.ones(1), np.zeros(n)


@njit(cache=True)
def _evaluate(u, h, bi, B, data, inv_var, P, u0, want_grad, want_metric):
    """Log posterior plus optional gradient, metric and metric derivatives.

    Returns ``(ok, log_post, grad, G, D, solves, fwd)`` where ``fwd`` holds the
    forward factorization for a later gradient completion.
    """
    n = u.size
    m = n if want_metric else 0
    grad = np.zeros(n)
    G = np.zeros((m, m))
    D = np.zeros((m, m, m))
    for x in u:
        if not np.isfinite(x) or x > _EXP_LIMIT:
            return False, -np.inf, grad, G, D, 0, _placeholder_forward(n)
    ints, kc, rb, w, ok = _forward(u, h, bi)
    fwd = (ints, kc, rb, w)
    if not ok:
        return False, -np.inf, grad, G, D, 0, fwd
    solves = 1
    r = B @ w - data
    du = u - u0
    Pdu = P @ du
    lp = -0.5 * inv_var * (r @ r) - 0.5 * (du @ Pdu)
    if not np.isfinite(lp):
        return False, lp, grad, G, D, solves, fwd
    if want_grad:
        grad = -_misfit_gradient(ints, kc, rb, w, B, data, inv_var, h) - Pdu
        solves += 1
    if want_metric:
        H, W2, L2 = _fisher(ints, kc, rb, w, B, inv_var, h)
        G = H + P
        D = _metric_derivatives(ints, kc, rb, w, W2, L2, B, inv_var, h)
        solves += 2 * n + 3 * n**3
    return True, lp, grad, G, D, solves, fwd


@njit(cache=True)
def _geometry(G, D):
    """Inverse, log-determinant, sandwich ``Ginv D_k Ginv`` and half traces."""
    n = G.shape[0]
    C = np.linalg.cholesky(G)
    logdet = 0.0
    for i in range(n):
        logdet += 2.0 * np.log(C[i, i])
    gi = np.linalg.inv(G)
    gi = 0.5 * (gi + gi.T)
    S = np.empty((n, n, n))
    ht = np.empty(n)
    for k in range(n):
        S[k] = gi @ D[k] @ gi
        ht[k] = 0.5 * np.sum(gi * D[k].T)
    return gi, logdet, S, ht


@njit(cache=True)
def _quad(q, S):
    n = q.size
    out = np.empty(n)
    for k in range(n):
        out[k] = q @ (S[k] @ q)
    return out


@njit(cache=True)
def _maxabs(x):
    m = 0.0
    for v in x:
        a = abs(v)
        if not a <= m:
            m = a
    return m


@njit(cache=True)
def rmhmc_trajectory(u, p, eps, n_steps, tol, max_iter, guard,
                     lp, grad, G, D, h, bi, B, data, inv_var, P, u0):
    """Generalized leapfrog trajectory from a fully evaluated start point.

    Returns ``(status, u, p, log_post, grad, G, D, dH, solves, iterations)``
    where ``iterations[l] = (momentum-stage, position-stage)`` Newton updates.
    """
    n = u.size
    half = 0.5 * eps
    iters = np.zeros((n_steps, 2), dtype=np.int64)
    solves = 0
    gi, logdet, S, ht = _geometry(G, D)
    h0 = -lp + 0.5 * logdet + 0.5 * (p @ (gi @ p))
    dh = 0.0
    eye = np.eye(n)
    for step in range(n_steps):
        # (i) implicit momentum half step
        gpart = -grad + ht
        q = p.copy()
        res = q - p + half * (gpart - 0.5 * _quad(q, S))
        rnorm = _maxabs(res)
        thr = tol * (1.0 + _maxabs(p))
        growth = 0
        done = False
        for it in range(max_iter + 1):
            if rnorm <= thr:
                iters[step, 0] = it
                done = True
                break
            if it == max_iter:
                break
            J = np.empty((n, n))
            for k in range(n):
                J[k] = eye[k] - half * (S[k] @ q)
            q = q - np.linalg.solve(J, res)
            res = q - p + half * (gpart - 0.5 * _quad(q, S))
            new = _maxabs(res)
            if not np.isfinite(new):
                break
            growth = growth + 1 if new > rnorm else 0
            rnorm = new
            if growth >= 3:
                break
        if not done:
            return (NEWTON_FAILED, u, p, lp, grad, G, D, dh, solves, iters)
        p_half = q

        # (ii) implicit position step, metric re-evaluated at every iterate
        v0 = gi @ p_half
        x = u.copy()
        cur_lp, cur_grad, cur_G, cur_D = lp, grad, G, D
        cur_gi, cur_logdet, cur_S, cur_ht = gi, logdet, S, ht
        fresh = False
        fwd = _placeholder_forward(n)
        res = x - u - half * (v0 + cur_gi @ p_half)
        rnorm = _maxabs(res)
        thr = tol * (1.0 + _maxabs(u))
        growth = 0
        done = False
        for it in range(max_iter + 1):
            if rnorm <= thr:
                iters[step, 1] = it
                done = True
                break
            if it == max_iter:
                break
            J = np.empty((n, n))
            for k in range(n):
                J[:, k] = eye[:, k] + half * (cur_S[k] @ p_half)
            x = x - np.linalg.solve(J, res)
            ok, cur_lp, cur_grad, cur_G, cur_D, ns, fwd = _evaluate(
                x, h, bi, B, data, inv_var, P, u0, False, True)
            solves += ns
            if not ok:
                return (EVAL_FAILED, u, p, lp, grad, G, D, dh, solves, iters)
            cur_gi, cur_logdet, cur_S, cur_ht = _geometry(cur_G, cur_D)
            fresh = True
            res = x - u - half * (v0 + cur_gi @ p_half)
            new = _maxabs(res)
            if not np.isfinite(new):
                break
            growth = growth + 1 if new > rnorm else 0
            rnorm = new
            if growth >= 3:
                break
        if not done:
            return (NEWTON_FAILED, u, p, lp, grad, G, D, dh, solves, iters)
        if fresh:
            # the adjoint at the accepted iterate completes the gradient
            ints, kc, rb, w = fwd
            cur_grad = -_misfit_gradient(ints, kc, rb, w, B, data, inv_var, h) - P @ (x - u0)
            solves += 1

        # (iii) explicit momentum half step
        u, lp, grad, G, D = x, cur_lp, cur_grad, cur_G, cur_D
        gi, logdet, S, ht = cur_gi, cur_logdet, cur_S, cur_ht
        p = p_half - half * (-grad + ht - 0.5 * _quad(p_half, S))
        dh = -lp + 0.5 * logdet + 0.5 * (p @ (gi @ p)) - h0
        if not np.isfinite(dh) or abs(dh) > guard:
            return (ENERGY_GUARD, u, p, lp, grad, G, D, dh, solves, iters)
    return (OK, u, p, lp, grad, G, D, dh, solves, iters)


@njit(cache=True)
def leapfrog_trajectory(u, p, eps, n_steps, guard, lp, grad, Ginv,
                        h, bi, B, data, inv_var, P, u0):
    """Explicit leapfrog with the fixed inverse metric ``Ginv``.

    Returns ``(status, u, p, log_post, grad, dH, solves)``.
    """
    solves = 0
    v = Ginv @ p
    h0 = -lp + 0.5 * (p @ v)
    vg = Ginv @ grad
    dh = 0.0
    for _ in range(n_steps):
        p = p + 0.5 * eps * grad
        v = v + 0.5 * eps * vg
        x = u + eps * v
        ok, lp_new, g_new, _, _, ns, _ = _evaluate(x, h, bi, B, data, inv_var, P, u0, True, False)
        solves += ns
        if not ok:
            return EVAL_FAILED, u, p, lp, grad, dh, solves
        u, lp, grad = x, lp_new, g_new
        vg = Ginv @ grad
        p = p + 0.5 * eps * grad
        v = v + 0.5 * eps * vg
        dh = -lp + 0.5 * (p @ v) - h0
        if not np.isfinite(dh) or abs(dh) > guard:
            return ENERGY_GUARD, u, p, lp, grad, dh, solves
    return OK, u, p, lp, grad, dh, solves

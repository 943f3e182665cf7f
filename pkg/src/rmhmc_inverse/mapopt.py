"""MAP estimation by damped Gauss-Newton on the negative log posterior."""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)


class MapConvergenceError(RuntimeError):
    pass


def find_map(target, u_init: np.ndarray | None = None, tol: float = 1e-8,
             max_iter: int = 200, armijo: float = 1e-4, max_halvings: int = 40,
             stall_rtol: float = 1e-10, stall_patience: int = 5,
             noise_rtol: float = 1e-12) -> np.ndarray:
    """Maximize the log posterior of ``target``.

    Each iteration solves ``G(u) d = grad log pi(u)`` with the augmented Fisher
    metric (SPD, so ``d`` is an ascent direction) and backtracks by halves
    until the Armijo condition holds.  Stops once the Euclidean gradient norm
    is at most ``tol``.

    Near the optimum the log posterior can stop resolving the predicted
    increase; a step is then also accepted when it lowers the gradient norm
    without lowering the log posterior by more than ``noise_rtol * max(1, |log pi|)``.  When the predicted
    increase ``g^T G^{-1} g / 2`` stays below ``stall_rtol * max(1, |log pi|)``
    for ``stall_patience`` iterations, or the line search fails at that level,
    the gradient is at its round-off floor (ill-conditioned forward operators
    on fine meshes); the iterate is then returned with a warning.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    u = np.zeros(target.n) if u_init is None else np.array(u_init, dtype=float)
    if u_init is None and hasattr(target, "prior"):
        u = np.array(target.prior.u0, dtype=float)
    st = target.state(u, grad=True, metric=True)
    stalled = 0
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(st.grad))
        if gnorm <= tol:
            logger.debug("MAP converged after %d iterations, |g| = %.3e", it, gnorm)
            return st.u.copy()
        d = st.metric.solve(st.grad)
        slope = float(st.grad @ d)
        f0 = st.log_post
        at_floor = 0.5 * slope <= stall_rtol * max(1.0, abs(f0))
        stalled = stalled + 1 if at_floor else 0
        if stalled >= stall_patience:
            return _stalled(st, gnorm, tol, it)
        noise = noise_rtol * max(1.0, abs(f0))
        t = 1.0
        for _ in range(max_halvings + 1):
            u_new = st.u + t * d
            f_new = target.log_density(u_new)
            if f_new >= f0 + armijo * t * slope:
                break
            if np.isfinite(f_new) and f_new >= f0 - noise and armijo * t * slope <= noise:
                g_new = target.grad_log_density(u_new)
                if np.linalg.norm(g_new) < gnorm:
                    break
            t *= 0.5
        else:
            if at_floor:
                return _stalled(st, gnorm, tol, it)
            raise MapConvergenceError(
                f"line search failed after {max_halvings} halvings (|g| = {gnorm:.3e})")
        st = target.state(u_new, grad=True, metric=True)
    raise MapConvergenceError(
        f"no convergence in {max_iter} iterations (|g| = {np.linalg.norm(st.grad):.3e})")


def _stalled(st, gnorm: float, tol: float, it: int) -> np.ndarray:
    logger.warning("MAP search stalled at round-off after %d iterations: |g| = %.3e > tol = %.1e",
                   it, gnorm, tol)
    return st.u.copy()

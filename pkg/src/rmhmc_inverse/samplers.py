"""Riemannian-manifold MCMC kernels and the chain driver.

Four kernels share one target interface (see :mod:`rmhmc_inverse.posterior`):

``srmmala``  manifold MALA with the position-dependent metric, no Christoffel drift
``rmmala``   manifold MALA including the Christoffel drift
``srmhmc``   HMC with a fixed metric and the explicit leapfrog integrator
``rmhmc``    Riemannian HMC with the generalized (implicit) leapfrog integrator

The current state of a chain is kept as a :class:`PointState`, so a rejected
proposal costs no further solves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .posterior import EvaluationError, PointState, TrajectoryError

logger = logging.getLogger(__name__)

SAMPLER_KINDS = ("srmmala", "rmmala", "srmhmc", "rmhmc")
HMC_KINDS = ("srmhmc", "rmhmc")


class NewtonDivergence(TrajectoryError):
    """An implicit leapfrog stage failed to converge."""


@dataclass(frozen=True)
class ChainConfig:
    sampler: str
    step_size: float
    n_samples: int
    n_leapfrog: int = 1
    burn_in: int = 0
    seed: int = 0
    newton_tol: float = 1e-10
    newton_max_iter: int = 20
    energy_guard: float = 1000.0

    def __post_init__(self):
        if self.sampler not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLER_KINDS}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.n_leapfrog < 1:
            raise ValueError("n_leapfrog must be at least 1")
        if not 0 <= self.burn_in < self.n_samples:
            raise ValueError("need 0 <= burn_in < n_samples")


@dataclass
class Chain:
    """Raw chain output; every proposal contributes one row, burn-in included."""

    samples: np.ndarray
    log_posteriors: np.ndarray
    accepted: np.ndarray
    cumulative_solves: np.ndarray
    burn_in: int
    start: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted))

    @property
    def retained(self) -> np.ndarray:
        return self.samples[self.burn_in:]

    @property
    def sampling_solves(self) -> int:
        return int(self.cumulative_solves[-1]) if self.cumulative_solves.size else 0


def mh_accept(log_post_current: float, log_post_proposed: float, log_q_forward: float,
              log_q_reverse: float, rng: np.random.Generator) -> bool:
    """Metropolis-Hastings test; always consumes exactly one uniform draw."""
    log_u = np.log(rng.random())
    if not np.isfinite(log_post_proposed):
        return False
    delta = (log_post_proposed - log_post_current) + (log_q_reverse - log_q_forward)
    if np.isnan(delta):
        return False
    return bool(log_u < delta)


# -- manifold MALA ------------------------------------------------------------

def christoffel_drift(st: PointState) -> np.ndarray:
    """``c_k = sum_ij Ginv_ij Gamma^k_ij`` from the metric derivatives at ``st``."""
    gi = st.ginv
    D = st.dmetric
    a = np.einsum("ij,imj->m", gi, D)
    return 0.5 * gi @ (2.0 * a - 2.0 * st.half_trace)


def mmala_mean(st: PointState, eps: float, full: bool) -> np.ndarray:
    mu = st.u + 0.5 * eps**2 * st.metric.solve(st.grad)
    if full:
        mu = mu - eps**2 * christoffel_drift(st)
    return mu


def _log_q(x: np.ndarray, mu: np.ndarray, st: PointState, eps: float) -> float:
    r = x - mu
    return (-0.5 * float(r @ st.metric.apply(r)) / eps**2
            + 0.5 * st.metric.logdet - x.size * np.log(eps))


def mmala_step(target, st: PointState, eps: float, rng: np.random.Generator,
               full: bool) -> tuple[PointState, bool]:
    """One manifold-MALA proposal; ``st`` must carry grad and metric (and
    metric derivatives when ``full``)."""
    mu = mmala_mean(st, eps, full)
    z = rng.standard_normal(st.u.size)
    u_prop = mu + eps * linalg.solve_triangular(st.metric.cholesky.T, z, lower=False)
    try:
        prop = target.state(u_prop, grad=True, metric=True, derivatives=full)
    except EvaluationError as exc:
        logger.debug("mMALA proposal rejected: %s", exc)
        mh_accept(st.log_post, -np.inf, 0.0, 0.0, rng)
        return st, False
    lq_fwd = _log_q(u_prop, mu, st, eps)
    lq_rev = _log_q(st.u, mmala_mean(prop, eps, full), prop, eps)
    if mh_accept(st.log_post, prop.log_post, lq_fwd, lq_rev, rng):
        return prop, True
    return st, False


# -- fixed-metric HMC ---------------------------------------------------------

def leapfrog(target, st: PointState, p: np.ndarray, eps: float, n_steps: int, metric,
             energy_guard: float = np.inf) -> tuple[PointState, np.ndarray, float]:
    """Explicit Stormer-Verlet for ``H = -log pi(u) + p^T G^{-1} p / 2`` with fixed ``G``.

    Returns the end state, end momentum and the energy error ``H_end - H_start``.
    One gradient (2 solves for the PDE target) per step.
    """
    v = metric.solve(p)
    h0 = -st.log_post + 0.5 * float(p @ v)
    vg = metric.solve(st.grad)
    cur = st
    for _ in range(n_steps):
        p = p + 0.5 * eps * cur.grad
        v = v + 0.5 * eps * vg
        cur = target.state(cur.u + eps * v, grad=True)
        vg = metric.solve(cur.grad)
        p = p + 0.5 * eps * cur.grad
        v = v + 0.5 * eps * vg
        dh = -cur.log_post + 0.5 * float(p @ v) - h0
        if not np.isfinite(dh) or abs(dh) > energy_guard:
            raise TrajectoryError(f"energy error {dh:.3e}")
    return cur, p, dh


def srmhmc_step(target, st: PointState, metric, eps: float, n_steps: int,
                rng: np.random.Generator, energy_guard: float = 1000.0,
                ) -> tuple[PointState, bool]:
    p = metric.sample_momentum(rng)
    try:
        if getattr(target, "compiled_dynamics", False):
            end, _, dh = target.fixed_metric_trajectory(st, p, eps, n_steps, metric, energy_guard)
        else:
            end, _, dh = leapfrog(target, st, p, eps, n_steps, metric, energy_guard)
    except (EvaluationError, TrajectoryError) as exc:
        logger.debug("sRMHMC trajectory aborted: %s", exc)
        mh_accept(0.0, -np.inf, 0.0, 0.0, rng)
        return st, False
    if mh_accept(0.0, -dh, 0.0, 0.0, rng):
        return end, True
    return st, False


# -- Riemannian HMC -----------------------------------------------------------

def hamiltonian(st: PointState, p: np.ndarray) -> float:
    """Riemannian Hamiltonian up to the constant ``N log(2 pi) / 2``."""
    return -st.log_post + 0.5 * st.metric.logdet + 0.5 * float(p @ (st.ginv @ p))


def hamiltonian_gradient(st: PointState, p: np.ndarray) -> np.ndarray:
    """``dH/du_k = -dlog pi/du_k + tr(Ginv dG_k)/2 - p^T Ginv dG_k Ginv p / 2``."""
    quad = np.einsum("i,kij,j->k", p, st.sandwich, p)
    return -st.grad + st.half_trace - 0.5 * quad


def _newton(residual, jacobian, x, tol: float, max_iter: int, scale: float, stage: str):
    """Newton iteration; returns ``(x, n_updates)``."""
    r = residual(x)
    rnorm = np.max(np.abs(r))
    threshold = tol * (1.0 + scale)
    growth = 0
    for it in range(max_iter + 1):
        if rnorm <= threshold:
            return x, it
        if it == max_iter:
            break
        x = x - np.linalg.solve(jacobian(x), r)
        r = residual(x)
        new_norm = np.max(np.abs(r))
        if not np.isfinite(new_norm):
            raise NewtonDivergence(f"{stage}: non-finite residual")
        growth = growth + 1 if new_norm > rnorm else 0
        if growth >= 3:
            raise NewtonDivergence(f"{stage}: residual grew three times in a row")
        rnorm = new_norm
    raise NewtonDivergence(f"{stage}: no convergence in {max_iter} iterations "
                           f"(residual {rnorm:.3e})")


def generalized_leapfrog(target, st: PointState, p: np.ndarray, eps: float,
                         tol: float = 1e-10, max_iter: int = 20,
                         iterations: list | None = None) -> tuple[PointState, np.ndarray]:
    """One generalized leapfrog step for the Riemannian Hamiltonian.

    Both implicit stages use Newton's method with exact Jacobians, started from
    the current momentum and position respectively.  ``st`` must carry grad,
    metric and metric derivatives; so does the returned state.  Newton update
    counts of the two implicit stages are appended to ``iterations``.
    """
    half = 0.5 * eps
    grad_part = -st.grad + st.half_trace
    S0 = st.sandwich

    # (i) implicit momentum half step
    def res_p(q):
        return q - p + half * (grad_part - 0.5 * np.einsum("i,kij,j->k", q, S0, q))

    def jac_p(q):
        return np.eye(q.size) - half * (S0 @ q)

    p_half, n1 = _newton(res_p, jac_p, p.copy(), tol, max_iter,
                         float(np.max(np.abs(p))), "momentum stage")

    # (ii) implicit position step; the metric is re-evaluated at each iterate
    v0 = st.ginv @ p_half
    last = {"u": st.u, "state": st}

    def at(x):
        if not np.array_equal(x, last["u"]):
            last["u"], last["state"] = x, target.state(x, grad=False, derivatives=True)
        return last["state"]

    def res_u(x):
        return x - st.u - half * (v0 + at(x).ginv @ p_half)

    def jac_u(x):
        return np.eye(x.size) + half * (at(x).sandwich @ p_half).T

    u_new, n2 = _newton(res_u, jac_u, st.u.copy(), tol, max_iter,
                        float(np.max(np.abs(st.u))), "position stage")
    end = target.complete(at(u_new), grad=True, derivatives=True)

    # (iii) explicit momentum half step
    p_new = p_half - half * hamiltonian_gradient(end, p_half)
    if iterations is not None:
        iterations.append((n1, n2))
    return end, p_new


def riemannian_trajectory(target, st: PointState, p: np.ndarray, eps: float, n_steps: int,
                          tol: float = 1e-10, max_iter: int = 20, energy_guard: float = np.inf,
                          iterations: list | None = None) -> tuple[PointState, np.ndarray, float]:
    """``n_steps`` generalized leapfrog steps; returns end state, momentum and energy error."""
    h0 = hamiltonian(st, p)
    cur = st
    dh = 0.0
    for _ in range(n_steps):
        cur, p = generalized_leapfrog(target, cur, p, eps, tol, max_iter, iterations)
        dh = hamiltonian(cur, p) - h0
        if not np.isfinite(dh) or abs(dh) > energy_guard:
            raise TrajectoryError(f"energy error {dh:.3e}")
    return cur, p, dh


def rmhmc_step(target, st: PointState, eps: float, n_steps: int, rng: np.random.Generator,
               tol: float = 1e-10, max_iter: int = 20, energy_guard: float = 1000.0,
               iterations: list | None = None) -> tuple[PointState, bool]:
    p = st.metric.sample_momentum(rng)
    try:
        if getattr(target, "compiled_dynamics", False):
            cur, p, dh = target.riemannian_trajectory(st, p, eps, n_steps, tol, max_iter,
                                                      energy_guard, iterations)
        else:
            cur, p, dh = riemannian_trajectory(target, st, p, eps, n_steps, tol, max_iter,
                                               energy_guard, iterations)
    except (EvaluationError, TrajectoryError, np.linalg.LinAlgError) as exc:
        logger.debug("RMHMC trajectory aborted: %s", exc)
        mh_accept(0.0, -np.inf, 0.0, 0.0, rng)
        return st, False
    if mh_accept(0.0, -dh, 0.0, 0.0, rng):
        return cur, True
    return st, False


# -- driver -------------------------------------------------------------------

def run_chain(config: ChainConfig, target, u_start: np.ndarray, metric=None) -> Chain:
    """Run one chain from ``u_start``; solves are charged to the ``sampling`` phase.

    ``metric`` is the fixed metric for ``srmhmc`` and is ignored otherwise.
    The target cache is cleared first, so the start-point evaluation is counted.
    """
    kind = config.sampler
    if kind == "srmhmc" and metric is None:
        raise ValueError("srmhmc needs a fixed metric")
    rng = np.random.default_rng(config.seed)
    counter = target.counter
    counter.set_phase("sampling")
    target.clear_cache()
    base = counter.by_phase.get("sampling", 0)
    full = kind in ("rmmala", "rmhmc")
    st = target.state(u_start, grad=True, metric=kind != "srmhmc", derivatives=full)

    n, dim = config.n_samples, target.n
    samples = np.empty((n, dim))
    log_posts = np.empty(n)
    accepted = np.zeros(n, dtype=bool)
    solves = np.zeros(n, dtype=np.int64)
    iterations: list = []
    eps, L = config.step_size, config.n_leapfrog
    for i in range(n):
        if kind == "srmmala" or kind == "rmmala":
            st, acc = mmala_step(target, st, eps, rng, full)
        elif kind == "srmhmc":
            st, acc = srmhmc_step(target, st, metric, eps, L, rng, config.energy_guard)
        else:
            st, acc = rmhmc_step(target, st, eps, L, rng, config.newton_tol,
                                 config.newton_max_iter, config.energy_guard, iterations)
        samples[i] = st.u
        log_posts[i] = st.log_post
        accepted[i] = acc
        solves[i] = counter.by_phase.get("sampling", 0) - base
    stats = {}
    if iterations:
        its = np.asarray(iterations)
        stats = {"newton_momentum_max": int(its[:, 0].max()),
                 "newton_position_max": int(its[:, 1].max()),
                 "newton_position_mean": float(its[:, 1].mean()),
                 "newton_stages": int(2 * its.shape[0])}
    return Chain(samples, log_posts, accepted, solves, config.burn_in,
                 np.array(u_start, dtype=float), stats)

"""Log-posterior targets consumed by the optimizer and the samplers.

A target turns a parameter vector into a :class:`PointState`, evaluating only
what is asked for.  :class:`PosteriorTarget` keeps the derivative workspace of
the most recent parameter, so asking again for the same point (or for more
derivatives at it) costs only the missing solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import DEFAULT_DERIVATIVE_CAP, DerivativeWorkspace
from . import compiled_dynamics as cdyn
from .compiled import CompiledWorkspace
from .fem import DomainError, Mesh, NotPositiveDefiniteError, SolveCounter
from .forward import DEFAULT_BIOT, ObservationSet
from .metric import DenseMetric
from .prior import PriorBasis


class EvaluationError(RuntimeError):
    """The target cannot be evaluated at the requested point."""


class TrajectoryError(RuntimeError):
    """A Hamiltonian trajectory was abandoned; the proposal is rejected."""


@dataclass
class PointState:
    """Everything known about the target at one parameter value."""

    u: np.ndarray
    log_post: float
    grad: np.ndarray | None = None
    metric: DenseMetric | None = None
    dmetric: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def ginv(self) -> np.ndarray:
        if "ginv" not in self._cache:
            self._cache["ginv"] = self.metric.inverse()
        return self._cache["ginv"]

    @property
    def sandwich(self) -> np.ndarray:
        """``S[k] = G^{-1} dG/du_k G^{-1}``."""
        if "sandwich" not in self._cache:
            gi = self.ginv
            self._cache["sandwich"] = np.einsum("ij,kjl,lm->kim", gi, self.dmetric, gi)
        return self._cache["sandwich"]

    @property
    def half_trace(self) -> np.ndarray:
        """``0.5 * tr(G^{-1} dG/du_k)`` for every k."""
        if "half_trace" not in self._cache:
            self._cache["half_trace"] = 0.5 * np.einsum("ij,kji->k", self.ginv, self.dmetric)
        return self._cache["half_trace"]


class PosteriorTarget:
    """Posterior of the heat-conduction inverse problem.

    Solves are charged to ``counter``; the workspace of the last parameter is
    reused, so a state request at an already evaluated point adds only the
    solves for quantities not yet computed there.

    ``engine`` selects the derivative workspace: ``"numpy"`` (vectorized,
    any size), ``"compiled"`` (scalar numba kernels, fast for small meshes) or
    ``"auto"``, which picks the compiled one up to ``COMPILED_MAX_NODES``.
    Independently of the engine, Hamiltonian trajectories run as compiled
    loops (:meth:`fixed_metric_trajectory`, :meth:`riemannian_trajectory`)
    unless ``compiled_dynamics`` is false; they perform and charge the same
    solves as the reference loops in :mod:`rmhmc_inverse.samplers`.
    """

    COMPILED_MAX_NODES = 16

    def __init__(self, mesh: Mesh, obs: ObservationSet, prior: PriorBasis,
                 bi: float = DEFAULT_BIOT, counter: SolveCounter | None = None,
                 derivative_cap: int = DEFAULT_DERIVATIVE_CAP, engine: str = "auto",
                 compiled_dynamics: bool = True):
        self.mesh = mesh
        self.obs = obs
        self.prior = prior
        self.bi = bi
        self.counter = counter if counter is not None else SolveCounter()
        if engine == "auto":
            engine = "compiled" if mesh.n_nodes <= self.COMPILED_MAX_NODES else "numpy"
        if engine == "numpy":
            workspace = DerivativeWorkspace
        elif engine == "compiled":
            workspace = CompiledWorkspace
        else:
            raise ValueError(f"unknown engine {engine!r}")
        self.engine = engine
        self.compiled_dynamics = compiled_dynamics
        self._arrays = None
        self._inverse_of: tuple = (None, None)
        self.ws = workspace(mesh, obs, bi, self.counter, derivative_cap=derivative_cap)
        self._metric: DenseMetric | None = None
        self._dmetric: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.mesh.n_nodes

    def clear_cache(self) -> None:
        """Forget the cached workspace so the next request is evaluated afresh."""
        self.ws.u = None
        self.ws._reset()
        self._metric = None
        self._dmetric = None

    def _move(self, u: np.ndarray) -> None:
        before = self.ws.u
        self.ws.set_parameter(u)
        if self.ws.u is not before:
            self._metric = None
            self._dmetric = None

    def log_density(self, u: np.ndarray) -> float:
        """Log posterior, or ``-inf`` where the forward model is undefined."""
        try:
            self._move(u)
            return -self.ws.misfit() - self.prior.neg_log(self.ws.u)
        except (DomainError, NotPositiveDefiniteError, FloatingPointError):
            return -np.inf

    def grad_log_density(self, u: np.ndarray) -> np.ndarray:
        self._move(u)
        return -self.ws.misfit_gradient() - self.prior.gradient(self.ws.u)

    def metric(self, u: np.ndarray) -> DenseMetric:
        """Exact augmented Fisher metric at ``u``."""
        self._move(u)
        if self._metric is None:
            self._metric = DenseMetric(self.ws.assemble_fisher() + self.prior.precision_matrix())
        return self._metric

    def metric_derivatives(self, u: np.ndarray) -> np.ndarray:
        self._move(u)
        if self._dmetric is None:
            self._dmetric = self.ws.metric_derivatives()
        return self._dmetric

    def state(self, u: np.ndarray, grad: bool = True, metric: bool = False,
              derivatives: bool = False) -> PointState:
        try:
            log_post = self.log_density(u)
            if not np.isfinite(log_post):
                raise EvaluationError("log posterior is not finite")
            return PointState(
                u=self.ws.u,
                log_post=log_post,
                grad=self.grad_log_density(u) if grad else None,
                metric=self.metric(u) if metric or derivatives else None,
                dmetric=self.metric_derivatives(u) if derivatives else None,
            )
        except (DomainError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise EvaluationError(str(exc)) from exc

    def complete(self, st: PointState, grad: bool = True, metric: bool = False,
                 derivatives: bool = False) -> PointState:
        """Fill in missing fields of ``st`` in place."""
        try:
            if grad and st.grad is None:
                st.grad = self.grad_log_density(st.u)
            if (metric or derivatives) and st.metric is None:
                st.metric = self.metric(st.u)
            if derivatives and st.dmetric is None:
                st.dmetric = self.metric_derivatives(st.u)
        except (DomainError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise EvaluationError(str(exc)) from exc
        return st


    # -- compiled trajectories ----------------------------------------------

    def _problem(self):
        if self._arrays is None:
            self._arrays = (float(self.mesh.h), float(self.bi),
                            np.ascontiguousarray(self.ws.B, dtype=float),
                            np.ascontiguousarray(self.obs.data, dtype=float),
                            float(self.ws._inv_var),
                            np.ascontiguousarray(self.prior.precision_matrix()),
                            np.ascontiguousarray(self.prior.u0, dtype=float))
        return self._arrays

    def _fixed_inverse(self, metric) -> np.ndarray:
        if self._inverse_of[0] is not metric:
            self._inverse_of = (metric, np.ascontiguousarray(metric.inverse()))
        return self._inverse_of[1]

    def fixed_metric_trajectory(self, st: PointState, p: np.ndarray, eps: float, n_steps: int,
                                metric, energy_guard: float):
        """Compiled counterpart of :func:`rmhmc_inverse.samplers.leapfrog`."""
        status, u, p, lp, grad, dh, solves = cdyn.leapfrog_trajectory(
            st.u.copy(), p, float(eps), int(n_steps), float(energy_guard), st.log_post,
            st.grad, self._fixed_inverse(metric), *self._problem())
        self.counter.add(solves)
        if status != cdyn.OK:
            raise TrajectoryError(f"compiled leapfrog stopped with status {status}")
        return PointState(u=u, log_post=lp, grad=grad), p, dh

    def riemannian_trajectory(self, st: PointState, p: np.ndarray, eps: float, n_steps: int,
                              tol: float, max_iter: int, energy_guard: float,
                              iterations: list | None = None):
        """Compiled generalized leapfrog trajectory; see :func:`samplers.rmhmc_step`."""
        status, u, p, lp, grad, G, D, dh, solves, its = cdyn.rmhmc_trajectory(
            st.u.copy(), p, float(eps), int(n_steps), float(tol), int(max_iter),
            float(energy_guard), st.log_post, st.grad, st.metric.matrix, st.dmetric,
            *self._problem())
        self.counter.add(solves)
        if status != cdyn.OK:
            raise TrajectoryError(f"compiled generalized leapfrog stopped with status {status}")
        if iterations is not None:
            iterations.extend(map(tuple, its))
        return PointState(u=u, log_post=lp, grad=grad, metric=DenseMetric(G), dmetric=D), p, dh


class GaussianTarget:
    """Gaussian log density with a constant metric; no PDE solves.

    Used to check samplers against analytic moments.  ``metric_matrix``
    defaults to the precision.
    """

    def __init__(self, mean: np.ndarray, precision: np.ndarray,
                 metric_matrix: np.ndarray | None = None, counter: SolveCounter | None = None):
        self.mean = np.asarray(mean, dtype=float)
        self.precision = np.asarray(precision, dtype=float)
        self.counter = counter if counter is not None else SolveCounter()
        self._metric = DenseMetric(self.precision if metric_matrix is None else metric_matrix)

    @property
    def n(self) -> int:
        return self.mean.size

    def clear_cache(self) -> None:
        pass

    def log_density(self, u: np.ndarray) -> float:
        r = np.asarray(u, dtype=float) - self.mean
        return -0.5 * float(r @ self.precision @ r)

    def grad_log_density(self, u: np.ndarray) -> np.ndarray:
        return -self.precision @ (np.asarray(u, dtype=float) - self.mean)

    def metric(self, u: np.ndarray) -> DenseMetric:
        return self._metric

    def metric_derivatives(self, u: np.ndarray) -> np.ndarray:
        return np.zeros((self.n, self.n, self.n))

    def state(self, u, grad=True, metric=False, derivatives=False) -> PointState:
        u = np.array(u, dtype=float)
        return PointState(
            u=u, log_post=self.log_density(u),
            grad=self.grad_log_density(u) if grad else None,
            metric=self._metric if metric or derivatives else None,
            dmetric=self.metric_derivatives(u) if derivatives else None)

    def complete(self, st, grad=True, metric=False, derivatives=False) -> PointState:
        if grad and st.grad is None:
            st.grad = self.grad_log_density(st.u)
        if (metric or derivatives) and st.metric is None:
            st.metric = self._metric
        if derivatives and st.dmetric is None:
            st.dmetric = self.metric_derivatives(st.u)
        return st

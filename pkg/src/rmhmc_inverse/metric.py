"""Augmented Fisher metric tensors.

All metrics here are the Euclidean-symmetric representative

    G(u) = H(u) + alpha M V Lam^{-2} V^T M,

where ``H`` is the (Gauss-Newton) Fisher matrix of the misfit.  Three forms are
provided: exact/fixed dense matrices, and a fixed low-rank form built from a
randomized eigendecomposition of the prior-preconditioned Fisher matrix

    Ht = (1/alpha) Lam V^T H V Lam  ~  Vr S Vr^T,

whose inverse follows from the Woodbury identity.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import linalg

from .adjoint import DerivativeWorkspace
from .prior import PriorBasis

logger = logging.getLogger(__name__)

METRIC_KINDS = ("gauss_newton", "full_hessian", "low_rank")


class IndefiniteMetricError(np.linalg.LinAlgError):
    pass


class DenseMetric:
    """SPD metric held as a dense matrix with a cached Cholesky factor."""

    def __init__(self, matrix: np.ndarray, kind: str = "exact"):
        self.kind = kind
        self.matrix = np.asarray(matrix, dtype=float)
        try:
            self._chol = linalg.cholesky(self.matrix, lower=True)
        except linalg.LinAlgError as exc:
            eigmin = float(np.linalg.eigvalsh(self.matrix)[0])
            raise IndefiniteMetricError(
                f"{kind} metric is not positive definite (min eigenvalue {eigmin:.3e})") from exc
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def cholesky(self) -> np.ndarray:
        """Lower factor ``L`` with ``G = L L^T``."""
        return self._chol

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def solve(self, v: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self._chol, True), v, check_finite=False)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.n))

    def sample_momentum(self, rng: np.random.Generator) -> np.ndarray:
        return self._chol @ rng.standard_normal(self.n)

    def to_dense(self) -> np.ndarray:
        return self.matrix


class LowRankMetric:
    """Prior precision plus a rank-r prior-preconditioned Fisher correction.

    ``apply``:  alpha E (I + Vr S Vr^T) E^T,        E = M V Lam^{-1}
    ``solve``:  (1/alpha) F (I - Vr D Vr^T) F^T,    F = V Lam,  D = S / (S + 1)
    """

    kind = "low_rank"

    def __init__(self, prior: PriorBasis, Vr: np.ndarray, S: np.ndarray):
        self.prior = prior
        self.Vr = np.asarray(Vr, dtype=float)
        self.S = np.asarray(S, dtype=float)
        if np.any(self.S < 0):
            raise IndefiniteMetricError("low-rank spectrum must be non-negative")
        self.D = self.S / (self.S + 1.0)
        self._E = prior.mass.matvec(prior.V) / prior.lam
        self._F = prior.V * prior.lam
        self.logdet = prior.precision_logdet() + float(np.sum(np.log1p(self.S)))

    @property
    def n(self) -> int:
        return self.prior.n

    @property
    def rank(self) -> int:
        return self.S.size

    def apply(self, v: np.ndarray) -> np.ndarray:
        y = self._E.T @ v
        y = y + self.Vr @ (_col(self.S, y) * (self.Vr.T @ y))
        return self.prior.alpha * (self._E @ y)

    def solve(self, v: np.ndarray) -> np.ndarray:
        y = self._F.T @ v
        y = y - self.Vr @ (_col(self.D, y) * (self.Vr.T @ y))
        return (self._F @ y) / self.prior.alpha

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.n))

    def sample_momentum(self, rng: np.random.Generator) -> np.ndarray:
        b = rng.standard_normal(self.n)
        c = rng.standard_normal(self.rank)
        return np.sqrt(self.prior.alpha) * (self._E @ (b + self.Vr @ (np.sqrt(self.S) * c)))

    def to_dense(self) -> np.ndarray:
        return self.apply(np.eye(self.n))


def _col(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    return s if y.ndim == 1 else s[:, None]


def woodbury_weights(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return S / (S + 1.0)


def build_exact(ws: DerivativeWorkspace, prior: PriorBasis, kind: str = "exact") -> DenseMetric:
    """Dense augmented Fisher metric at the workspace's current parameter."""
    return DenseMetric(ws.assemble_fisher() + prior.precision_matrix(), kind=kind)


def rsvd_prior_preconditioned(ws: DerivativeWorkspace, prior: PriorBasis, rank: int,
                              oversample: int = 0, rng: np.random.Generator | None = None,
                              max_restarts: int = 3, cond_limit: float = 1e12,
                              ) -> tuple[np.ndarray, np.ndarray]:
    """One-pass randomized eigendecomposition of the prior-preconditioned Fisher matrix.

    Uses ``2 (rank + oversample)`` PDE solves per attempt.  Returns ``(Vr, S)``
    with Euclidean-orthonormal ``Vr`` and descending non-negative ``S``.
    """
    n = prior.n
    ell = rank + oversample
    if not 1 <= rank <= n:
        raise ValueError(f"rank must lie in [1, {n}], got {rank}")
    if ell > n:
        raise ValueError(f"rank + oversample = {ell} exceeds N = {n}")
    rng = np.random.default_rng() if rng is None else rng
    F = prior.V * prior.lam
    for attempt in range(max_restarts + 1):
        omega = rng.standard_normal((n, ell))
        Y = F.T @ ws.fisher_vector(F @ omega) / prior.alpha
        Q, _ = linalg.qr(Y, mode="economic")
        QtO = Q.T @ omega
        if np.linalg.cond(QtO) > cond_limit:
            logger.warning("ill-conditioned Q^T Omega on attempt %d; redrawing", attempt)
            continue
        # B (Q^T Omega) = Q^T Y
        B = linalg.solve(QtO.T, (Q.T @ Y).T).T
        B = 0.5 * (B + B.T)
        evals, evecs = linalg.eigh(B)
        order = np.argsort(evals)[::-1][:rank]
        S = np.maximum(evals[order], 0.0)
        return Q @ evecs[:, order], S
    raise np.linalg.LinAlgError("randomized eigensolver failed: Q^T Omega stayed ill-conditioned")


def build_fixed(ws: DerivativeWorkspace, prior: PriorBasis, kind: str = "gauss_newton",
                rank: int = 20, oversample: int = 0,
                rng: np.random.Generator | None = None) -> DenseMetric | LowRankMetric:
    """Metric frozen at the workspace's parameter (normally the MAP point)."""
    if kind == "gauss_newton":
        return build_exact(ws, prior, kind="gauss_newton")
    if kind == "full_hessian":
        return DenseMetric(ws.assemble_hessian() + prior.precision_matrix(), kind="full_hessian")
    if kind == "low_rank":
        Vr, S = rsvd_prior_preconditioned(ws, prior, rank, oversample, rng)
        return LowRankMetric(prior, Vr, S)
    raise ValueError(f"unknown metric kind {kind!r}; expected one of {METRIC_KINDS}")


def metric_derivatives(ws: DerivativeWorkspace) -> np.ndarray:
    """``D[k] = dG/du_k``; the prior term is constant, so this is dH/du_k."""
    return ws.metric_derivatives()

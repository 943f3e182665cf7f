"""Gaussian prior N(u0, alpha^{-1} (I - Laplacian)^{-s}) discretized by matrix transfer.

The discrete operator ``A = M^{-1} K + I`` has M-orthonormal eigenvectors ``V``
and eigenvalues ``sigma``; the fractional power acts on the eigenvalues only,
giving KL weights ``lam = sigma^{-s/2}``.  With ``Lam = diag(lam)``:

* prior sample        u = u0 + alpha^{-1/2} V Lam a,   a ~ N(0, I)
* nodal covariance    (1/alpha) V Lam^2 V^T
* Euclidean precision alpha M V Lam^{-2} V^T M
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .fem import Mesh, SymTridiagonal, assemble_mass, assemble_stiffness


@dataclass(frozen=True)
class PriorBasis:
    mesh: Mesh
    V: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    alpha: float
    s: float
    u0: np.ndarray
    mass: SymTridiagonal
    # alpha-free Euclidean precision M V Lam^{-2} V^T M, cached for matvecs
    _unit_precision: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.sigma.size

    def neg_log(self, u: np.ndarray) -> float:
        r = np.asarray(u, dtype=float) - self.u0
        return 0.5 * self.alpha * float(r @ (self._unit_precision @ r))

    def gradient(self, u: np.ndarray) -> np.ndarray:
        r = np.asarray(u, dtype=float) - self.u0
        return self.alpha * (self._unit_precision @ r)

    def kl_coefficients(self, u: np.ndarray) -> np.ndarray:
        """Coordinates of ``u - u0`` in the eigenbasis (``V^{-1} = V^T M``)."""
        return self.V.T @ self.mass.matvec(np.asarray(u, dtype=float) - self.u0)

    def apply_precision(self, v: np.ndarray) -> np.ndarray:
        """C^{-1} v = alpha V Lam^{-2} V^T M v (map on the M-weighted space)."""
        z = self.V.T @ self.mass.matvec(v)
        return self.alpha * (self.V @ (_col(self.lam, z) ** -2 * z))

    def apply_covariance(self, v: np.ndarray) -> np.ndarray:
        """C v = alpha^{-1} V Lam^2 V^T M v."""
        z = self.V.T @ self.mass.matvec(v)
        return (self.V @ (_col(self.lam, z) ** 2 * z)) / self.alpha

    def precision_matrix(self) -> np.ndarray:
        """Dense Euclidean Hessian of :meth:`neg_log`, ``alpha M V Lam^{-2} V^T M``."""
        return self.alpha * self._unit_precision

    def covariance_matrix(self) -> np.ndarray:
        VL = self.V * self.lam
        return VL @ VL.T / self.alpha

    def precision_logdet(self) -> float:
        """log det of :meth:`precision_matrix` (uses |V|^2 = 1/|M|)."""
        _, logdet_m = np.linalg.slogdet(self.mass.to_dense())
        return self.n * np.log(self.alpha) + logdet_m - 2.0 * float(np.sum(np.log(self.lam)))

    def with_alpha(self, alpha: float) -> "PriorBasis":
        return PriorBasis(self.mesh, self.V, self.sigma, self.lam, float(alpha), self.s,
                          self.u0, self.mass, self._unit_precision)


def _col(lam: np.ndarray, z: np.ndarray) -> np.ndarray:
    return lam if z.ndim == 1 else lam[:, None]


def generalized_eigh(K: np.ndarray, M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve K v = mu M v via the Cholesky similarity transform.

    Returns ascending ``mu`` and M-orthonormal eigenvectors with the first
    significant component of each made positive.
    """
    L = linalg.cholesky(M, lower=True)
    Linv_K = linalg.solve_triangular(L, K, lower=True)
    C = linalg.solve_triangular(L, Linv_K.T, lower=True)
    C = 0.5 * (C + C.T)
    mu, Y = linalg.eigh(C)
    V = linalg.solve_triangular(L.T, Y, lower=False)
    # sign convention: first non-negligible entry positive
    tol = 1e-10 * np.max(np.abs(V), axis=0)
    first = np.argmax(np.abs(V) > tol, axis=0)
    signs = np.sign(V[first, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return mu, V * signs


def build_prior(mesh: Mesh, s: float = 0.6, alpha: float = 1.0,
                u0: np.ndarray | None = None) -> PriorBasis:
    if not s > 0.5:
        raise ValueError(f"s must exceed 1/2 for a well-defined prior in 1D, got {s}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    mass = assemble_mass(mesh)
    mu, V = generalized_eigh(assemble_stiffness(mesh).to_dense(), mass.to_dense())
    # K is PSD: round-off negatives belong to the constant mode
    sigma = np.maximum(mu, 0.0) + 1.0
    lam = sigma ** (-0.5 * s)
    if u0 is None:
        u0 = np.zeros(mesh.n_nodes)
    u0 = np.array(u0, dtype=float)
    if u0.shape != (mesh.n_nodes,):
        raise ValueError("u0 must be a nodal vector")
    MV = mass.matvec(V)
    unit_precision = (MV / lam**2) @ MV.T
    unit_precision = 0.5 * (unit_precision + unit_precision.T)
    for a in (V, sigma, lam, u0, unit_precision):
        a.setflags(write=False)
    return PriorBasis(mesh, V, sigma, lam, float(alpha), float(s), u0, mass, unit_precision)


def kl_sample(prior: PriorBasis, a: np.ndarray) -> np.ndarray:
    """Map standard-normal coefficients ``a`` (length N, or N x m) to prior samples."""
    a = np.asarray(a, dtype=float)
    u = prior.V @ (_col(prior.lam, a) * a) / np.sqrt(prior.alpha)
    return u + (prior.u0 if a.ndim == 1 else prior.u0[:, None])


def prior_neg_log(prior: PriorBasis, u: np.ndarray) -> float:
    return prior.neg_log(u)


def prior_gradient(prior: PriorBasis, u: np.ndarray) -> np.ndarray:
    return prior.gradient(u)


def apply_precision(prior: PriorBasis, v: np.ndarray) -> np.ndarray:
    return prior.apply_precision(v)


def apply_covariance(prior: PriorBasis, v: np.ndarray) -> np.ndarray:
    return prior.apply_covariance(v)

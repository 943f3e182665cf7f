"""Adjoint-based derivatives of the data misfit.

All quantities are the exact derivatives of the discrete misfit
``J(u) = |B w(u) - d|^2 / (2 sigma^2)`` with ``A(u) w = f``.  Every linear solve
reuses the single factorization of ``A(u)`` and adds one to the solve counter:

=============================  ========================================
gradient (cold workspace)      2  (forward + adjoint)
Hessian / Fisher action        +2 per direction
third-derivative tensor        +3 per (v1, v2, v3) beyond the Fisher action
=============================  ========================================

Directions may be passed as a vector or as an ``N x m`` array of columns; the
solves are then batched but still counted per column.
"""

from __future__ import annotations

import numpy as np

from .fem import Mesh, SolveCounter, stiffness_action
from .forward import DEFAULT_BIOT, ForwardSolution, ObservationSet, observation_matrix, solve_forward

DEFAULT_DERIVATIVE_CAP = 64


class DerivativeWorkspace:
    """Caches the forward and adjoint states of the misfit at one parameter value.

    Parameters
    ----------
    mesh, obs, bi
        Problem definition.
    counter
        Solve accumulator; a fresh one is created when omitted.
    u
        Optional initial parameter.
    """

    def __init__(self, mesh: Mesh, obs: ObservationSet, bi: float = DEFAULT_BIOT,
                 counter: SolveCounter | None = None, u: np.ndarray | None = None,
                 derivative_cap: int = DEFAULT_DERIVATIVE_CAP):
        self.mesh = mesh
        self.obs = obs
        self.bi = float(bi)
        self.counter = counter if counter is not None else SolveCounter()
        self.derivative_cap = derivative_cap
        self.B = observation_matrix(mesh, obs.locations)
        self._inv_var = 1.0 / obs.noise_std**2
        self.u: np.ndarray | None = None
        self._reset()
        if u is not None:
            self.set_parameter(u)

    def _reset(self):
        self._forward: ForwardSolution | None = None
        self._adjoint: np.ndarray | None = None
        self._basis_fisher: tuple[np.ndarray, np.ndarray] | None = None
        self._fisher: np.ndarray | None = None

    def set_parameter(self, u: np.ndarray) -> None:
        u = np.array(u, dtype=float)
        if u.shape != (self.mesh.n_nodes,):
            raise ValueError(f"u must have shape ({self.mesh.n_nodes},)")
        if self.u is not None and np.array_equal(u, self.u):
            return
        self.u = u
        self.u.setflags(write=False)
        self._reset()

    # -- first order -----------------------------------------------------

    @property
    def forward(self) -> ForwardSolution:
        if self.u is None:
            raise RuntimeError("no parameter set on the workspace")
        if self._forward is None:
            self._forward = solve_forward(self.mesh, self.u, self.bi, self.counter)
        return self._forward

    @property
    def w(self) -> np.ndarray:
        return self.forward.w

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.forward.factor.solve(rhs, self.counter)

    def residual(self) -> np.ndarray:
        return self.B @ self.w - self.obs.data

    def misfit(self) -> float:
        r = self.residual()
        return 0.5 * self._inv_var * float(r @ r)

    def solve_adjoint(self) -> np.ndarray:
        if self._adjoint is None:
            rhs = -self._inv_var * (self.B.T @ self.residual())
            self._adjoint = self._solve(rhs)
        return self._adjoint

    def misfit_gradient(self) -> np.ndarray:
        integ = self.forward.integrals
        lam = self.solve_adjoint()
        q = np.diff(self.w) * np.diff(lam) / integ.h**2
        return integ.gradient_form(q)

    # -- second order ----------------------------------------------------

    def _incremental_forward(self, V: np.ndarray) -> np.ndarray:
        """Second-order forward states for the directions in ``V``."""
        integ = self.forward.integrals
        return self._solve(-stiffness_action(integ.direction_coefficients(V), self.w))

    def _observation_source(self, W: np.ndarray) -> np.ndarray:
        return -self._inv_var * (self.B.T @ (self.B @ W))

    def _fisher_states(self, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        W2 = self._incremental_forward(V)
        L2 = self._solve(self._observation_source(W2))
        return W2, L2

    def _fisher_form(self, L2: np.ndarray) -> np.ndarray:
        integ = self.forward.integrals
        dw = np.diff(self.w)
        dl = np.diff(L2, axis=0)
        q = (dw[:, None] * dl if dl.ndim == 2 else dw * dl) / integ.h**2
        return integ.gradient_form(q)

    def fisher_vector(self, v: np.ndarray) -> np.ndarray:
        """Gauss-Newton (Fisher) action; 2 solves per direction."""
        _, L2 = self._fisher_states(np.asarray(v, dtype=float))
        return self._fisher_form(L2)

    def hessian_vector(self, v: np.ndarray) -> np.ndarray:
        """Full misfit Hessian action; 2 solves per direction."""
        v = np.asarray(v, dtype=float)
        integ = self.forward.integrals
        lam = self.solve_adjoint()
        W2 = self._incremental_forward(v)
        rhs = self._observation_source(W2) - stiffness_action(
            integ.direction_coefficients(v), lam)
        L2 = self._solve(rhs)
        h2 = integ.h**2
        dw, dlam = np.diff(self.w), np.diff(lam)
        dW2, dL2 = np.diff(W2, axis=0), np.diff(L2, axis=0)
        if v.ndim == 2:
            dw_, dlam_ = dw[:, None], dlam[:, None]
        else:
            dw_, dlam_ = dw, dlam
        return (integ.gradient_form(dw_ * dL2 / h2)
                + integ.gradient_form(dW2 * dlam_ / h2)
                + integ.second_form(dw * dlam / h2, v))

    def assemble_fisher(self) -> np.ndarray:
        """Dense Fisher matrix from its action on every basis vector (2N solves)."""
        if self._fisher is None:
            n = self.mesh.n_nodes
            W2, L2 = self._fisher_states(np.eye(n))
            self._basis_fisher = (W2, L2)
            H = self._fisher_form(L2)
            self._fisher = _symmetrize(H, "Fisher")
        return self._fisher

    def assemble_hessian(self) -> np.ndarray:
        """Dense full misfit Hessian (2N solves beyond the gradient)."""
        return _symmetrize(self.hessian_vector(np.eye(self.mesh.n_nodes)), "Hessian")

    # -- third order -----------------------------------------------------

    def third_tensor_actions(self, V1: np.ndarray, V2: np.ndarray, V3: np.ndarray,
                             fisher_states: tuple[np.ndarray, np.ndarray] | None = None,
                             ) -> np.ndarray:
        """Derivative along ``v3`` of ``<G(u) v2, v1>`` for each column triple.

        Three solves per triple (one second-order forward, one third-order
        forward, one third-order adjoint).  ``fisher_states`` supplies the
        Fisher intermediates for ``V2`` when already available; otherwise
        they are recomputed at 2 solves per column.
        """
        V1 = _as_columns(V1)
        V2 = _as_columns(V2)
        V3 = _as_columns(V3)
        integ = self.forward.integrals
        h2 = integ.h**2
        if fisher_states is None:
            fisher_states = self._fisher_states(V2)
        W2, L2 = fisher_states
        w = self.w
        c3 = integ.direction_coefficients(V3)
        W3 = self._solve(-stiffness_action(c3, w))
        rhs = -(stiffness_action(c3, W2)
                + stiffness_action(integ.pair_coefficients(V2, V3), w)
                + stiffness_action(integ.direction_coefficients(V2), W3))
        W23 = self._solve(rhs)
        L23 = self._solve(self._observation_source(W23) - stiffness_action(c3, L2))
        dw = np.diff(w)[:, None]
        dL2 = np.diff(L2, axis=0)
        c1 = integ.direction_coefficients(V1)
        t = (integ.pair_coefficients(V1, V3) * dw * dL2
             + c1 * np.diff(W3, axis=0) * dL2
             + c1 * dw * np.diff(L23, axis=0))
        return np.sum(t, axis=0)

    def third_tensor_action(self, v1, v2, v3, fisher_states=None) -> float:
        return float(self.third_tensor_actions(v1, v2, v3, fisher_states)[0])

    def _check_cap(self):
        n = self.mesh.n_nodes
        if n > self.derivative_cap:
            raise ValueError(
                f"metric derivatives need O(N^3) solves; N={n} exceeds cap {self.derivative_cap}")

    def metric_derivative(self, k: int) -> np.ndarray:
        """dH/du_k as a dense matrix; entry (i, j) is the tensor at (e_i, e_j, e_k)."""
        self._check_cap()
        n = self.mesh.n_nodes
        self.assemble_fisher()
        W2b, L2b = self._basis_fisher
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        eye = np.eye(n)
        V3 = np.zeros((n, n * n))
        V3[k] = 1.0
        vals = self.third_tensor_actions(eye[:, ii], eye[:, jj], V3,
                                         fisher_states=(W2b[:, jj], L2b[:, jj]))
        return _symmetrize(vals.reshape(n, n), "metric derivative")

    def metric_derivatives(self) -> np.ndarray:
        """Array ``D`` with ``D[k] = dH/du_k`` (3 N^3 solves plus the Fisher assembly)."""
        self._check_cap()
        n = self.mesh.n_nodes
        self.assemble_fisher()
        W2b, L2b = self._basis_fisher
        kk, ii, jj = (a.ravel() for a in np.meshgrid(np.arange(n), np.arange(n), np.arange(n),
                                                     indexing="ij"))
        eye = np.eye(n)
        vals = self.third_tensor_actions(eye[:, ii], eye[:, jj], eye[:, kk],
                                         fisher_states=(W2b[:, jj], L2b[:, jj]))
        D = vals.reshape(n, n, n)
        asym = np.max(np.abs(D - D.transpose(0, 2, 1)), initial=0.0)
        scale = max(np.max(np.abs(D), initial=0.0), 1e-300)
        if asym > 1e-8 * scale + 1e-12:
            raise RuntimeError(f"metric derivative asymmetry {asym:.3e} too large")
        return 0.5 * (D + D.transpose(0, 2, 1))


def _as_columns(V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    return V[:, None] if V.ndim == 1 else V


def _symmetrize(H: np.ndarray, what: str) -> np.ndarray:
    asym = np.max(np.abs(H - H.T), initial=0.0)
    scale = max(np.max(np.abs(H), initial=0.0), 1e-300)
    if asym > 1e-10 * max(scale, 1.0):
        raise RuntimeError(f"{what} asymmetry {asym:.3e} exceeds tolerance")
    return 0.5 * (H + H.T)

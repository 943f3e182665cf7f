"""Compiled derivative workspace for small meshes.

The Riemannian samplers evaluate the metric and its derivatives hundreds of
thousands of times on problems with a handful of nodes, where numpy call
overhead dominates.  This module repeats the discrete adjoint computations of
:mod:`rmhmc_inverse.adjoint` as numba kernels with scalar loops.  It performs
(and counts) exactly the same solves, one flux-recurrence solve per right-hand
side, so solve accounting does not depend on the engine.  Results agree with
the numpy workspace to round-off; the test suite checks this.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .adjoint import DEFAULT_DERIVATIVE_CAP
from .fem import DomainError, Mesh, NotPositiveDefiniteError, SolveCounter
from .forward import DEFAULT_BIOT, ObservationSet, observation_matrix

_SERIES_CUTOFF = 0.5
_SERIES_TERMS = 30
_EXP_LIMIT = 700.0


@njit(cache=True)
def _moments(x):
    if abs(x) < _SERIES_CUTOFF:
        term = 1.0
        s0 = s1 = s2 = 0.0
        for n in range(_SERIES_TERMS):
            s0 += term / (n + 1)
            s1 += term / (n + 2)
            s2 += term / (n + 3)
            term = term * x / (n + 1)
        return s0, s1, s2
    ex = np.exp(x)
    a0 = np.expm1(x) / x
    a1 = (ex - a0) / x
    a2 = (ex - 2.0 * a1) / x
    return a0, a1, a2


@njit(cache=True)
def _element_integrals(u, h):
    ne = u.size - 1
    out = np.empty((6, ne))  # i0, il, ir, ill, ilr, irr
    for e in range(ne):
        a, b = u[e], u[e + 1]
        f0, f1, f2 = _moments(b - a)
        _, g1, g2 = _moments(a - b)
        ea, eb = h * np.exp(a), h * np.exp(b)
        out[0, e] = ea * f0
        out[1, e] = eb * g1
        out[2, e] = ea * f1
        out[3, e] = eb * g2
        out[4, e] = ea * (f1 - f2)
        out[5, e] = ea * f2
    return out


@njit(cache=True)
def _factor(coeffs, bi):
    """Element coefficients and Robin term of the forward operator, validated.

    The operator is solved by the flux recurrence of
    :class:`rmhmc_inverse.fem.RobinLaplacianFactor`; nothing is factored.
    """
    rb = np.array([bi])
    ok = bi > 0.0
    for c in coeffs:
        if not (c > 0.0 and c < np.inf):
            ok = False
    return coeffs.copy(), rb, ok


@njit(cache=True)
def _solve(kc, rb, b):
    n = b.size
    q = np.empty(n - 1)
    acc = 0.0
    for e in range(n - 2, -1, -1):
        acc += b[e + 1]
        q[e] = acc
    x = np.empty(n)
    x[0] = (b[0] + q[0]) / rb[0]
    for e in range(n - 1):
        x[e + 1] = x[e] + q[e] / kc[e]
    return x


@njit(cache=True)
def _stiff_action(c, w):
    """``sum_e c_e [[1, -1], [-1, 1]]`` applied to ``w``."""
    n = w.size
    out = np.zeros(n)
    for e in range(n - 1):
        f = c[e] * (w[e + 1] - w[e])
        out[e] -= f
        out[e + 1] += f
    return out


@njit(cache=True)
def _unit_direction(ints, k, h2):
    """Element coefficients of ``exp(u) e_k`` (the k-th hat direction)."""
    ne = ints.shape[1]
    c = np.zeros(ne)
    if k < ne:
        c[k] += ints[1, k] / h2
    if k >= 1:
        c[k - 1] += ints[2, k - 1] / h2
    return c


@njit(cache=True)
def _unit_pair(ints, j, k, h2):
    """Element coefficients of ``exp(u) e_j e_k``."""
    ne = ints.shape[1]
    c = np.zeros(ne)
    for e in range(ne):
        lj = 1.0 if j == e else 0.0
        rj = 1.0 if j == e + 1 else 0.0
        lk = 1.0 if k == e else 0.0
        rk = 1.0 if k == e + 1 else 0.0
        c[e] = (ints[3, e] * lj * lk + ints[4, e] * (lj * rk + rj * lk)
                + ints[5, e] * rj * rk) / h2
    return c


@njit(cache=True)
def _obs_source(B, inv_var, w):
    return -inv_var * (B.T @ (B @ w))


@njit(cache=True)
def _gradient_form(ints, q):
    ne = q.size
    out = np.zeros(ne + 1)
    for e in range(ne):
        out[e] += ints[1, e] * q[e]
        out[e + 1] += ints[2, e] * q[e]
    return out


@njit(cache=True)
def _forward(u, h, bi):
    ints = _element_integrals(u, h)
    kc, rb, ok = _factor(ints[0] / (h * h), bi)
    n = u.size
    rhs = np.zeros(n)
    rhs[n - 1] = 1.0
    if not ok:
        return ints, kc, rb, rhs, False
    return ints, kc, rb, _solve(kc, rb, rhs), True


@njit(cache=True)
def _misfit_gradient(ints, kc, rb, w, B, data, inv_var, h):
    lam = _solve(kc, rb, -inv_var * (B.T @ (B @ w - data)))
    ne = w.size - 1
    q = np.empty(ne)
    for e in range(ne):
        q[e] = (w[e + 1] - w[e]) * (lam[e + 1] - lam[e]) / (h * h)
    return _gradient_form(ints, q)


@njit(cache=True)
def _fisher(ints, kc, rb, w, B, inv_var, h):
    n = w.size
    h2 = h * h
    # row j holds the incremental states of direction e_j
    W2 = np.empty((n, n))
    L2 = np.empty((n, n))
    H = np.empty((n, n))
    q = np.empty(n - 1)
    for j in range(n):
        W2[j] = _solve(kc, rb, -_stiff_action(_unit_direction(ints, j, h2), w))
        L2[j] = _solve(kc, rb, _obs_source(B, inv_var, W2[j]))
        for e in range(n - 1):
            q[e] = (w[e + 1] - w[e]) * (L2[j, e + 1] - L2[j, e]) / h2
        H[:, j] = _gradient_form(ints, q)
    return 0.5 * (H + H.T), W2, L2


@njit(cache=True)
def _metric_derivatives(ints, kc, rb, w, W2, L2, B, inv_var, h):
    """``D[k, i, j]`` = third tensor at ``(e_i, e_j, e_k)``; 3 solves per entry."""
    n = w.size
    h2 = h * h
    D = np.empty((n, n, n))
    for k in range(n):
        c3 = _unit_direction(ints, k, h2)
        for i in range(n):
            c1 = _unit_direction(ints, i, h2)
            c13 = _unit_pair(ints, i, k, h2)
            for j in range(n):
                W3 = _solve(kc, rb, -_stiff_action(c3, w))
                rhs = -(_stiff_action(c3, W2[j])
                        + _stiff_action(_unit_pair(ints, j, k, h2), w)
                        + _stiff_action(_unit_direction(ints, j, h2), W3))
                W23 = _solve(kc, rb, rhs)
                L23 = _solve(kc, rb, _obs_source(B, inv_var, W23) - _stiff_action(c3, L2[j]))
                t = 0.0
                for e in range(n - 1):
                    dw = w[e + 1] - w[e]
                    dl2 = L2[j, e + 1] - L2[j, e]
                    t += (c13[e] * dw * dl2 + c1[e] * (W3[e + 1] - W3[e]) * dl2
                          + c1[e] * dw * (L23[e + 1] - L23[e]))
                D[k, i, j] = t
    for k in range(n):
        D[k] = 0.5 * (D[k] + D[k].T)
    return D


class CompiledWorkspace:
    """Drop-in replacement for the parts of
    :class:`~rmhmc_inverse.adjoint.DerivativeWorkspace` used by the posterior
    target: misfit, gradient, dense Fisher matrix and metric derivatives."""

    def __init__(self, mesh: Mesh, obs: ObservationSet, bi: float = DEFAULT_BIOT,
                 counter: SolveCounter | None = None, u: np.ndarray | None = None,
                 derivative_cap: int = DEFAULT_DERIVATIVE_CAP):
        if not bi > 0:
            raise ValueError(f"Biot number must be positive, got {bi}")
        self.mesh = mesh
        self.obs = obs
        self.bi = float(bi)
        self.counter = counter if counter is not None else SolveCounter()
        self.derivative_cap = derivative_cap
        self.B = np.ascontiguousarray(observation_matrix(mesh, obs.locations))
        self._data = np.ascontiguousarray(obs.data, dtype=float)
        self._inv_var = 1.0 / obs.noise_std**2
        self.u: np.ndarray | None = None
        self._reset()
        if u is not None:
            self.set_parameter(u)

    def _reset(self):
        self._fwd = None
        self._grad = None
        self._fisher = None
        self._dmetric = None

    def set_parameter(self, u: np.ndarray) -> None:
        u = np.array(u, dtype=float)
        if u.shape != (self.mesh.n_nodes,):
            raise ValueError(f"u must have shape ({self.mesh.n_nodes},)")
        if self.u is not None and np.array_equal(u, self.u):
            return
        self.u = u
        self.u.setflags(write=False)
        self._reset()

    def _forward(self):
        if self.u is None:
            raise RuntimeError("no parameter set on the workspace")
        if self._fwd is None:
            if not np.all(np.isfinite(self.u)):
                raise DomainError("u contains non-finite entries")
            if np.max(self.u) > _EXP_LIMIT:
                raise DomainError(f"exp(u) overflows: max(u) = {np.max(self.u):.3g}")
            ints, kc, rb, w, ok = _forward(self.u, self.mesh.h, self.bi)
            if not ok:
                raise NotPositiveDefiniteError("forward operator is not positive definite")
            self.counter.add(1)
            self._fwd = (ints, kc, rb, w)
        return self._fwd

    @property
    def w(self) -> np.ndarray:
        return self._forward()[3]

    def residual(self) -> np.ndarray:
        return self.B @ self.w - self._data

    def misfit(self) -> float:
        r = self.residual()
        return 0.5 * self._inv_var * float(r @ r)

    def misfit_gradient(self) -> np.ndarray:
        if self._grad is None:
            ints, kc, rb, w = self._forward()
            self._grad = _misfit_gradient(ints, kc, rb, w, self.B, self._data,
                                          self._inv_var, self.mesh.h)
            self.counter.add(1)
        return self._grad

    def _fisher_parts(self):
        if self._fisher is None:
            ints, kc, rb, w = self._forward()
            self._fisher = _fisher(ints, kc, rb, w, self.B, self._inv_var, self.mesh.h)
            self.counter.add(2 * self.mesh.n_nodes)
        return self._fisher

    def assemble_fisher(self) -> np.ndarray:
        return self._fisher_parts()[0]

    def metric_derivatives(self) -> np.ndarray:
        n = self.mesh.n_nodes
        if n > self.derivative_cap:
            raise ValueError(
                f"metric derivatives need O(N^3) solves; N={n} exceeds cap {self.derivative_cap}")
        if self._dmetric is None:
            ints, kc, rb, w = self._forward()
            _, W2, L2 = self._fisher_parts()
            self._dmetric = _metric_derivatives(ints, kc, rb, w, W2, L2, self.B,
                                                self._inv_var, self.mesh.h)
            self.counter.add(3 * n**3)
        return self._dmetric

"""P1 finite elements on a uniform partition of [0, 1].

Everything downstream works with nodal vectors of length ``N = n_elements + 1``.
The log-conductivity ``u`` is piecewise linear, so every element integral of
``exp(u)`` times a product of hat functions has a closed form; those moments are
collected once per parameter value in :class:`ElementIntegrals` and reused by the
forward, adjoint and higher-order solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

# |slope| below which the element moments are summed as a power series
_SERIES_CUTOFF = 0.5
_SERIES_TERMS = 30
_EXP_LIMIT = 700.0


class DomainError(ValueError):
    """Raised when exp(u) would overflow."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a tridiagonal factorization meets a non-positive pivot."""


@dataclass(frozen=True)
class Mesh:
    """Uniform mesh of [0, 1] with ``n_elements`` elements."""

    n_elements: int
    nodes: np.ndarray = field(repr=False)

    @property
    def h(self) -> float:
        return 1.0 / self.n_elements

    @property
    def n_nodes(self) -> int:
        return self.n_elements + 1


def build_mesh(n_elements: int) -> Mesh:
    if int(n_elements) != n_elements or n_elements < 1:
        raise ValueError(f"n_elements must be a positive integer, got {n_elements!r}")
    n_elements = int(n_elements)
    nodes = np.arange(n_elements + 1, dtype=float) / n_elements
    nodes.setflags(write=False)
    return Mesh(n_elements, nodes)


@dataclass
class SymTridiagonal:
    """Symmetric tridiagonal matrix stored as its diagonal and one off-diagonal."""

    diagonal: np.ndarray
    off_diagonal: np.ndarray

    def __post_init__(self):
        self.diagonal = np.asarray(self.diagonal, dtype=float)
        self.off_diagonal = np.asarray(self.off_diagonal, dtype=float)
        if self.off_diagonal.shape[0] != self.diagonal.shape[0] - 1:
            raise ValueError("off_diagonal must have one entry fewer than diagonal")

    @property
    def n(self) -> int:
        return self.diagonal.shape[0]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = self.diagonal.reshape((-1,) + (1,) * (x.ndim - 1))
        e = self.off_diagonal.reshape((-1,) + (1,) * (x.ndim - 1))
        y = d * x
        y[:-1] += e * x[1:]
        y[1:] += e * x[:-1]
        return y

    def to_dense(self) -> np.ndarray:
        return (np.diag(self.diagonal) + np.diag(self.off_diagonal, 1)
                + np.diag(self.off_diagonal, -1))

    def add_to_diagonal(self, index: int, value: float) -> "SymTridiagonal":
        d = self.diagonal.copy()
        d[index] += value
        return SymTridiagonal(d, self.off_diagonal.copy())

    def scaled(self, factor: float) -> "SymTridiagonal":
        return SymTridiagonal(factor * self.diagonal, factor * self.off_diagonal)


class SolveCounter:
    """Accumulates PDE-solve counts, split by named phase.

    One counter belongs to one chain or run; it is passed explicitly to
    whatever performs solves.
    """

    def __init__(self, phase: str = "sampling"):
        self.phase = phase
        self.by_phase: dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.by_phase.values())

    def add(self, n: int = 1) -> None:
        self.by_phase[self.phase] = self.by_phase.get(self.phase, 0) + int(n)

    def set_phase(self, phase: str) -> None:
        self.phase = phase

    def __repr__(self):
        return f"SolveCounter(total={self.total}, by_phase={self.by_phase})"


class TridiagonalFactor:
    """LDL^T factorization of an SPD tridiagonal matrix (LAPACK ``pttrf``)."""

    def __init__(self, matrix: SymTridiagonal):
        self.matrix = matrix
        d, e, info = lapack.dpttrf(matrix.diagonal, matrix.off_diagonal)
        if info != 0:
            raise NotPositiveDefiniteError(
                f"matrix is not positive definite (pivot {info} non-positive)")
        self._d = d
        self._e = e

    def solve(self, b: np.ndarray, counter: SolveCounter | None = None) -> np.ndarray:
        """Solve ``A x = b``; each right-hand-side column counts as one solve."""
        b = np.asarray(b, dtype=float)
        x, info = lapack.dpttrs(self._d, self._e, b)
        if info != 0:
            raise np.linalg.LinAlgError(f"pttrs failed with info={info}")
        if counter is not None:
            counter.add(1 if b.ndim == 1 else b.shape[1])
        return x


class RobinLaplacianFactor:
    """Direct solver for ``sum_e c_e [[1, -1], [-1, 1]] + robin e_0 e_0^T``.

    Rows of the weighted Laplacian sum to zero, so the equations read
    ``q_{i-1} - q_i = f_i`` for the element fluxes ``q_e = c_e (x_{e+1} - x_e)``
    together with ``robin x_0 - q_0 = f_0``.  Fluxes follow from a backward
    sum of ``f``, then ``x`` from a forward sum of ``q_e / c_e``.  Unlike an
    LDL^T sweep this never subtracts pivots of size ``c_e`` to recover the
    small Robin coefficient, so nodal values stay accurate to round-off on
    fine meshes.  Each right-hand-side column counts as one solve.
    """

    def __init__(self, coeffs: np.ndarray, robin: float):
        coeffs = np.asarray(coeffs, dtype=float)
        if not (robin > 0 and np.all(coeffs > 0) and np.all(np.isfinite(coeffs))):
            raise NotPositiveDefiniteError(
                "weighted Laplacian needs positive finite coefficients and Robin term")
        self.coeffs = coeffs
        self.robin = float(robin)

    @property
    def matrix(self) -> SymTridiagonal:
        return stiffness_from_coefficients(self.coeffs).add_to_diagonal(0, self.robin)

    def solve(self, b: np.ndarray, counter: SolveCounter | None = None) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        q = np.cumsum(b[:0:-1], axis=0)[::-1]
        x = np.empty_like(b)
        x[0] = (b[0] + q[0]) / self.robin
        x[1:] = x[0] + np.cumsum(q / _bcast(self.coeffs, q), axis=0)
        if counter is not None:
            counter.add(1 if b.ndim == 1 else b.shape[1])
        return x


def solve_spd(A: SymTridiagonal, b: np.ndarray,
              counter: SolveCounter | None = None) -> np.ndarray:
    return TridiagonalFactor(A).solve(b, counter)


def assemble_mass(mesh: Mesh) -> SymTridiagonal:
    h = mesh.h
    d = np.full(mesh.n_nodes, 2.0 * h / 3.0)
    d[0] = d[-1] = h / 3.0
    return SymTridiagonal(d, np.full(mesh.n_elements, h / 6.0))


def _moments(delta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """m_k(delta) = int_0^1 t^k exp(delta t) dt for k = 0, 1, 2."""
    delta = np.asarray(delta, dtype=float)
    m0 = np.empty_like(delta)
    m1 = np.empty_like(delta)
    m2 = np.empty_like(delta)
    small = np.abs(delta) < _SERIES_CUTOFF
    if np.any(small):
        x = delta[small]
        term = np.ones_like(x)
        s0 = np.zeros_like(x)
        s1 = np.zeros_like(x)
        s2 = np.zeros_like(x)
        for n in range(_SERIES_TERMS):
            # term = x^n / n!
            s0 += term / (n + 1)
            s1 += term / (n + 2)
            s2 += term / (n + 3)
            term = term * x / (n + 1)
        m0[small] = s0
        m1[small] = s1
        m2[small] = s2
    big = ~small
    if np.any(big):
        x = delta[big]
        ex = np.exp(x)
        a0 = np.expm1(x) / x
        a1 = (ex - a0) / x
        a2 = (ex - 2.0 * a1) / x
        m0[big] = a0
        m1[big] = a1
        m2[big] = a2
    return m0, m1, m2


@dataclass(frozen=True)
class ElementIntegrals:
    """Per-element integrals of exp(u) against products of the two local hats.

    ``i0[e] = int_e exp(u)``, ``il``/``ir`` weight by the left/right hat,
    ``ill``/``ilr``/``irr`` by products of two hats.
    """

    h: float
    i0: np.ndarray
    il: np.ndarray
    ir: np.ndarray
    ill: np.ndarray
    ilr: np.ndarray
    irr: np.ndarray

    def direction_coefficients(self, v: np.ndarray) -> np.ndarray:
        """Element coefficients of the stiffness form weighted by ``v exp(u)``."""
        v = np.asarray(v, dtype=float)
        il, ir = _bcast(self.il, v), _bcast(self.ir, v)
        return (il * v[:-1] + ir * v[1:]) / self.h**2

    def pair_coefficients(self, v: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Element coefficients of the stiffness form weighted by ``v z exp(u)``."""
        v = np.asarray(v, dtype=float)
        z = np.asarray(z, dtype=float)
        if v.ndim < z.ndim:
            v = _bcast(v, z)
        elif z.ndim < v.ndim:
            z = _bcast(z, v)
        ill, ilr, irr = (_bcast(a, v) for a in (self.ill, self.ilr, self.irr))
        vl, vr, zl, zr = v[:-1], v[1:], z[:-1], z[1:]
        return (ill * vl * zl + ilr * (vl * zr + vr * zl) + irr * vr * zr) / self.h**2

    def gradient_form(self, q: np.ndarray) -> np.ndarray:
        """Nodal vector ``sum_e q_e int_e phi_i exp(u)``."""
        q = np.asarray(q, dtype=float)
        out = np.zeros((q.shape[0] + 1,) + q.shape[1:])
        out[:-1] += _bcast(self.il, q) * q
        out[1:] += _bcast(self.ir, q) * q
        return out

    def second_form(self, q: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Nodal vector ``sum_e q_e int_e phi_i v exp(u)``."""
        q = np.asarray(q, dtype=float)
        v = np.asarray(v, dtype=float)
        ill, ilr, irr = (_bcast(a, v) for a in (self.ill, self.ilr, self.irr))
        if q.ndim < v.ndim:
            q = q.reshape(q.shape + (1,) * (v.ndim - q.ndim))
        out = np.zeros(np.broadcast_shapes((q.shape[0] + 1,) + q.shape[1:], v.shape))
        out[:-1] += q * (ill * v[:-1] + ilr * v[1:])
        out[1:] += q * (ilr * v[:-1] + irr * v[1:])
        return out


def _bcast(a: np.ndarray, like: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape + (1,) * (np.ndim(like) - 1))


def element_integrals(mesh: Mesh, u: np.ndarray) -> ElementIntegrals:
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_nodes,):
        raise ValueError(f"u must have shape ({mesh.n_nodes},), got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise DomainError("u contains non-finite entries")
    if np.max(u) > _EXP_LIMIT:
        raise DomainError(f"exp(u) overflows: max(u) = {np.max(u):.3g} > {_EXP_LIMIT}")
    h = mesh.h
    a, b = u[:-1], u[1:]
    delta = b - a
    f0, f1, f2 = _moments(delta)
    _, g1, g2 = _moments(-delta)
    ea, eb = h * np.exp(a), h * np.exp(b)
    return ElementIntegrals(
        h=h,
        i0=ea * f0,
        il=eb * g1,
        ir=ea * f1,
        ill=eb * g2,
        ilr=ea * (f1 - f2),
        irr=ea * f2,
    )


def stiffness_from_coefficients(coeffs: np.ndarray) -> SymTridiagonal:
    """Assemble ``sum_e c_e [[1, -1], [-1, 1]]`` into a tridiagonal matrix."""
    d = np.zeros(coeffs.shape[0] + 1)
    d[:-1] += coeffs
    d[1:] += coeffs
    return SymTridiagonal(d, -coeffs)


def stiffness_action(coeffs: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply the element-coefficient stiffness matrix to ``w`` (vector or columns).

    ``coeffs`` may carry one column per column of ``w``, or be shared.
    """
    w = np.asarray(w, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    flux = np.diff(w, axis=0)
    if coeffs.ndim < flux.ndim:
        coeffs = _bcast(coeffs, flux)
    elif flux.ndim < coeffs.ndim:
        flux = flux.reshape(flux.shape + (1,) * (coeffs.ndim - flux.ndim))
    flux = coeffs * flux
    out = np.zeros((flux.shape[0] + 1,) + flux.shape[1:])
    out[:-1] -= flux
    out[1:] += flux
    return out


def assemble_weighted_stiffness(mesh: Mesh, u: np.ndarray,
                                integrals: ElementIntegrals | None = None) -> SymTridiagonal:
    """Galerkin matrix of ``int exp(u) w' v'`` with exact element integration."""
    if integrals is None:
        integrals = element_integrals(mesh, u)
    return stiffness_from_coefficients(integrals.i0 / mesh.h**2)


def assemble_stiffness(mesh: Mesh) -> SymTridiagonal:
    """Unweighted Laplacian stiffness matrix."""
    return stiffness_from_coefficients(np.full(mesh.n_elements, 1.0 / mesh.h))

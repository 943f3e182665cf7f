"""Forward heat-conduction solve, pointwise observations and the data misfit.

The state ``w`` solves the Galerkin system

    (K_u + Bi e_0 e_0^T) w = e_{N-1},

i.e. a Robin (convective) condition at x = 0 and a unit inward flux at x = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import (
    ElementIntegrals,
    Mesh,
    SolveCounter,
    RobinLaplacianFactor,
    assemble_weighted_stiffness,
    element_integrals,
)

DEFAULT_BIOT = 0.1


@dataclass(frozen=True)
class ObservationSet:
    locations: np.ndarray
    data: np.ndarray
    noise_std: float

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.locations, dtype=float))
        data = np.atleast_1d(np.asarray(self.data, dtype=float))
        if loc.ndim != 1 or loc.size < 1:
            raise ValueError("need at least one observation location")
        if loc.shape != data.shape:
            raise ValueError("locations and data must have the same length")
        if np.any(loc < 0.0) or np.any(loc > 1.0):
            raise ValueError("observation locations must lie in [0, 1]")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "data", data)

    @property
    def n_obs(self) -> int:
        return self.locations.size

    def with_data(self, data: np.ndarray) -> "ObservationSet":
        return ObservationSet(self.locations, data, self.noise_std)


def observation_matrix(mesh: Mesh, locations) -> np.ndarray:
    """Rows hold the P1 hat-function values at each location (K x N)."""
    loc = np.atleast_1d(np.asarray(locations, dtype=float))
    if np.any(loc < 0.0) or np.any(loc > 1.0):
        raise ValueError("observation locations must lie in [0, 1]")
    scaled = loc * mesh.n_elements
    elem = np.minimum(np.floor(scaled).astype(int), mesh.n_elements - 1)
    t = scaled - elem
    B = np.zeros((loc.size, mesh.n_nodes))
    rows = np.arange(loc.size)
    B[rows, elem] += 1.0 - t
    B[rows, elem + 1] += t
    return B


@dataclass
class ForwardSolution:
    u: np.ndarray
    w: np.ndarray
    bi: float
    factor: RobinLaplacianFactor
    integrals: ElementIntegrals


def forward_operator(mesh: Mesh, u: np.ndarray, bi: float,
                     integrals: ElementIntegrals | None = None):
    if not bi > 0:
        raise ValueError(f"Biot number must be positive, got {bi}")
    if integrals is None:
        integrals = element_integrals(mesh, u)
    A = assemble_weighted_stiffness(mesh, u, integrals).add_to_diagonal(0, bi)
    return A, integrals


def solve_forward(mesh: Mesh, u: np.ndarray, bi: float = DEFAULT_BIOT,
                  counter: SolveCounter | None = None) -> ForwardSolution:
    u = np.array(u, dtype=float)
    if not bi > 0:
        raise ValueError(f"Biot number must be positive, got {bi}")
    integrals = element_integrals(mesh, u)
    factor = RobinLaplacianFactor(integrals.i0 / mesh.h**2, bi)
    rhs = np.zeros(mesh.n_nodes)
    rhs[-1] = 1.0
    w = factor.solve(rhs, counter)
    return ForwardSolution(u=u, w=w, bi=bi, factor=factor, integrals=integrals)


def observe(mesh: Mesh, sol: ForwardSolution, locations) -> np.ndarray:
    return observation_matrix(mesh, locations) @ sol.w


def misfit_from_state(w_obs: np.ndarray, obs: ObservationSet) -> float:
    r = w_obs - obs.data
    return 0.5 * float(r @ r) / obs.noise_std**2


def misfit(mesh: Mesh, u: np.ndarray, obs: ObservationSet, bi: float = DEFAULT_BIOT,
           counter: SolveCounter | None = None) -> float:
    sol = solve_forward(mesh, u, bi, counter)
    return misfit_from_state(observe(mesh, sol, obs.locations), obs)


def log_posterior(mesh: Mesh, u: np.ndarray, obs: ObservationSet, prior,
                  bi: float = DEFAULT_BIOT, counter: SolveCounter | None = None) -> float:
    """Unnormalized log posterior: ``-misfit(u) - prior quadratic form``."""
    return -misfit(mesh, u, obs, bi, counter) - prior.neg_log(u)


def synthetic_truth(x: np.ndarray) -> np.ndarray:
    """Default log-conductivity used to generate synthetic data."""
    x = np.asarray(x, dtype=float)
    return np.sin(np.pi * x) + 0.5 * np.cos(2.0 * np.pi * x)


def synthesize_observations(mesh: Mesh, u_true: np.ndarray, locations, noise_std: float,
                            rng: np.random.Generator, bi: float = DEFAULT_BIOT) -> ObservationSet:
    clean = observe(mesh, solve_forward(mesh, u_true, bi), locations)
    noisy = clean + noise_std * rng.standard_normal(clean.shape)
    return ObservationSet(locations, noisy, noise_std)

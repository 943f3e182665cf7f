import numpy as np
import pytest

from rmhmc_inverse.fem import SolveCounter, build_mesh
from rmhmc_inverse.forward import synthesize_observations, synthetic_truth
from rmhmc_inverse.mapopt import find_map
from rmhmc_inverse.posterior import PosteriorTarget
from rmhmc_inverse.prior import build_prior

# (alpha, sigma) of the three two-parameter configurations
TWO_PARAM = {"A": (0.1, 0.1), "B": (1.0, 0.01), "C": (0.1, 0.01)}


def make_problem(n_elements, locations, sigma, alpha, s=0.6, seed=0, engine="auto",
                 compiled_dynamics=True):
    mesh = build_mesh(n_elements)
    rng = np.random.default_rng(seed)
    obs = synthesize_observations(mesh, synthetic_truth(mesh.nodes), locations, sigma, rng)
    prior = build_prior(mesh, s, alpha)
    target = PosteriorTarget(mesh, obs, prior, counter=SolveCounter("map"), engine=engine,
                             compiled_dynamics=compiled_dynamics)
    return mesh, obs, prior, target


def two_param(name, **kw):
    alpha, sigma = TWO_PARAM[name]
    return make_problem(1, [1.0], sigma, alpha, **kw)


@pytest.fixture(scope="session")
def config_a():
    """Config A target (compiled engine) and its MAP point."""
    mesh, obs, prior, target = two_param("A")
    return target, find_map(target)

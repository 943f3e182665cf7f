import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rmhmc_inverse.fem import SolveCounter, build_mesh
from rmhmc_inverse.forward import (
    ObservationSet, log_posterior, misfit, observation_matrix, observe, solve_forward,
)
from rmhmc_inverse.prior import build_prior


@pytest.mark.parametrize("n", [1, 2, 16, 1024])
@pytest.mark.parametrize("c", [0.0, -1.3, 2.5])
def test_constant_parameter_is_exact(n, c):
    mesh = build_mesh(n)
    w = solve_forward(mesh, np.full(n + 1, c), 0.1).w
    assert np.max(np.abs(w - (10.0 + np.exp(-c) * mesh.nodes))) <= 1e-10


def test_single_element_hand_values():
    assert np.allclose(solve_forward(build_mesh(1), np.zeros(2), 0.1).w, [10.0, 11.0],
                       rtol=1e-14)


def test_forward_residual_and_count():
    mesh = build_mesh(9)
    u = np.sin(np.arange(10.0))
    c = SolveCounter()
    sol = solve_forward(mesh, u, 0.1, c)
    from rmhmc_inverse.forward import forward_operator
    A, _ = forward_operator(mesh, u, 0.1)
    rhs = np.zeros(10)
    rhs[-1] = 1.0
    assert np.linalg.norm(A.matvec(sol.w) - rhs) <= 1e-12 * np.linalg.norm(sol.w)
    assert c.total == 1


def test_biot_must_be_positive():
    with pytest.raises(ValueError):
        solve_forward(build_mesh(2), np.zeros(3), 0.0)


def test_observation_interpolation():
    mesh = build_mesh(2)
    sol = solve_forward(mesh, np.array([0.2, -0.4, 1.0]), 0.1)
    assert observe(mesh, sol, [0.0])[0] == sol.w[0]
    assert observe(mesh, sol, [0.5])[0] == sol.w[1]
    assert observe(mesh, sol, [0.25])[0] == pytest.approx(0.5 * (sol.w[0] + sol.w[1]), rel=1e-15)
    assert observe(build_mesh(1), solve_forward(build_mesh(1), np.zeros(2), 0.1), [0.0])[0] \
        == pytest.approx(10.0, rel=1e-14)
    with pytest.raises(ValueError):
        observation_matrix(mesh, [1.5])


def test_misfit_scale_laws():
    mesh = build_mesh(1)
    u = np.zeros(2)
    assert misfit(mesh, u, ObservationSet([0.0], [10.0], 0.3)) == pytest.approx(0.0, abs=1e-20)
    r = 0.7
    obs = ObservationSet([1.0], [11.0 - r], 0.2)
    assert misfit(mesh, u, obs) == pytest.approx(r**2 / (2 * 0.2**2), rel=1e-12)
    assert misfit(mesh, u, ObservationSet([1.0], [11.0 - r], 0.4)) == \
        pytest.approx(misfit(mesh, u, obs) / 4, rel=1e-13)


def test_log_posterior_dense_oracle():
    mesh = build_mesh(1)
    prior = build_prior(mesh, 0.6, 0.1)
    obs = ObservationSet([1.0], [10.3], 0.1)
    u = np.array([0.4, -0.9])
    # two-node system by hand: [[k + 0.1, -k], [-k, k]] w = [0, 1]
    k = (np.exp(u[1]) - np.exp(u[0])) / (u[1] - u[0])
    w = np.linalg.solve([[k + 0.1, -k], [-k, k]], [0.0, 1.0])
    M = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    mu, V = np.array([0.0, 12.0]), None
    import scipy.linalg
    mu, V = scipy.linalg.eigh(np.array([[1.0, -1.0], [-1.0, 1.0]]), M)
    lam = (mu + 1.0) ** -0.3
    P = 0.1 * M @ V @ np.diag(lam**-2) @ V.T @ M
    expected = -0.5 * (w[1] - 10.3) ** 2 / 0.01 - 0.5 * u @ P @ u
    assert log_posterior(mesh, u, obs, prior) == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert log_posterior(mesh, np.zeros(2), ObservationSet([1.0], [11.0], 0.1), prior) == \
        pytest.approx(0.0, abs=1e-20)


@settings(max_examples=40)
@given(arrays(float, 6, elements=st.floats(-4, 4)))
def test_operator_spd_for_random_parameters(u):
    sol = solve_forward(build_mesh(5), u, 0.1)
    assert np.all(np.isfinite(sol.w))


def test_observation_map_is_continuous():
    mesh = build_mesh(8)
    rng = np.random.default_rng(1)
    u = rng.standard_normal(9)
    du = rng.standard_normal(9)
    loc = [0.3, 1.0]
    g0 = observe(mesh, solve_forward(mesh, u), loc)
    ratios = []
    for step in (1e-3, 1e-4, 1e-5):
        g = observe(mesh, solve_forward(mesh, u + step * du), loc)
        ratios.append(np.linalg.norm(g - g0) / step)
    assert max(ratios) / min(ratios) < 1.1

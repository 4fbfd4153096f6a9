import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from einrel.elliptic import (
    CubeGrid,
    DiscreteField,
    assemble_weighted_operator,
    homogenization_error,
    homogenized_matrix,
    negative_sobolev_norm,
    resolvent_residual,
    solve_clock_resolvent,
    solve_corrector,
    solve_dirichlet,
    solve_velocity_resolvent,
)
from einrel.environment import EnvParams, build_environment, constant_environment
from einrel.errors import ConfigError, GridError, SolverError


def test_grid_geometry():
    g = CubeGrid(2, 19, 2)
    assert g.side == 9 and g.h == pytest.approx(0.5)
    assert np.allclose(g.axis, -g.axis[::-1], atol=0)
    assert g.axis[g.origin_index()[0]] == 0.0
    assert g.trapezoid_weights().sum() == pytest.approx(18 ** 2)
    assert g.boundary_mask().sum() == 19 ** 2 - 17 ** 2
    with pytest.raises(GridError):
        CubeGrid(2, 20, 2).origin_index()


def test_for_spacing():
    g = CubeGrid.for_spacing(4, 0.375)
    assert g.h <= 0.375 and g.N % 2 == 1 and g.N == 217


def test_resolution_guard(random_env):
    with pytest.raises(GridError):
        assemble_weighted_operator(random_env, CubeGrid(3, 27, 2), 0.0, 0.0)


def test_stiffness_is_symmetric_and_annihilates_constants(random_env):
    g = CubeGrid(1, 13, 2)
    op = assemble_weighted_operator(random_env, g, 0.3, 0.0)
    K = op.K
    assert abs(K - K.T).max() < 1e-15
    assert np.abs(K @ np.ones(g.n_nodes)).max() < 1e-13
    v = np.random.default_rng(0).standard_normal(g.n_nodes)
    assert v @ (K @ v) > 0


def test_quadratic_manufactured_solution(unit_env):
    # -1/2 Laplacian of |x|^2 is -d, reproduced exactly by the stencil
    g = CubeGrid(2, 37, 2)
    op = assemble_weighted_operator(unit_env, g, 0.0, 0.0)
    x = g.coords()
    u = (x ** 2).sum(-1)
    sol, rep = solve_dirichlet(op, DiscreteField(g, u), DiscreteField(g, np.full(g.shape, -2.0)), 1e-11)
    assert np.abs(sol.values - u).max() < 1e-8
    assert rep.converged and rep.relative_residual <= 1e-11


def test_tilted_exponential_is_harmonic(unit_env):
    # e^{-2 lam x1} has zero weighted flux, also for the discrete operator
    lam = 0.2
    g = CubeGrid(2, 19, 2)
    op = assemble_weighted_operator(unit_env, g, lam, 0.0)
    u = np.exp(-2 * lam * g.coords()[..., 0])
    assert np.abs(op.apply(u)).max() < 1e-12
    sol, _ = solve_dirichlet(op, DiscreteField(g, u), DiscreteField(g, np.zeros(g.shape)), 1e-12)
    assert np.abs(sol.values - u).max() < 1e-9


def test_operator_symmetric_in_weighted_inner_product(random_env):
    g = CubeGrid(1, 13, 2)
    op = assemble_weighted_operator(random_env, g, 0.5, 0.1)
    rng = np.random.default_rng(1)
    f, h = rng.standard_normal((2,) + g.shape)
    f[g.boundary_mask()] = 0
    h[g.boundary_mask()] = 0
    assert op.inner(op.apply(f), h) == pytest.approx(op.inner(f, op.apply(h)), rel=1e-12)


def test_preconditioners_agree(random_env):
    g = CubeGrid(2, 37, 2)
    w1, r1 = solve_corrector(random_env, g, [1.0, 0.0], 1e-10, "amg")
    w2, r2 = solve_corrector(random_env, g, [1.0, 0.0], 1e-10, "jacobi")
    assert np.abs(w1.values - w2.values).max() < 1e-7
    assert r1.iterations < r2.iterations


def test_solver_failure_carries_history(random_env):
    g = CubeGrid(2, 37, 2)
    op = assemble_weighted_operator(random_env, g, 0.0, 0.0)
    affine = DiscreteField(g, g.coords()[..., 0])
    with pytest.raises(SolverError) as e:
        solve_dirichlet(op, affine, DiscreteField(g, np.zeros(g.shape)), 1e-12, "jacobi", maxiter=3)
    assert len(e.value.residual_history) == 3


def test_unknown_preconditioner(unit_env):
    g = CubeGrid(1, 9, 2)
    with pytest.raises(ConfigError):
        solve_corrector(unit_env, g, [1, 0], preconditioner="ilu")


@settings(max_examples=10, deadline=None)
@given(st.floats(0.3, 3.0), st.floats(-0.5, 0.5))
def test_constant_field_homogenizes_to_itself(c, v):
    env = constant_environment(c, v)
    g = CubeGrid(1, 11, 2)
    res = homogenized_matrix(env, g, 1e-11, compare_coarser=False)
    assert np.allclose(res.matrix, c * math.exp(-2 * v) * np.eye(2), atol=1e-9)


def test_constant_corrector_is_affine():
    env = constant_environment(2.0, 0.0)
    g = CubeGrid(2, 19, 2)
    w, _ = solve_corrector(env, g, [0.3, -1.2], 1e-12)
    assert np.abs(w.values - g.coords() @ np.array([0.3, -1.2])).max() < 1e-10


def test_random_homogenized_matrix(random_env):
    g = CubeGrid.for_spacing(3, 0.375)
    res = homogenized_matrix(random_env, g)
    a = res.matrix
    assert res.asymmetry < 1e-7
    eig = np.linalg.eigvalsh(0.5 * (a + a.T))
    assert np.all(eig > 1 / 4) and np.all(eig < 4)
    assert res.level_difference is not None and res.level_difference < 0.1


def test_laminate_small_grid():
    p = EnvParams(field_kind="laminate", lam_a1=0.5, lam_b1=0.5, lam_period=1.0,
                 lambda_ellipticity=6.0)
    env = build_environment(p)
    # the Dirichlet boundary layer costs about 0.05 period / side
    g = CubeGrid(2, 289, 2)
    a = homogenized_matrix(env, g, 1e-10, compare_coarser=False).matrix
    s = np.linspace(0, 1, 200001)[:-1]
    alpha = np.exp(0.5 * np.sin(2 * np.pi * s))
    beta = 1 + 0.5 * np.cos(2 * np.pi * s)
    assert a[0, 0] == pytest.approx(1 / np.mean(1 / alpha), rel=0.01)
    assert a[1, 1] == pytest.approx(np.mean(beta), rel=0.01)
    assert abs(a[0, 1]) < 1e-8


def test_constant_resolvents_are_exact():
    c, v = 1.5, 0.2
    env = constant_environment(c, v)
    w = math.exp(-2 * v)
    a_bar = c * w * np.eye(2)
    m, h, rho = 2, 1, 1.0
    g = CubeGrid.for_spacing(m + h, 0.75)
    u, reps = solve_velocity_resolvent(env, g, m, h, rho, a_bar)
    assert np.abs(u.values - 3 ** m * a_bar[:, 0]).max() < 1e-9 * 3 ** m
    assert np.abs(homogenization_error(u, a_bar, m)).max() < 1e-9
    q, _ = solve_clock_resolvent(env, g, m, h, rho, w)
    assert np.abs(q.values).max() < 1e-12
    assert resolvent_residual(env, u, m, h, rho) < 1e-8


def test_random_resolvent_residual(random_env):
    m, h, rho = 2, 1, 1.0
    g = CubeGrid.for_spacing(m + h, 0.375)
    u, reps = solve_velocity_resolvent(random_env, g, m, h, rho, np.eye(2), tol=1e-11)
    assert resolvent_residual(random_env, u, m, h, rho) < 1e-9
    with pytest.raises(GridError):
        solve_velocity_resolvent(random_env, CubeGrid.for_spacing(2, 0.375), m, h, rho, np.eye(2))


def test_overflow_guard(unit_env):
    with pytest.raises(ConfigError, match="overflow"):
        assemble_weighted_operator(unit_env, CubeGrid(4, 9, 2), 1.0, 0.0)


@pytest.mark.parametrize("k", [1, 3, 6])
def test_negative_norm_of_cosine_mode(k):
    g = CubeGrid(2, 41, 2)
    s1 = (g.coords()[..., 0] - g.axis[0]) / g.side
    f = DiscreteField(g, np.cos(np.pi * k * s1))
    s = 1 / 6
    expect = 3 ** (s * 2) * (1 + np.pi ** 2 * k ** 2) ** (-s / 2) / math.sqrt(2)
    assert negative_sobolev_norm(f, s) == pytest.approx(expect, rel=1e-12)


def test_negative_norm_constant_and_monotone():
    g = CubeGrid(1, 21, 2)
    f = DiscreteField(g, np.full(g.shape, 2.0))
    assert negative_sobolev_norm(f, 0.25) == pytest.approx(3 ** 0.25 * 2.0, rel=1e-13)
    rng = np.random.default_rng(0)
    r = DiscreteField(g, rng.standard_normal(g.shape))
    assert negative_sobolev_norm(r, 0.5) < negative_sobolev_norm(r, 0.1) * 3 ** 0.4


def test_field_io_round_trip(tmp_path):
    g = CubeGrid(1, 9, 2)
    vals = np.random.default_rng(2).standard_normal(g.shape + (2,))
    f = DiscreteField(g, vals)
    f.to_csv(tmp_path / "f.csv")
    f.to_binary(tmp_path / "f.npz")
    a = DiscreteField.from_csv(tmp_path / "f.csv")
    b = DiscreteField.from_binary(tmp_path / "f.npz")
    assert np.array_equal(a.values, vals) and np.array_equal(b.values, vals)
    assert a.kind == "vector" and a.grid == g

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from einrel.diffusion import (
    PathSample,
    SimParams,
    _simulate_python,
    diffusion_root,
    estimate_diffusivity_mc,
    estimate_velocity_direct,
    invert_time_change,
    ito_drift,
    path_rng,
    simulate_endpoints,
    simulate_path,
    spd_sqrt,
)
from einrel.environment import CoefficientField, FieldSample, constant_environment
from einrel.errors import ConfigError, DataError


def test_ito_drift_constant_field():
    env = constant_environment(2.0, 0.25)
    b = ito_drift(env, 0.3, np.array([1.0, -2.0]))
    assert np.allclose(b, [0.3 * 2.0 * math.exp(-0.5), 0.0], atol=1e-15)


def test_ito_drift_matches_finite_difference_divergence(random_env):
    x = np.array([0.7, -1.3])
    eps = 1e-6
    div = np.zeros(2)
    for i in range(2):
        e = np.eye(2)[i] * eps
        div += (random_env.a_tilde(x + e)[i] - random_env.a_tilde(x - e)[i]) / (2 * eps)
    lam = 0.2
    expect = 0.5 * div + lam * random_env.a_tilde(x)[:, 0]
    assert np.allclose(ito_drift(random_env, lam, x), expect, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_diffusion_root_squares_to_tilted_matrix(x1, x2):
    from einrel.environment import EnvParams, build_environment

    env = build_environment(EnvParams(seed=2))
    x = np.array([x1, x2])
    r = diffusion_root(env, x)
    assert np.allclose(r, r.T, atol=0)
    assert np.allclose(r @ r, env.a_tilde(x), rtol=1e-12, atol=1e-14)
    assert np.all(np.linalg.eigvalsh(r) > 0)


def test_spd_sqrt_three_dimensional():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((3, 3))
    m = q @ q.T + np.eye(3)
    r = spd_sqrt(m)
    assert np.allclose(r @ r, m)


def test_dt_guard():
    with pytest.raises(ConfigError, match="dt"):
        SimParams(lam=0.5, dt=0.02)
    with pytest.raises(ConfigError):
        SimParams(lam=1.5)


def test_path_is_reproducible(random_env):
    p = SimParams(lam=0.2, dt=0.01, horizon=5.0, n_paths=1, sim_seed=3)
    a = simulate_path(random_env, p, path_id=4)
    b = simulate_path(random_env, p, path_id=4)
    c = simulate_path(random_env, p, path_id=5)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.clock, b.clock)
    assert not np.array_equal(a.positions, c.positions)


def test_streams_are_independent_per_path():
    a = path_rng(1, 0).standard_normal(10000)
    b = path_rng(1, 1).standard_normal(10000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / 100


def test_constant_field_path_is_drifted_brownian_motion():
    # with a = cI, V = v: Y = lam c w t e1 + sqrt(c w) W, A(s) = w s
    c, v, lam = 2.0, 0.1, 0.3
    w = math.exp(-2 * v)
    env = constant_environment(c, v)
    p = SimParams(lam=lam, dt=0.01, horizon=1.0, sim_seed=9)
    path = simulate_path(env, p, path_id=2)
    noise = path_rng(9, 2).standard_normal((p.n_steps, 2))
    expect = np.cumsum(lam * c * w * p.dt * np.eye(2)[0] + math.sqrt(c * w * p.dt) * noise, axis=0)
    assert np.allclose(path.positions[1:], expect, atol=1e-12)
    assert np.allclose(path.clock, w * path.times, atol=1e-13)


class _Python(CoefficientField):
    """The default field evaluated through the generic sample interface only."""

    def __init__(self, env):
        self.env = env
        self.d = env.d
        self.r0 = env.r0
        self.lambda_ellipticity = env.lambda_ellipticity
        self.lambda_tilde = env.lambda_tilde

    def sample(self, x):
        return self.env.sample(x)


def test_python_stepper_matches_compiled(random_env):
    p = SimParams(lam=0.2, dt=0.01, horizon=2.0, sim_seed=1)
    fast = simulate_path(random_env, p)
    slow = simulate_path(_Python(random_env), p)
    assert np.allclose(fast.positions, slow.positions, atol=1e-11)
    assert np.allclose(fast.clock, slow.clock, atol=1e-11)


def test_absorbing_cube_truncates_at_first_exit(unit_env):
    p = SimParams(lam=0.0, dt=0.01, horizon=200.0, sim_seed=0, cube_level=1)
    path = simulate_path(unit_env, p)
    assert path.exit_index == len(path.clock) - 1
    assert np.abs(path.positions[-1]).max() >= 1.5
    assert np.abs(path.positions[:-1]).max(axis=1).max() < 1.5


def test_clock_sandwich(random_env):
    p = SimParams(lam=0.1, dt=0.01, horizon=50.0, sim_seed=4)
    path = simulate_path(random_env, p)
    ratio = path.clock[1:] / path.times[1:]
    L = random_env.lambda_ellipticity
    assert np.all((1 / L <= ratio) & (ratio <= L))
    assert np.all(np.diff(path.clock) > 0)


def test_time_change_round_trip(random_env):
    p = SimParams(lam=0.1, dt=0.01, horizon=20.0, sim_seed=4)
    y = simulate_path(random_env, p)
    x = invert_time_change(y)
    back = invert_time_change(x)
    assert np.array_equal(back.positions, y.positions)
    assert np.allclose(back.times, y.times, atol=0) and np.allclose(back.clock, y.clock, atol=0)
    # X(A(s)) = Y(s) at nodes and between them up to interpolation
    s = np.array([0.005, 3.337, 17.9])
    t = np.interp(s, y.times, y.clock)
    assert np.allclose(x.at(t), y.at(s), atol=1e-10)


def test_resampled_inversion_grid(random_env):
    p = SimParams(lam=0.1, dt=0.01, horizon=5.0, sim_seed=4)
    y = simulate_path(random_env, p)
    x = invert_time_change(y, resample=True)
    assert np.allclose(np.diff(x.times), p.dt)
    assert np.allclose(x.positions[0], 0.0)
    with pytest.raises(DataError):
        x.at(1e9)


def test_inversion_rejects_bad_clock():
    path = PathSample(0.1, np.zeros((3, 2)), np.array([0.0, 0.2, 0.1]), 0)
    with pytest.raises(DataError):
        invert_time_change(path)


def test_endpoints_match_full_paths(random_env):
    p = SimParams(lam=0.2, dt=0.01, horizon=3.0, n_paths=3, sim_seed=8)
    y, a = simulate_endpoints(random_env, p)
    for i in range(3):
        path = simulate_path(random_env, p, path_id=i)
        assert np.allclose(y[i], path.positions[-1], atol=1e-12)
        assert a[i] == pytest.approx(path.clock[-1], abs=1e-12)


def test_direct_velocity_constant_field():
    c, v, lam = 2.0, 0.2, 0.3
    env = constant_environment(c, v)
    p = SimParams(lam=lam, dt=0.01, horizon=10 / lam ** 2, n_paths=200, sim_seed=1)
    est, se = estimate_velocity_direct(env, p)
    expect = lam * c * math.exp(-2 * v)
    assert abs(est[0] - expect) <= 3 * se[0]
    assert abs(est[1]) <= 3 * se[1]


def test_direct_velocity_needs_long_horizon(unit_env):
    with pytest.raises(ConfigError):
        estimate_velocity_direct(unit_env, SimParams(lam=0.1, horizon=100.0))


def test_diffusivity_constant_field():
    # X has generator (c/2) Laplacian whatever the constant potential
    env = constant_environment(2.0, 0.3)
    cov, se = estimate_diffusivity_mc(env, SimParams(lam=0.0, dt=0.01, horizon=5.0, n_paths=800, sim_seed=2))
    assert abs(cov[0, 0] - 2.0) <= 3 * se[0, 0] and abs(cov[1, 1] - 2.0) <= 3 * se[1, 1]
    assert abs(cov[0, 1]) <= 3 * se[0, 1]

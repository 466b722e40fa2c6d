import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hloba.dynamics import (ConfigurationError, IntegrationBlowup, ModelConfig, ResourceError,
                            advance, forecast, forecast_gradient, nature_run, rk4_step,
                            spin_up, tendency)
from hloba.checks import central_difference, relative_error

L96 = ModelConfig()
LINEAR = ModelConfig(forcing=0.0, advection=0.0)


def naive_tendency(x, F):
    n = len(x)
    return np.array([(x[(i + 1) % n] - x[(i - 2) % n]) * x[(i - 1) % n] - x[i] + F
                     for i in range(n)])


def naive_rk4(x, F, dt):
    k1 = naive_tendency(x, F)
    k2 = naive_tendency(x + 0.5 * dt * k1, F)
    k3 = naive_tendency(x + 0.5 * dt * k2, F)
    k4 = naive_tendency(x + dt * k3, F)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def test_tendency_zero_state_is_forcing():
    np.testing.assert_array_equal(tendency(np.zeros(4), ModelConfig(n_x=4)), [8, 8, 8, 8])


def test_tendency_constant_state():
    np.testing.assert_array_equal(tendency(np.ones(4), ModelConfig(n_x=4)), [7, 7, 7, 7])


def test_tendency_matches_straight_line_formula():
    x = np.array([1.0, 2, 3, 4, 5])
    # hand-evaluated: i=0: (x1 - x3) x4 - x0 + 8 = (2-4)*5 - 1 + 8 = -3, etc.
    expected = np.array([(2 - 4) * 5 - 1 + 8, (3 - 5) * 1 - 2 + 8, (4 - 1) * 2 - 3 + 8,
                         (5 - 2) * 3 - 4 + 8, (1 - 3) * 4 - 5 + 8], dtype=float)
    np.testing.assert_array_equal(tendency(x, ModelConfig(n_x=5)), expected)
    np.testing.assert_array_equal(naive_tendency(x, 8.0), expected)


def test_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        tendency(np.zeros(5), ModelConfig(n_x=4))


@pytest.mark.parametrize("kwargs", [{"n_x": 3}, {"dt": 0.0}, {"steps_per_da_interval": 0}])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigurationError):
        ModelConfig(**kwargs)


def test_rk4_fixed_point_at_zero_forcing():
    np.testing.assert_array_equal(rk4_step(np.zeros(40), ModelConfig(forcing=0.0)), np.zeros(40))


def test_rk4_matches_naive_oracle(rng):
    x = spin_up(L96, rng, 300)
    np.testing.assert_allclose(rk4_step(x, L96), naive_rk4(x, 8.0, 0.05), rtol=1e-12)


def test_rk4_consistency_order(rng):
    x = rng.standard_normal(40)
    errs = []
    for dt in (1e-2, 5e-3):
        cfg = ModelConfig(dt=dt)
        errs.append(np.linalg.norm(rk4_step(x, cfg) - (x + dt * tendency(x, cfg))))
    # halving dt divides an O(dt^2) remainder by about four
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_global_error_fourth_order():
    # the linear system dx/dt = -x has exact solution x0 * exp(-t)
    x0 = np.linspace(-1, 1, 40)
    horizon = 1.0
    errs = []
    for dt in (0.1, 0.05, 0.025):
        cfg = ModelConfig(forcing=0.0, advection=0.0, dt=dt)
        x = advance(x0, int(round(horizon / dt)), cfg)
        errs.append(np.max(np.abs(x - x0 * np.exp(-horizon))))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 4.0) < 0.2)


def test_blowup_detected():
    with pytest.raises(IntegrationBlowup) as e:
        advance(np.full(40, 1e5) * (-1) ** np.arange(40), 50, L96)
    assert e.value.step >= 1


def test_forecast_zero_steps_identity(rng):
    x = rng.standard_normal(40)
    traj = forecast(x, 0, L96)
    assert len(traj) == 1
    np.testing.assert_array_equal(traj.states[0], x)


def test_forecast_semigroup(rng):
    x = spin_up(L96, rng, 100)
    a = advance(advance(x, 7, L96), 5, L96)
    np.testing.assert_array_equal(a, advance(x, 12, L96))


def test_forecast_equals_repeated_steps(rng):
    x = spin_up(L96, rng, 100)
    y = x
    for _ in range(6):
        y = rk4_step(y, L96)
    np.testing.assert_array_equal(forecast(x, 6, L96).last, y)


def test_forecast_is_deterministic(rng):
    x = spin_up(L96, rng, 100)
    np.testing.assert_array_equal(forecast(x, 30, L96).states, forecast(x, 30, L96).states)


def test_chaotic_separation(rng):
    x = spin_up(L96, rng, 500)
    y = x.copy()
    y[0] += 1e-8
    sep = np.linalg.norm(advance(x, 200, L96) - advance(y, 200, L96))
    assert sep > 1e-5


def test_batched_forecast_matches_members(rng):
    X = np.array([spin_up(L96, rng, 100) for _ in range(3)])
    batched = advance(X, 9, L96)
    for k in range(3):
        np.testing.assert_array_equal(batched[k], advance(X[k], 9, L96))


def test_gradient_zero_steps_is_identity(rng):
    g = rng.standard_normal(40)
    np.testing.assert_array_equal(forecast_gradient(rng.standard_normal(40), 0, g, L96), g)


def test_gradient_linear_system_matches_propagator(rng):
    # for dx/dt = -x one RK4 step multiplies by the scalar amplification factor
    dt = LINEAR.dt
    amp = 1 - dt + dt ** 2 / 2 - dt ** 3 / 6 + dt ** 4 / 24
    g = rng.standard_normal(40)
    out = forecast_gradient(np.zeros(40), 10, g, LINEAR)
    np.testing.assert_allclose(out, amp ** 10 * g, rtol=1e-13)


def test_gradient_matches_explicit_jacobian_at_rest(rng):
    # at F=0 and x=0 the tendency Jacobian is -I even with advection switched on
    cfg = ModelConfig(forcing=0.0)
    g = rng.standard_normal(40)
    J = np.column_stack([central_difference(lambda v, i=i: advance(v, 4, cfg)[i], np.zeros(40))
                         for i in range(40)]).T
    np.testing.assert_allclose(forecast_gradient(np.zeros(40), 4, g, cfg), J.T @ g, atol=1e-9)


@pytest.mark.parametrize("n_steps", [1, 5, 10, 20])
def test_gradient_matches_finite_differences(rng, n_steps):
    x = spin_up(L96, rng, 200)
    w = rng.standard_normal(40)

    def cost(v):
        return float(w @ advance(v, n_steps, L96))

    g = forecast_gradient(x, n_steps, w, L96)
    assert relative_error(g, central_difference(cost, x, 1e-5)) <= 1e-5


def test_reverse_storage_cap():
    with pytest.raises(ResourceError):
        forecast_gradient(np.zeros(40), 10_001, np.zeros(40), L96)


def test_nature_run_shape_and_spacing(rng):
    x0 = spin_up(L96, rng, 100)
    run = nature_run(x0, 5, L96)
    assert run.shape == (6, 40)
    np.testing.assert_array_equal(run[3], advance(x0, 6, L96))


@given(arrays(float, 8, elements=st.floats(-5, 5)), st.floats(-10, 10))
def test_tendency_property_matches_naive(x, F):
    np.testing.assert_allclose(tendency(x, ModelConfig(n_x=8, forcing=F)),
                               naive_tendency(x, F), rtol=1e-12, atol=1e-12)


@given(arrays(float, 6, elements=st.floats(-3, 3)), arrays(float, 6, elements=st.floats(-3, 3)))
def test_adjoint_identity(x, lam):
    # <J dx, lam> = <dx, J^T lam> for the pulled-back gradient of a linear functional
    cfg = ModelConfig(n_x=6)
    dx = np.linspace(-1, 1, 6)
    h = 1e-6
    jdx = (advance(x + h * dx, 3, cfg) - advance(x - h * dx, 3, cfg)) / (2 * h)
    lhs = float(jdx @ lam)
    rhs = float(dx @ forecast_gradient(x, 3, lam, cfg))
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))

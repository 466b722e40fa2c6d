"""Lorenz-96 forecast model with a fixed-step RK4 integrator and its adjoint.

States are plain float arrays whose last axis is the grid (length ``n_x``);
leading axes are treated as a batch, so ensembles advance in one call.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numba
import numpy as np

BLOWUP_THRESHOLD = 1e6
MAX_STORED_STEPS = 10_000


class ConfigurationError(ValueError):
    pass


class IntegrationBlowup(FloatingPointError):
    def __init__(self, step, max_abs):
        super().__init__(f"integration blew up at step {step}: max |x| = {max_abs:.3g}")
        self.step = step
        self.max_abs = max_abs


class ResourceError(MemoryError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_x: int = 40
    forcing: float = 8.0
    dt: float = 0.05
    steps_per_da_interval: int = 2
    # scales the quadratic advection term; 0 leaves the linear system dx/dt = -x + F
    advection: float = 1.0

    def __post_init__(self):
        if self.n_x < 4:
            raise ConfigurationError("Lorenz-96 needs n_x >= 4")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.steps_per_da_interval < 1:
            raise ConfigurationError("steps_per_da_interval must be >= 1")

    def with_forcing(self, forcing: float) -> "ModelConfig":
        return replace(self, forcing=float(forcing))


@dataclass
class Trajectory:
    """States ``(n_steps + 1, ..., n_x)``; ``stages`` is kept only when the
    trajectory will be differentiated."""

    states: np.ndarray
    start_time: int
    dt: float
    stages: list | None = None

    def __len__(self):
        return len(self.states)

    @property
    def last(self) -> np.ndarray:
        return self.states[-1]


@lru_cache(maxsize=None)
def _shifts(n):
    i = np.arange(n)
    # index arrays for x_{i+1}, x_{i-1}, x_{i-2}, x_{i+2} on the cyclic grid
    return (i + 1) % n, (i - 1) % n, (i - 2) % n, (i + 2) % n


def _check(state, config):
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != config.n_x:
        raise ConfigurationError(
            f"state has {state.shape[-1]} grid points, config expects {config.n_x}")
    return state


def _rhs(x, forcing, n, adv=1.0):
    ip1, im1, im2, _ = _shifts(n)
    return adv * (x[..., ip1] - x[..., im2]) * x[..., im1] - x + forcing


def _rhs_vjp(x, lam, n, adv=1.0):
    # transpose of the tendency Jacobian at x applied to lam
    ip1, im1, im2, ip2 = _shifts(n)
    return adv * (lam[..., im1] * x[..., im2]
                  - lam[..., ip2] * x[..., ip1]
                  + lam[..., ip1] * (x[..., ip2] - x[..., im1])) - lam


# Compiled kernels. They work on (batch, n) arrays and mirror _rhs/_rhs_vjp;
# the numpy versions above stay as the readable reference.

@numba.njit(cache=True, inline="always")
def _f(x, out, F, adv):
    n = x.shape[0]
    for i in range(n):
        out[i] = adv * (x[(i + 1) % n] - x[(i - 2) % n]) * x[(i - 1) % n] - x[i] + F


@numba.njit(cache=True, inline="always")
def _fT(x, lam, out, adv):
    n = x.shape[0]
    for j in range(n):
        out[j] += adv * (lam[(j - 1) % n] * x[(j - 2) % n]
                         - lam[(j + 2) % n] * x[(j + 1) % n]
                         + lam[(j + 1) % n] * (x[(j + 2) % n] - x[(j - 1) % n])) - lam[j]


@numba.njit(cache=True)
def _integrate(x0, F, adv, dt, n_steps, states, stages, keep, limit):
    """Advance every row of x0; returns the 1-based step that blew up, or 0."""
    B, n = x0.shape
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    s = np.empty(n)
    for b in range(B):
        x = x0[b].copy()
        states[0, b] = x
        for k in range(n_steps):
            if keep:
                stages[k, 0, b] = x
            _f(x, k1, F, adv)
            for i in range(n):
                s[i] = x[i] + 0.5 * dt * k1[i]
            if keep:
                stages[k, 1, b] = s
            _f(s, k2, F, adv)
            for i in range(n):
                s[i] = x[i] + 0.5 * dt * k2[i]
            if keep:
                stages[k, 2, b] = s
            _f(s, k3, F, adv)
            for i in range(n):
                s[i] = x[i] + dt * k3[i]
            if keep:
                stages[k, 3, b] = s
            _f(s, k4, F, adv)
            bad = False
            for i in range(n):
                x[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                if not abs(x[i]) <= limit:
                    bad = True
            if bad:
                return k + 1
            states[k + 1, b] = x
    return 0


@numba.njit(cache=True)
def _adjoint(stages, cot, dt, adv):
    n_steps = stages.shape[0]
    B, n = cot.shape[1], cot.shape[2]
    out = np.empty((B, n))
    a = np.empty(n)
    g = np.empty(n)
    for b in range(B):
        lam = cot[n_steps, b].copy()
        for k in range(n_steps - 1, -1, -1):
            acc = lam.copy()
            # k4 = f(s4)
            for i in range(n):
                g[i] = dt / 6.0 * lam[i]
            a[:] = 0.0
            _fT(stages[k, 3, b], g, a, adv)
            for i in range(n):
                acc[i] += a[i]
                g[i] = dt / 3.0 * lam[i] + dt * a[i]
            a[:] = 0.0
            _fT(stages[k, 2, b], g, a, adv)
            for i in range(n):
                acc[i] += a[i]
                g[i] = dt / 3.0 * lam[i] + 0.5 * dt * a[i]
            a[:] = 0.0
            _fT(stages[k, 1, b], g, a, adv)
            for i in range(n):
                acc[i] += a[i]
                g[i] = dt / 6.0 * lam[i] + 0.5 * dt * a[i]
            a[:] = 0.0
            _fT(stages[k, 0, b], g, a, adv)
            for i in range(n):
                lam[i] = acc[i] + a[i] + cot[k, b, i]
        out[b] = lam
    return out


def tendency(state, config: ModelConfig) -> np.ndarray:
    """dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F with cyclic indices."""
    x = _check(state, config)
    return _rhs(x, config.forcing, config.n_x, config.advection)


def _run(x, n_steps, config, keep):
    x2 = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    B, n = x2.shape
    states = np.empty((n_steps + 1, B, n))
    stages = np.empty((n_steps if keep else 0, 4, B, n))
    bad = _integrate(x2, float(config.forcing), float(config.advection), float(config.dt), n_steps,
                     states, stages, keep, BLOWUP_THRESHOLD)
    if bad:
        raise IntegrationBlowup(bad, float(np.max(np.abs(states[bad - 1]))))
    shape = (n_steps + 1,) + x.shape
    return states.reshape(shape), stages


def rk4_step(state, config: ModelConfig) -> np.ndarray:
    x = _check(state, config)
    return _run(x, 1, config, False)[0][1]


def forecast(state, n_steps: int, config: ModelConfig, start_time: int = 0,
             keep_stages: bool = False) -> Trajectory:
    """Integrate ``n_steps`` RK4 steps; the trajectory includes the initial state."""
    if n_steps < 0:
        raise ConfigurationError("n_steps must be >= 0")
    if keep_stages and n_steps > MAX_STORED_STEPS:
        raise ResourceError(
            f"{n_steps} steps exceeds the reverse-storage cap of {MAX_STORED_STEPS}")
    x = _check(state, config)
    states, stages = _run(x, n_steps, config, keep_stages)
    return Trajectory(states, start_time, config.dt, stages if keep_stages else None)


def advance(state, n_steps: int, config: ModelConfig) -> np.ndarray:
    """Final state after ``n_steps`` steps."""
    x = _check(state, config)
    if n_steps == 0:
        return x.copy()
    return _run(x, n_steps, config, False)[0][-1]


def trajectory_gradient(traj: Trajectory, cotangents, config: ModelConfig) -> np.ndarray:
    """Reverse accumulation through every RK4 stage of ``traj``.

    ``cotangents[k]`` is d(cost)/d(states[k]); rows may be zero. Returns
    d(cost)/d(states[0]).
    """
    if traj.stages is None:
        raise ValueError("trajectory was integrated without keep_stages=True")
    cot = np.asarray(cotangents, dtype=float)
    if cot.shape != traj.states.shape:
        raise ConfigurationError("cotangents must match the trajectory shape")
    n = cot.shape[-1]
    c3 = np.ascontiguousarray(cot.reshape(cot.shape[0], -1, n))
    out = _adjoint(traj.stages, c3, float(config.dt), float(config.advection))
    return out.reshape(cot.shape[1:])


def forecast_gradient(state, n_steps: int, cost_grad_at_end, config: ModelConfig) -> np.ndarray:
    """Pull back d(cost)/d(x_end) to d(cost)/d(x_0) through ``n_steps`` steps."""
    traj = forecast(state, n_steps, config, keep_stages=True)
    cot = np.zeros_like(traj.states)
    cot[-1] = cost_grad_at_end
    return trajectory_gradient(traj, cot, config)


def spin_up(config: ModelConfig, rng: np.random.Generator, n_steps: int = 2000) -> np.ndarray:
    """A state on the attractor, reached from a perturbed rest state."""
    x0 = config.forcing + rng.standard_normal(config.n_x)
    return advance(x0, n_steps, config)


def nature_run(x0, n_intervals: int, config: ModelConfig) -> np.ndarray:
    """States at every DA interval, ``(n_intervals + 1, n_x)``."""
    out = np.empty((n_intervals + 1, config.n_x))
    out[0] = x = _check(x0, config)
    for k in range(n_intervals):
        x = advance(x, config.steps_per_da_interval, config)
        out[k + 1] = x
    return out

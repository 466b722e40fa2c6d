"""Analysis step for every method in the comparison.

The latent BLUE update works per dimension and needs no iteration. The
variational methods build a cost function, get its gradient from the tape
(latent and observation terms) and the model adjoint (window terms), and
hand it to Adam or L-BFGS.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import latent
from .covariance import DiagonalCovariance, FullCovariance
from .diffcore import ContractError
from .dynamics import ModelConfig, advance, forecast, trajectory_gradient
from .observations import ObservationSet

METHODS = ("hloba", "h3dvar", "h4dvar", "hl3dvar", "hl4dvar")


@dataclass(frozen=True)
class SolverSettings:
    optimizer: str = "adam"  # "adam" or "lbfgs"
    learning_rate: float = 0.05
    max_iters: int = 500
    patience: int = 20
    min_improvement: float = 1e-8
    schedule: str = "cosine"
    tolerance: float = 1e-8  # L-BFGS stops at this fraction of the starting gradient norm

    def __post_init__(self):
        if self.optimizer not in ("adam", "lbfgs"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.max_iters < 0 or self.learning_rate < 0:
            raise ContractError("max_iters and learning_rate must be nonnegative")


LATENT_ADAM = SolverSettings(learning_rate=0.05)
MODEL_ADAM = SolverSettings(learning_rate=0.02)
CONVEX_LBFGS = SolverSettings(optimizer="lbfgs", max_iters=200)


@dataclass
class AnalysisResult:
    method: str
    x_a: np.ndarray
    z_a: np.ndarray | None = None
    latent_variance: DiagonalCovariance | None = None
    model_variance: np.ndarray | None = None
    iterations: int = 0
    grad_norm: float = math.nan
    initial_cost: float = math.nan
    final_cost: float = math.nan
    flags: tuple = ()
    # analysis at every window slot, first slot first
    trajectory: np.ndarray | None = None
    x_b: np.ndarray | None = None
    z_b: np.ndarray | None = None
    z_o: np.ndarray | None = None
    Bz: DiagonalCovariance | None = None
    Rz: DiagonalCovariance | None = None
    slots: list = field(default_factory=list)


@dataclass
class DAProblem:
    """Everything one analysis needs.

    ``observations`` holds one set per window slot; the window length is
    ``len(observations) - 1`` intervals. Model-space methods use ``x_b``/``B``,
    latent ones ``z_b``/``Bz`` (``z_b`` defaults to ``E(x_b)``) and, for the
    BLUE update, ``Rz``. Observation errors come from each set's network.
    """

    observations: list
    model: ModelConfig
    x_b: np.ndarray | None = None
    z_b: np.ndarray | None = None
    B: FullCovariance | None = None
    Bz: DiagonalCovariance | None = None
    Rz: DiagonalCovariance | None = None
    ae: latent.AutoencoderModel | None = None
    o2l: latent.O2LModel | None = None
    settings: SolverSettings | None = None

    @property
    def window(self) -> int:
        return len(self.observations) - 1

    def background_latent(self) -> np.ndarray:
        if self.z_b is not None:
            return np.asarray(self.z_b, dtype=float)
        if self.ae is None or self.x_b is None:
            raise ContractError("latent background needs z_b or (ae, x_b)")
        return latent.encode(self.ae, self.x_b)


def _variances(c, name):
    v = c.variances if isinstance(c, DiagonalCovariance) else np.asarray(c, dtype=float)
    if np.any(~(v > 0)):
        raise ContractError(f"{name} variances must be positive")
    return v


# ------------------------------------------------------------ latent BLUE

def hloba_update(z_b, z_o, Bz, Rz):
    """Per-dimension BLUE: returns ``(z_a, diag A_z)`` as an array and a covariance."""
    b = _variances(Bz, "B_z")
    r = _variances(Rz, "R_z")
    z_b = np.asarray(z_b, dtype=float)
    z_o = np.asarray(z_o, dtype=float)
    if not (z_b.shape == z_o.shape == b.shape == r.shape):
        raise ContractError("z_b, z_o, B_z and R_z must have equal lengths")
    gain = b / (b + r)
    z_a = z_b + gain * (z_o - z_b)
    return z_a, DiagonalCovariance(b * r / (b + r))


def propagate_uncertainty(decoder, z_a, z_b, diag_Az) -> np.ndarray:
    """Model-space analysis variance from a signed latent perturbation.

    The perturbation has magnitude ``sqrt(diag_Az)`` and the sign of the
    increment ``z_a - z_b`` (zero counts as positive); the result is the
    squared half-difference of the decoded plus/minus states.
    """
    dec = (lambda z: latent.decode(decoder, z)) if isinstance(decoder, latent.AutoencoderModel) else decoder
    v = diag_Az.variances if isinstance(diag_Az, DiagonalCovariance) else np.asarray(diag_Az, dtype=float)
    z_a = np.asarray(z_a, dtype=float)
    s = np.where(z_a - np.asarray(z_b, dtype=float) >= 0, 1.0, -1.0)
    p = np.sqrt(v) * s
    half = 0.5 * (dec(z_a + p) - dec(z_a - p))
    return half * half


def hloba_analysis(problem: DAProblem) -> AnalysisResult:
    """Single-slot update using the first observation set."""
    ae, o2l = problem.ae, problem.o2l
    if ae is None or o2l is None:
        raise ContractError("HLOBA needs both the autoencoder and the O2L network")
    if o2l.ae_fingerprint != ae.fingerprint():
        raise ContractError("O2L network was trained against a different autoencoder")
    z_b = problem.background_latent()
    z_o = latent.o2l_forward(o2l, problem.observations[0])
    z_a, Az = hloba_update(z_b, z_o, problem.Bz, problem.Rz)
    x_a = latent.decode(ae, z_a)
    var = propagate_uncertainty(ae, z_a, z_b, Az)
    return AnalysisResult("hloba", x_a, z_a=z_a, latent_variance=Az, model_variance=var,
                          trajectory=x_a[None], x_b=problem.x_b, z_b=z_b, z_o=z_o,
                          Bz=_as_diag(problem.Bz), Rz=_as_diag(problem.Rz))


def _as_diag(c):
    if c is None or isinstance(c, DiagonalCovariance):
        return c
    return DiagonalCovariance(c)


# ------------------------------------------------------------ cost functions

def _obs_arrays(obs: ObservationSet):
    return obs.active_indices, obs.active_values, 1.0 / obs.active_std


def _obs_penalty(x, obs):
    """Tape term 0.5 * sum(((H x - y) / sigma)^2); ``None`` when nothing is observed."""
    idx, y, w = _obs_arrays(obs)
    if idx.size == 0:
        return None
    return dc.scale(dc.sum_squares(dc.mul(dc.sub(dc.gather(x, idx), y), w)), 0.5)


def _sum_terms(terms):
    terms = [t for t in terms if t is not None]
    out = terms[0]
    for t in terms[1:]:
        out = dc.add(out, t)
    return out


def _whitener(B) -> np.ndarray:
    """``C`` with ``C^T C = B^{-1}``."""
    m = B.matrix if isinstance(B, FullCovariance) else np.asarray(B, dtype=float)
    L = np.linalg.cholesky(m)
    return np.linalg.solve(L, np.eye(len(m)))


def _window_obs_adjoint(x0, observations, config):
    """Observation cost over the window and its gradient w.r.t. the slot-0 state."""
    spi = config.steps_per_da_interval
    n = len(observations) - 1
    traj = forecast(x0, n * spi, config, keep_stages=True)
    cot = np.zeros_like(traj.states)
    J = 0.0
    for i, obs in enumerate(observations):
        idx, y, w = _obs_arrays(obs)
        if idx.size == 0:
            continue
        d = (traj.states[i * spi][idx] - y) * w
        J += 0.5 * float(d @ d)
        cot[i * spi][idx] += d * w
    return J, trajectory_gradient(traj, cot, config), traj


def cost_3dvar(problem: DAProblem) -> Callable:
    """``fg(x) -> (J, dJ/dx)`` for the model-space 3D cost on the first slot."""
    C = _whitener(problem.B)
    x_b = np.asarray(problem.x_b, dtype=float)
    obs = problem.observations[0]

    def program(x):
        bg = dc.scale(dc.sum_squares(dc.matmul(C, dc.sub(x, x_b))), 0.5)
        return _sum_terms([bg, _obs_penalty(x, obs)])

    def fg(x):
        f, (g,) = dc.value_and_grad(program, [x])
        return f, g

    return fg


def cost_4dvar(problem: DAProblem) -> Callable:
    """``fg(x0)`` for the model-space window cost; observation slots are one interval apart."""
    C = _whitener(problem.B)
    x_b = np.asarray(problem.x_b, dtype=float)

    def program(x):
        return dc.scale(dc.sum_squares(dc.matmul(C, dc.sub(x, x_b))), 0.5)

    def fg(x):
        fb, (gb,) = dc.value_and_grad(program, [x])
        fo, go, _ = _window_obs_adjoint(x, problem.observations, problem.model)
        return fb + fo, gb + go

    return fg


def _latent_background(z, z_b, inv_sd):
    return dc.scale(dc.sum_squares(dc.mul(dc.sub(z, z_b), inv_sd)), 0.5)


def cost_l3dvar(problem: DAProblem) -> Callable:
    """``fg(z)`` for the latent 3D cost: diagonal B_z prior, observations of D(z)."""
    ae = problem.ae
    z_b = problem.background_latent()
    inv_sd = 1.0 / np.sqrt(_variances(problem.Bz, "B_z"))
    obs = problem.observations[0]

    def program(z):
        return _sum_terms([_latent_background(z, z_b, inv_sd),
                           _obs_penalty(latent.decode_tensor(ae, z), obs)])

    def fg(z):
        f, (g,) = dc.value_and_grad(program, [z])
        return f, g

    return fg


def cost_l4dvar(problem: DAProblem) -> Callable:
    """``fg(z)`` for the latent window cost; D(z) is the slot-0 model state."""
    ae = problem.ae
    z_b = problem.background_latent()
    inv_sd = 1.0 / np.sqrt(_variances(problem.Bz, "B_z"))

    def fg(z):
        tape = dc.Tape()
        zt = tape.variable(z)
        bg = _latent_background(zt, z_b, inv_sd)
        x0 = latent.decode_tensor(ae, zt)
        fo, gx, _ = _window_obs_adjoint(x0.value, problem.observations, problem.model)
        # bg + <x0, gx> has the right gradient in z with gx held fixed
        surrogate = dc.add(bg, dc.matmul(x0, gx))
        (g,) = tape.gradient(surrogate, [zt])
        return float(bg.value) + fo, g

    return fg


# ------------------------------------------------------------ solvers

def _minimize(fg, v0, settings: SolverSettings):
    """Returns ``(optimum, OptimizeResult, flags)``; never raises on stalls."""
    flags = ()
    try:
        if settings.optimizer == "lbfgs":
            g0 = np.linalg.norm(fg(v0)[1])
            res = dc.lbfgs(fg, v0, settings.tolerance * max(g0, 1e-300), settings.max_iters)
        else:
            res = dc.adam_minimize(fg, v0, settings.learning_rate, settings.max_iters,
                                   settings.patience, settings.min_improvement,
                                   settings.schedule)
    except dc.OptimizationStalled as e:
        d = e.diagnostics
        res = dc.OptimizeResult(np.asarray(d["params"]), float(d["loss"]), d["iteration"],
                                float(d["grad_norm"]), False, float(d["initial_loss"]))
        flags = ("stalled",)
    if not res.converged and not flags:
        flags = ("max_iters",)
    return res.params, res, flags


def _window_states(x0, n, config):
    if n == 0:
        return np.asarray(x0, dtype=float)[None]
    states = forecast(x0, n * config.steps_per_da_interval, config).states
    return states[:: config.steps_per_da_interval]


def _result(method, x_a, res, flags, **kw):
    return AnalysisResult(method, x_a, iterations=res.iterations, grad_norm=res.grad_norm,
                          initial_cost=res.initial_loss, final_cost=res.final_loss,
                          flags=flags, **kw)


def solve_3dvar(problem: DAProblem) -> AnalysisResult:
    settings = problem.settings or CONVEX_LBFGS
    x_b = np.asarray(problem.x_b, dtype=float)
    x_a, res, flags = _minimize(cost_3dvar(problem), x_b, settings)
    return _result("h3dvar", x_a, res, flags, trajectory=x_a[None], x_b=x_b)


def solve_4dvar(problem: DAProblem) -> AnalysisResult:
    settings = problem.settings or MODEL_ADAM
    x_b = np.asarray(problem.x_b, dtype=float)
    x0, res, flags = _minimize(cost_4dvar(problem), x_b, settings)
    traj = _window_states(x0, problem.window, problem.model)
    return _result("h4dvar", traj[-1], res, flags, trajectory=traj, x_b=x_b)


def solve_l3dvar(problem: DAProblem) -> AnalysisResult:
    settings = problem.settings or LATENT_ADAM
    z_b = problem.background_latent()
    z_a, res, flags = _minimize(cost_l3dvar(problem), z_b, settings)
    x_a = latent.decode(problem.ae, z_a)
    return _result("hl3dvar", x_a, res, flags, z_a=z_a, trajectory=x_a[None],
                   x_b=problem.x_b, z_b=z_b, Bz=_as_diag(problem.Bz))


def solve_l4dvar(problem: DAProblem) -> AnalysisResult:
    settings = problem.settings or LATENT_ADAM
    z_b = problem.background_latent()
    z_a, res, flags = _minimize(cost_l4dvar(problem), z_b, settings)
    traj = _window_states(latent.decode(problem.ae, z_a), problem.window, problem.model)
    return _result("hl4dvar", traj[-1], res, flags, z_a=z_a, trajectory=traj,
                   x_b=problem.x_b, z_b=z_b, Bz=_as_diag(problem.Bz))


# ------------------------------------------------------ sequential windows

def sequential_window(solve_slot: Callable, x_b, observations, config: ModelConfig) -> AnalysisResult:
    """Assimilate window slots one at a time.

    ``solve_slot(k, x_b, obs)`` analyses slot ``k``; its analysis is advanced
    one interval to give the next slot's background. Returns the last slot's
    result with every slot's result in ``.slots`` and their analyses in
    ``.trajectory``.
    """
    slots = []
    x = np.asarray(x_b, dtype=float)
    for k, obs in enumerate(observations):
        if k > 0:
            x = advance(slots[-1].x_a, config.steps_per_da_interval, config)
        slots.append(solve_slot(k, x, obs))
    final = replace(slots[-1])
    final.slots = slots
    final.trajectory = np.array([s.x_a for s in slots])
    final.flags = tuple(sorted({f for s in slots for f in s.flags}))
    final.iterations = sum(s.iterations for s in slots)
    return final


def hloba_sequential_window(problem: DAProblem, covariances: Callable | None = None) -> AnalysisResult:
    """HLOBA over every slot of the window.

    ``covariances(k, x_b) -> (Bz, Rz)`` refreshes the error statistics per
    slot; by default the problem's own ``Bz``/``Rz`` are reused.
    """
    def slot(k, x_b, obs):
        Bz, Rz = (problem.Bz, problem.Rz) if covariances is None else covariances(k, x_b)
        return hloba_analysis(replace(problem, observations=[obs], x_b=x_b, z_b=None,
                                      Bz=Bz, Rz=Rz))

    return sequential_window(slot, problem.x_b, problem.observations, problem.model)

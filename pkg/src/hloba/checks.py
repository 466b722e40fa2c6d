"""Gradient verification against central finite differences.

Every differentiable objective in the package is checked on a small random
problem: the O2L training loss, the four variational costs and the pulled-back
forecast gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import assimilation as da
from . import diffcore as dc
from . import latent
from .covariance import FullCovariance, gaspari_cohn, cyclic_distance
from .dynamics import ModelConfig, forecast_gradient, advance, nature_run, spin_up
from .observations import every_kth, make_network, synthesize_observations

DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradientCheck:
    name: str
    point: int
    rel_error: float
    passed: bool


def central_difference(f, x, h: float = 1e-6) -> np.ndarray:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def relative_error(g, g_ref) -> float:
    g, g_ref = np.asarray(g, dtype=float), np.asarray(g_ref, dtype=float)
    return float(np.linalg.norm(g - g_ref) / max(np.linalg.norm(g_ref), 1e-300))


def _random_ae(n_x, n_z, rng, variant):
    if variant == "linear":
        return latent.fit_linear_ae(rng.standard_normal((4 * n_x, n_x)) * 3 + 2, n_z)
    enc = latent._init_layers([n_x, 16, n_z], ["tanh", "linear"], rng)
    dec = latent._init_layers([n_z, 16, n_x], ["tanh", "linear"], rng)
    return latent.AutoencoderModel("mlp", n_x, n_z, np.full(n_x, 2.0), np.full(n_x, 3.5),
                                   enc, dec)


def _problem(rng, model, window, ae):
    """Random background, correlated B and noisy observations every third point."""
    x_t = spin_up(model, rng, 500)
    truth = nature_run(x_t, window, model)
    sigma = np.full(model.n_x, 3.5)
    net = make_network(every_kth(model.n_x, 3).observed_indices, sigma, 0.1, model.n_x)
    obs = [synthesize_observations(x, net, rng, k) for k, x in enumerate(truth)]
    d = cyclic_distance(model.n_x)
    B = FullCovariance(gaspari_cohn(d, 4.0) + 0.05 * np.eye(model.n_x))
    x_b = x_t + rng.standard_normal(model.n_x)
    Bz = rng.uniform(0.5, 2.0, ae.n_z)
    return da.DAProblem(obs, model, x_b=x_b, B=B, Bz=Bz, ae=ae)


def _check(name, fg, points, h, tol):
    out = []
    for k, x in enumerate(points):
        _, g = fg(x)
        g_fd = central_difference(lambda v: fg(v)[0], x, h)
        err = relative_error(g, g_fd)
        out.append(GradientCheck(name, k, err, err <= tol))
    return out


def gradient_suite(seed: int = 0, n_points: int = 5, tolerance: float = DEFAULT_TOLERANCE,
                   variant: str = "mlp") -> list:
    """All gradient checks; one :class:`GradientCheck` per function and point."""
    rng = np.random.default_rng(seed)
    model = ModelConfig()
    ae = _random_ae(model.n_x, 8, rng, variant)
    p3 = _problem(rng, model, 0, ae)
    p4 = _problem(rng, model, 2, ae)
    z_b = p3.background_latent()

    def x_points(p):
        return [p.x_b + 0.5 * rng.standard_normal(model.n_x) for _ in range(n_points)]

    def z_points(z):
        return [z + 0.3 * rng.standard_normal(z.size) for _ in range(n_points)]

    results = []
    results += _check("cost_3dvar", da.cost_3dvar(p3), x_points(p3), 1e-5, tolerance)
    results += _check("cost_4dvar", da.cost_4dvar(p4), x_points(p4), 1e-5, tolerance)
    results += _check("cost_l3dvar", da.cost_l3dvar(p3), z_points(z_b), 1e-5, tolerance)
    results += _check("cost_l4dvar", da.cost_l4dvar(p4), z_points(p4.background_latent()),
                      1e-5, tolerance)

    # forecast gradient of a quadratic functional of the end state
    w = rng.standard_normal(model.n_x)
    n_steps = 8

    def end_cost(x):
        e = advance(x, n_steps, model)
        return 0.5 * float(np.sum(w * e * e))

    def fg_forecast(x):
        e = advance(x, n_steps, model)
        return end_cost(x), forecast_gradient(x, n_steps, w * e, model)

    results += _check("forecast_gradient", fg_forecast, x_points(p3), 1e-6, tolerance)

    # O2L training loss, differentiated in the first-layer weights
    o2l_layers = latent._init_layers([2 * model.n_x, 12, ae.n_z], ["tanh", "linear"], rng)
    inputs = rng.standard_normal((6, 2 * model.n_x))
    targets = rng.standard_normal((6, ae.n_z))
    weights = rng.uniform(0.5, 1.0, (6, ae.n_z))
    program = latent.o2l_loss_program(o2l_layers, inputs, targets, weights)
    params = latent._flat_params(o2l_layers)
    shape = params[0].shape

    def fg_o2l(v):
        ps = [v.reshape(shape)] + params[1:]
        f, grads = dc.value_and_grad(program, ps)
        return f, grads[0].reshape(-1)

    w0 = [params[0].reshape(-1) + 0.1 * rng.standard_normal(params[0].size)
          for _ in range(n_points)]
    results += _check("o2l_loss", fg_o2l, w0, 1e-5, tolerance)
    return results

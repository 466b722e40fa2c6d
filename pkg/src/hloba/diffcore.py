"""A small reverse-mode differentiation engine and the two optimizers used here.

The primitive set is kept deliberately narrow: matmul, add, sub, mul, tanh,
gather, sum_squares and scale. That covers the dense networks and every
cost function in the package. Anything else on a :class:`Tensor` raises
:class:`UnsupportedOperation` when the graph is built.

Usage::

    tape = Tape()
    w = tape.variable(np.ones((3, 2)))
    loss = sum_squares(tanh(matmul(x, w)))
    (gw,) = tape.gradient(loss, [w])
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ContractError(ValueError):
    pass


class UnsupportedOperation(TypeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class OptimizationStalled(RuntimeError):
    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class Tape:
    """Ordered record of the primitive operations applied to its variables."""

    def __init__(self):
        self.nodes = []

    def variable(self, value) -> "Tensor":
        t = Tensor(np.array(value, dtype=float), tape=self)
        self.nodes.append(t)
        return t

    def _record(self, value, parents, backward):
        t = Tensor(value, tape=self, parents=parents, backward=backward)
        self.nodes.append(t)
        return t

    def backward(self, output: "Tensor", seed) -> None:
        """Accumulate ``.grad`` on every node reachable from ``output``.

        Nodes are visited in reverse recording order, which is a reverse
        topological order because a node is recorded after its inputs.
        """
        if output.tape is not self:
            raise ContractError("output was not recorded on this tape")
        for node in self.nodes:
            node.grad = None
        output.grad = np.array(seed, dtype=float).reshape(output.value.shape)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if parent is None or parent.tape is not self:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def gradient(self, loss: "Tensor", wrt: Sequence["Tensor"]) -> list:
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        if loss.tape is None:  # loss does not depend on any variable
            return [np.zeros_like(p.value) for p in wrt]
        self.backward(loss, 1.0)
        return [np.zeros_like(p.value) if p.grad is None else p.grad for p in wrt]

    def vjp(self, output: "Tensor", cotangent, wrt: Sequence["Tensor"]) -> list:
        """Vector-Jacobian product of a non-scalar output."""
        self.backward(output, cotangent)
        return [np.zeros_like(p.value) if p.grad is None else p.grad for p in wrt]


class Tensor:
    __slots__ = ("value", "tape", "grad", "_parents", "_backward")
    # keep numpy from silently operating on Tensors outside the primitive set
    __array_ufunc__ = None

    def __init__(self, value, tape=None, parents=(), backward=None):
        self.value = value
        self.tape = tape
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, tracked={self.tape is not None})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def _unsupported(self, *args, **kwargs):
        raise UnsupportedOperation("operation is outside the supported primitive set")

    __truediv__ = __rtruediv__ = __pow__ = __rpow__ = __abs__ = _unsupported


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=float))


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (np.ndarray, float, int, np.floating, np.integer)):
        return constant(x)
    raise UnsupportedOperation(f"cannot use {type(x).__name__} as a tensor")


def _tape_of(*ts):
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("tensors belong to different tapes")
            tape = t.tape
    return tape


def _emit(value, parents, backward):
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return tape._record(value, parents, backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value

    def back(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _emit(av @ bv, (a, b), back)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.value.shape, b.value.shape
    return _emit(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.value.shape, b.value.shape
    return _emit(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _emit(c * a.value, (a,), lambda g: (c * g,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.value)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def gather(a, indices, axis: int = -1) -> Tensor:
    """Select ``indices`` along ``axis`` (the point-selection operator)."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=int)
    shape = a.value.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (out,)

    return _emit(np.take(a.value, idx, axis=axis), (a,), back)


def sum_squares(a) -> Tensor:
    a = _wrap(a)
    av = a.value
    return _emit(np.asarray(np.sum(av * av)), (a,), lambda g: (2.0 * g * av,))


def grad(loss_program: Callable[..., Tensor], parameters: Sequence) -> list:
    """d loss / d p for each parameter; ``loss_program(*tensors)`` must return a scalar."""
    tape = Tape()
    ps = [tape.variable(p) for p in parameters]
    loss = loss_program(*ps)
    if not isinstance(loss, Tensor):
        raise ContractError("loss program must return a Tensor")
    return tape.gradient(loss, ps)


def value_and_grad(loss_program, parameters):
    tape = Tape()
    ps = [tape.variable(p) for p in parameters]
    loss = loss_program(*ps)
    if not isinstance(loss, Tensor):
        raise ContractError("loss program must return a Tensor")
    return float(loss.value), tape.gradient(loss, ps)


def evaluate(loss_program, parameters) -> float:
    out = loss_program(*[constant(p) for p in parameters])
    return float(np.asarray(out.value).reshape(()))


def finite_difference_gradient(loss_program, parameters, h: float = 1e-5) -> list:
    """Central differences (L(p + h e_i) - L(p - h e_i)) / 2h, coordinate by coordinate."""
    if not h > 0:
        raise ContractError("h must be positive")
    params = [np.array(p, dtype=float) for p in parameters]
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate(loss_program, params)
            flat[i] = orig - h
            fm = evaluate(loss_program, params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


# ---------------------------------------------------------------- optimizers

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    kind: str = "adam"


def adam_step(params, grads, state: AdamState, learning_rate: float | None = None):
    """One bias-corrected Adam update. Returns ``(new_params, state)``.

    ``learning_rate`` overrides ``state.learning_rate`` for this step, which
    is how schedules are applied.
    """
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=float) for p in params]
        state.v = [np.zeros_like(p, dtype=float) for p in params]
    lr = state.learning_rate if learning_rate is None else learning_rate
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(g) != np.shape(p) or state.m[i].shape != np.shape(p):
            raise ContractError(f"shape mismatch at parameter {i}")
        m = state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        new = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"Adam produced non-finite values at step {t}")
        out.append(new)
    return out, state


def warmup_cosine(step: int, total_steps: int, peak_lr: float, warmup_fraction: float = 0.05) -> float:
    """Linear warm-up to ``peak_lr`` then cosine decay to zero."""
    warm = max(1, int(round(warmup_fraction * total_steps)))
    if step < warm:
        return peak_lr * (step + 1) / warm
    progress = (step - warm) / max(1, total_steps - warm)
    return 0.5 * peak_lr * (1.0 + math.cos(math.pi * min(1.0, progress)))


@dataclass
class OptimizeResult:
    params: np.ndarray
    final_loss: float
    iterations: int
    grad_norm: float
    converged: bool
    initial_loss: float = math.nan


def adam_minimize(value_and_grad_fn, x0, learning_rate: float, max_iters: int = 500,
                  patience: int = 20, min_improvement: float = 1e-8,
                  schedule: str = "cosine") -> OptimizeResult:
    """Adam on a flat vector, returning the best iterate seen.

    Stops early once the best loss has improved by less than
    ``min_improvement`` over the last ``patience`` iterations. With
    ``schedule="cosine"`` the step size decays to zero at ``max_iters``.
    """
    if schedule not in ("cosine", "constant"):
        raise ContractError(f"unknown schedule {schedule!r}")
    x = np.array(x0, dtype=float).reshape(-1)
    state = AdamState(learning_rate=learning_rate)
    f, g = value_and_grad_fn(x)
    f0 = best_f = float(f)
    best_x, best_g = x.copy(), np.asarray(g, dtype=float).reshape(-1)
    trace = [best_f]
    it = 0
    converged = False
    while it < max_iters:
        lr = learning_rate
        if schedule == "cosine":
            lr = 0.5 * learning_rate * (1.0 + math.cos(math.pi * it / max_iters))
        (x,), state = adam_step([x], [np.asarray(g, dtype=float).reshape(-1)], state, lr)
        f, g = value_and_grad_fn(x)
        if not math.isfinite(f):
            raise NonFiniteError(f"Adam loss became non-finite at iteration {it}")
        it += 1
        if f < best_f:
            best_f, best_x, best_g = float(f), x.copy(), np.asarray(g, dtype=float).reshape(-1)
        trace.append(best_f)
        if it >= patience and trace[-patience - 1] - best_f < min_improvement:
            converged = True
            break
    return OptimizeResult(best_x, best_f, it, float(np.linalg.norm(best_g)), converged, f0)


@dataclass
class LBFGSState:
    memory_size: int = 10
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 60
    s: list = field(default_factory=list)
    y: list = field(default_factory=list)
    step_count: int = 0
    kind: str = "lbfgs"

    def push(self, s, y):
        self.s.append(s)
        self.y.append(y)
        if len(self.s) > self.memory_size:
            self.s.pop(0)
            self.y.pop(0)

    def direction(self, g):
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            q -= a * y
            alphas.append((rho, a))
        if self.s:
            s, y = self.s[-1], self.y[-1]
            q *= (s @ y) / (y @ y)
        for (s, y), (rho, a) in zip(zip(self.s, self.y), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q


def _within_rounding(f_new, f, g_new, gnorm):
    """Loss change lost in rounding but the gradient still shrinks."""
    if abs(f_new - f) > 64 * np.finfo(float).eps * max(abs(f), 1.0):
        return False
    return float(np.linalg.norm(g_new)) < gnorm


def lbfgs(value_and_grad_fn, x0, tolerance: float = 1e-8, max_iters: int = 200,
          state: LBFGSState | None = None) -> OptimizeResult:
    """L-BFGS with Armijo backtracking on a flat parameter vector.

    ``value_and_grad_fn(x) -> (f, g)``. The loss never increases between
    accepted iterates beyond rounding error in ``f``.
    """
    if not tolerance > 0:
        raise ContractError("tolerance must be positive")
    state = state or LBFGSState()
    x = np.array(x0, dtype=float).reshape(-1)
    f, g = value_and_grad_fn(x)
    f0 = float(f)
    g = np.asarray(g, dtype=float).reshape(-1)
    gnorm = float(np.linalg.norm(g))
    it = 0
    while gnorm > tolerance and it < max_iters:
        d = state.direction(g)
        slope = g @ d
        if not slope < 0:
            state.s.clear()
            state.y.clear()
            d = -g
            slope = -gnorm * gnorm
        step = 1.0 if state.s else min(1.0, 1.0 / gnorm)
        accepted = False
        for _ in range(state.max_backtracks):
            x_new = x + step * d
            if np.array_equal(x_new, x):
                break  # the step underflowed: no progress is possible
            f_new, g_new = value_and_grad_fn(x_new)
            if np.isfinite(f_new) and (f_new <= f + state.c1 * step * slope
                                       or _within_rounding(f_new, f, g_new, gnorm)):
                accepted = True
                break
            step *= state.shrink
        if not accepted:
            raise OptimizationStalled("line search failed", iteration=it, loss=f,
                                      grad_norm=gnorm, last_step=step, params=x,
                                      initial_loss=f0)
        # secant refinement of the step along d: exact on quadratics, which
        # gives finite termination there
        curv = np.asarray(g_new, dtype=float).reshape(-1) @ d - slope
        if curv > 0:
            t = -step * slope / curv
            if abs(t - step) > 1e-3 * step:
                x_t = x + t * d
                f_t, g_t = value_and_grad_fn(x_t)
                if np.isfinite(f_t) and f_t <= f_new and f_t <= f + state.c1 * t * slope:
                    x_new, f_new, g_new = x_t, f_t, g_t
        g_new = np.asarray(g_new, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(g_new))):
            raise NonFiniteError(f"L-BFGS produced non-finite values at iteration {it}")
        s, yv = x_new - x, g_new - g
        if s @ yv > 1e-12 * (yv @ yv):
            state.push(s, yv)
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        it += 1
        state.step_count = it
    return OptimizeResult(x, float(f), it, gnorm, gnorm <= tolerance, f0)


def lbfgs_minimize(loss_program, initial_params, tolerance: float = 1e-8,
                   max_iters: int = 200) -> OptimizeResult:
    """Minimize a tape loss program of a single vector parameter."""
    shape = np.shape(initial_params)

    def fg(x):
        f, (g,) = value_and_grad(loss_program, [x.reshape(shape)])
        return f, g.reshape(-1)

    res = lbfgs(fg, np.asarray(initial_params, dtype=float), tolerance, max_iters)
    res.params = res.params.reshape(shape)
    return res

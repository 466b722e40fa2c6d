"""Encoder/decoder pair and the observation-to-latent (O2L) network.

All networks are stacks of dense layers ``y = act(x @ W + b)`` acting on
row vectors, so a batch is just a 2-D array. States are normalized
per coordinate before entering any network.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError
from .observations import ObservationNetwork, ObservationSet


class DegenerateData(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray    # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ("linear", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class Schedule:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 2e-4
    warmup_fraction: float = 0.05
    validation_fraction: float = 0.1


@dataclass
class AutoencoderModel:
    variant: str
    n_x: int
    n_z: int
    mean: np.ndarray
    scale: np.ndarray
    encoder: list
    decoder: list
    info: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in [self.mean, self.scale] + [a for l in self.encoder + self.decoder
                                              for a in (l.weight, l.bias)]:
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        return h.hexdigest()[:16]


@dataclass
class O2LModel:
    layers: list
    n_x: int
    n_z: int
    mean: np.ndarray
    scale: np.ndarray
    ae_fingerprint: str
    info: dict = field(default_factory=dict)


# ------------------------------------------------------------------ networks

def mlp(layers, h):
    for l in layers:
        h = h @ l.weight + l.bias
        if l.activation == "tanh":
            h = np.tanh(h)
    return h


def mlp_tensor(layers, h, params=None):
    """Tape version of :func:`mlp`; ``params`` optionally replaces (W, b) pairs."""
    for i, l in enumerate(layers):
        W, b = (l.weight, l.bias) if params is None else params[2 * i: 2 * i + 2]
        h = dc.add(dc.matmul(h, W), b)
        if l.activation == "tanh":
            h = dc.tanh(h)
    return h


def _init_layers(sizes, activations, rng):
    layers = []
    for (n_in, n_out), act in zip(zip(sizes[:-1], sizes[1:]), activations):
        lim = np.sqrt(6.0 / (n_in + n_out))
        layers.append(Layer(rng.uniform(-lim, lim, (n_in, n_out)), np.zeros(n_out), act))
    return layers


def _flat_params(layers):
    return [a for l in layers for a in (l.weight, l.bias)]


def _set_params(layers, params):
    for i, l in enumerate(layers):
        l.weight, l.bias = params[2 * i], params[2 * i + 1]


# ---------------------------------------------------------------- autoencoder

def _check_len(x, n, what):
    if np.shape(x)[-1] != n:
        raise ContractError(f"{what} has length {np.shape(x)[-1]}, expected {n}")


def encode(model: AutoencoderModel, state) -> np.ndarray:
    _check_len(state, model.n_x, "state")
    return mlp(model.encoder, (np.asarray(state, dtype=float) - model.mean) / model.scale)


def decode(model: AutoencoderModel, z) -> np.ndarray:
    _check_len(z, model.n_z, "latent vector")
    return model.mean + model.scale * mlp(model.decoder, np.asarray(z, dtype=float))


def decode_tensor(model: AutoencoderModel, z):
    """Decoder on the tape, for latent cost functions."""
    return dc.add(dc.mul(mlp_tensor(model.decoder, z), model.scale), model.mean)


def decoder_jacobian(model: AutoencoderModel, z, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian d decode / dz, shape (n_x, n_z)."""
    z = np.asarray(z, dtype=float)
    eye = np.eye(model.n_z) * h
    return ((decode(model, z + eye) - decode(model, z - eye)) / (2 * h)).T


def _normalization(states):
    mean = states.mean(axis=0)
    scale = states.std(axis=0)
    return mean, np.where(scale > 0, scale, 1.0)


def fit_linear_ae(training_states, n_z: int) -> AutoencoderModel:
    """PCA autoencoder on per-coordinate normalized states."""
    X = np.asarray(training_states, dtype=float)
    n, n_x = X.shape
    if n < n_x:
        raise DegenerateData(f"need at least n_x={n_x} states, got {n}")
    if not 1 <= n_z <= n_x:
        raise ContractError("n_z must lie in [1, n_x]")
    mean, scale = _normalization(X)
    U = (X - mean) / scale
    _, s, vt = np.linalg.svd(U, full_matrices=False)
    tol = s[0] * max(U.shape) * np.finfo(float).eps if s.size else 0.0
    if np.sum(s > tol) < n_z:
        raise DegenerateData(f"data rank {int(np.sum(s > tol))} is below n_z={n_z}")
    V = vt[:n_z].T.copy()
    # deterministic sign: largest-magnitude loading of each direction is positive
    signs = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(n_z)])
    V *= signs
    var = s ** 2
    model = AutoencoderModel(
        "linear", n_x, n_z, mean, scale,
        [Layer(V.copy(), np.zeros(n_z))], [Layer(V.T.copy(), np.zeros(n_x))],
        info={"captured_variance": float(var[:n_z].sum() / var.sum())})
    return model


def _split(n, fraction, rng):
    perm = rng.permutation(n)
    n_val = int(round(fraction * n))
    return perm[n_val:], perm[:n_val]


def train_mlp_ae(training_states, n_z: int, schedule: Schedule | None = None,
                 rng_seed: int = 0, hidden: int = 64, activation: str = "tanh") -> AutoencoderModel:
    """Dense autoencoder ``n_x -> hidden -> n_z -> hidden -> n_x`` trained with Adam.

    ``info`` records validation MSE (normalized units) for this model and for
    a PCA model fitted on the same training split; ``improved_over_linear``
    flags whether the network beat it.
    """
    schedule = schedule or Schedule()
    X = np.asarray(training_states, dtype=float)
    n, n_x = X.shape
    rng = np.random.default_rng(rng_seed)
    tr, va = _split(n, schedule.validation_fraction, rng)
    mean, scale = _normalization(X[tr])
    U = (X - mean) / scale
    enc = _init_layers([n_x, hidden, n_z], [activation, "linear"], rng)
    dec = _init_layers([n_z, hidden, n_x], [activation, "linear"], rng)
    layers = enc + dec
    params = _flat_params(layers)

    Utr = U[tr]

    def make_loss(idx):
        batch = Utr[idx]

        def program(*ps):
            out = mlp_tensor(layers, batch, ps)
            return dc.scale(dc.sum_squares(dc.sub(out, batch)), 1.0 / batch.size)
        return program

    params, history = _adam_train(params, len(tr), make_loss, schedule, rng)
    _set_params(layers, params)
    model = AutoencoderModel("mlp", n_x, n_z, mean, scale, enc, dec)
    Uv = U[va] if len(va) else U[tr]
    val_mse = float(np.mean((mlp(dec, mlp(enc, Uv)) - Uv) ** 2))
    lin = fit_linear_ae(X[tr], n_z)
    Ul = (X[va] if len(va) else X[tr])
    lin_mse = float(np.mean(((decode(lin, encode(lin, Ul)) - Ul) / scale) ** 2))
    model.info.update(val_mse=val_mse, linear_val_mse=lin_mse,
                      improved_over_linear=bool(val_mse <= lin_mse),
                      loss_history=history)
    return model


def _adam_train(params, n, make_loss, schedule, rng):
    """Mini-batch Adam with linear warm-up and cosine decay.

    ``make_loss(batch_indices)`` returns the tape program for one batch.
    """
    bs = schedule.batch_size
    steps_per_epoch = max(1, -(-n // bs))
    total = schedule.epochs * steps_per_epoch
    state = dc.AdamState(learning_rate=schedule.learning_rate)
    history = []
    first = None
    step = 0
    for _ in range(schedule.epochs):
        perm = rng.permutation(n)
        acc = 0.0
        for b in range(steps_per_epoch):
            loss, grads = dc.value_and_grad(make_loss(perm[b * bs:(b + 1) * bs]), params)
            if first is None:
                first = loss
            elif not loss <= 10.0 * first:
                raise TrainingDiverged(f"loss {loss:.3g} exceeds 10x the initial {first:.3g}")
            lr = dc.warmup_cosine(step, total, schedule.learning_rate, schedule.warmup_fraction)
            params, state = dc.adam_step(params, grads, state, learning_rate=lr)
            acc += loss
            step += 1
        history.append(acc / steps_per_epoch)
    return params, history


# ------------------------------------------------------------------- O2L net

def mask_weight_map(mask, width: int = 5) -> np.ndarray:
    """Cyclic moving average of the quality mask, rescaled to [0.5, 1].

    A constant input maps to 0.5 everywhere. Works on the last axis of a batch.
    """
    m = np.asarray(mask, dtype=float)
    half = width // 2
    sm = sum(np.roll(m, k, axis=-1) for k in range(-half, width - half)) / width
    lo = sm.min(axis=-1, keepdims=True)
    hi = sm.max(axis=-1, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, 0.5 + 0.5 * (sm - lo) / safe, 0.5)


def pool_to_latent(weights, n_z: int) -> np.ndarray:
    """Average grid weights over ``n_z`` contiguous segments of the grid."""
    w = np.asarray(weights, dtype=float)
    n = w.shape[-1]
    edges = (np.arange(n_z + 1) * n) // n_z
    return np.stack([w[..., a:b].mean(axis=-1) for a, b in zip(edges[:-1], edges[1:])], axis=-1)


def o2l_inputs(model, values, mask) -> np.ndarray:
    """Network input: normalized observed values (0 where unobserved) then the mask."""
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=float)
    norm = np.where(mask > 0, (values - model.mean) / model.scale, 0.0)
    return np.concatenate([norm, mask], axis=-1)


def o2l_apply(model: O2LModel, values, mask) -> np.ndarray:
    """Batched O2L on dense observation images."""
    return mlp(model.layers, o2l_inputs(model, values, mask))


def o2l_forward(model: O2LModel, obs: ObservationSet) -> np.ndarray:
    if obs.network.n_x != model.n_x:
        raise ContractError("observation grid does not match the model")
    idx = obs.network.observed_indices
    off = obs.mask[idx] == 0
    if np.any(obs.values[off] != 0):
        raise ContractError("nonzero observation value where the mask is 0")
    values, mask = obs.image()
    return o2l_apply(model, values, mask)


def simulate_images(states, network: ObservationNetwork, rng, mask_values=None,
                    noise_level=None, sigma_clim=None):
    """Observation images with mask-dependent noise ``std / m_q`` at observed points.

    ``mask_values`` (per state, per observed point) defaults to 1. Noise std
    defaults to the network's own; ``noise_level * sigma_clim`` overrides it.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    idx = network.observed_indices
    n = len(X)
    m = np.ones((n, idx.size)) if mask_values is None else np.broadcast_to(mask_values, (n, idx.size))
    std = network.noise_std if noise_level is None else noise_level * np.asarray(sigma_clim)[idx]
    live = m > 0  # points rejected by QC stay empty
    eps = rng.standard_normal((n, idx.size)) * std / np.where(live, m, 1.0)
    values = np.zeros_like(X)
    mask = np.zeros_like(X)
    values[:, idx] = np.where(live, X[:, idx] + eps, 0.0)
    mask[:, idx] = m
    return values, mask


def o2l_loss_program(layers, inputs, targets, weights):
    """Weighted squared latent error, batch-averaged (the O2L training loss)."""
    def program(*ps):
        out = mlp_tensor(layers, inputs, ps)
        r = dc.mul(dc.sub(out, targets), weights)
        return dc.scale(dc.sum_squares(r), 1.0 / len(inputs))
    return program


def train_o2l(ae: AutoencoderModel, training_states, network: ObservationNetwork,
              schedule: Schedule | None = None, rng_seed: int = 0,
              hidden=(96, 96), mask_range=(0.5, 1.0)) -> O2LModel:
    """Fit O2L(H(x) + eps(m_q), m_q) to E(x) with the frozen autoencoder.

    Each batch draws a fresh quality mask uniformly in ``mask_range`` on the
    network and noise with std ``noise_std / m_q``. ``hidden=()`` gives a
    single linear layer.
    """
    schedule = schedule or Schedule()
    X = np.asarray(training_states, dtype=float)
    rng = np.random.default_rng(rng_seed)
    tr, va = _split(len(X), schedule.validation_fraction, rng)
    Z = encode(ae, X)
    n_x, n_z = ae.n_x, ae.n_z
    sizes = [2 * n_x, *hidden, n_z]
    layers = _init_layers(sizes, ["tanh"] * len(hidden) + ["linear"], rng)
    model = O2LModel(layers, n_x, n_z, ae.mean, ae.scale, ae.fingerprint())
    lo, hi = mask_range

    Xtr, Ztr = X[tr], Z[tr]

    def make_loss(idx):
        m = rng.uniform(lo, hi, (len(idx), len(network)))
        values, mask = simulate_images(Xtr[idx], network, rng, m)
        w = pool_to_latent(mask_weight_map(mask), n_z)
        return o2l_loss_program(layers, o2l_inputs(model, values, mask), Ztr[idx], w)

    params, history = _adam_train(_flat_params(layers), len(tr), make_loss, schedule, rng)
    _set_params(layers, params)
    if len(va):
        vrng = np.random.default_rng(rng_seed + 1)
        values, mask = simulate_images(X[va], network, vrng)
        model.info["val_latent_mse"] = float(np.mean((o2l_apply(model, values, mask) - Z[va]) ** 2))
    model.info["loss_history"] = history
    return model


# --------------------------------------------------------------- checkpoints

def _num(x):
    return format(float(x), ".17g")


def _dump(obj):
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_dump(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_dump(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _dump(obj.tolist())
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    return _num(obj)


def _layer_doc(l, role):
    return {"role": role, "rows": int(l.weight.shape[0]), "cols": int(l.weight.shape[1]),
            "weights": l.weight.reshape(-1), "bias": l.bias, "activation": l.activation}


def _layer_from(doc):
    W = np.array(doc["weights"], dtype=float).reshape(doc["rows"], doc["cols"])
    return Layer(W, np.array(doc["bias"], dtype=float), doc["activation"])


def to_json(model) -> str:
    """Checkpoint text. Layer ``rows``/``cols`` are the input/output sizes;
    weights are row-major; every number carries 17 significant digits."""
    if isinstance(model, AutoencoderModel):
        layers = ([_layer_doc(l, "encoder") for l in model.encoder]
                  + [_layer_doc(l, "decoder") for l in model.decoder])
        doc = {"variant": model.variant, "n_x": model.n_x, "n_z": model.n_z}
    else:
        layers = [_layer_doc(l, "o2l") for l in model.layers]
        doc = {"variant": "o2l", "n_x": model.n_x, "n_z": model.n_z,
               "ae_fingerprint": model.ae_fingerprint}
    doc["normalization"] = {"mean": model.mean, "scale": model.scale}
    doc["layers"] = layers
    return _dump(doc)


def from_json(text):
    doc = json.loads(text)
    mean = np.array(doc["normalization"]["mean"], dtype=float)
    scale = np.array(doc["normalization"]["scale"], dtype=float)
    if doc["variant"] == "o2l":
        return O2LModel([_layer_from(d) for d in doc["layers"]], doc["n_x"], doc["n_z"],
                        mean, scale, doc.get("ae_fingerprint", ""))
    enc = [_layer_from(d) for d in doc["layers"] if d["role"] == "encoder"]
    dec = [_layer_from(d) for d in doc["layers"] if d["role"] == "decoder"]
    return AutoencoderModel(doc["variant"], doc["n_x"], doc["n_z"], mean, scale, enc, dec)


def save(model, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(model))


def load(path):
    with open(path) as fh:
        return from_json(fh.read())

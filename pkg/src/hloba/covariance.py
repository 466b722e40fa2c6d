"""Background and observation error statistics for latent and model space.

Diagonal latent estimators (NMC climatology, ensemble spread, O2L discrepancy),
their hybrid blends, time-lagged ensembles, localized model-space B, and the
cross-dimension correlation diagnostic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import latent
from .diffcore import ContractError
from .dynamics import ModelConfig, advance
from .observations import ObservationNetwork

DEFAULT_FLOOR = 1e-12
MIN_NMC_PAIRS = 10
MIN_ARCHIVE = 500
ENSEMBLE_SIZES = (3, 6, 9)


class InsufficientSamples(ValueError):
    pass


class EstimationError(RuntimeError):
    pass


class SpinUpRequired(InsufficientSamples):
    """Not enough past analyses to build an ensemble yet."""


@dataclass(frozen=True, eq=False)
class DiagonalCovariance:
    variances: np.ndarray

    def __post_init__(self):
        v = np.array(self.variances, dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ContractError("variances must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "variances", v)

    def __len__(self):
        return self.variances.size

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variances)

    def to_json(self) -> str:
        return json.dumps({"kind": "diagonal", "length": len(self),
                           "variances": self.variances.tolist()})


@dataclass(frozen=True, eq=False)
class FullCovariance:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ContractError("covariance matrix must be square")
        if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
            raise ContractError("covariance matrix must be symmetric")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __len__(self):
        return self.matrix.shape[0]

    def to_json(self) -> str:
        return json.dumps({"kind": "full", "length": len(self),
                           "matrix": self.matrix.tolist()})


def covariance_from_json(text: str):
    doc = json.loads(text)
    if doc["kind"] == "diagonal":
        out = DiagonalCovariance(doc["variances"])
    elif doc["kind"] == "full":
        out = FullCovariance(doc["matrix"])
    else:
        raise ContractError(f"unknown covariance kind {doc['kind']!r}")
    if len(out) != doc["length"]:
        raise ContractError("length field disagrees with the payload")
    return out


@dataclass
class EnsembleSet:
    members: np.ndarray          # (N_e, n)
    lead_times: np.ndarray       # DA intervals since each member's initialization
    valid_time: int

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class HybridWeights:
    alpha_ens: float = 0.5
    beta_ens: float = 1.0
    inflation_b: float = 1.0
    inflation_r: float = 1.0

    def __post_init__(self):
        for name in ("alpha_ens", "beta_ens"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
        for name in ("inflation_b", "inflation_r"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")


def _encoder(encoder):
    if isinstance(encoder, latent.AutoencoderModel):
        return lambda X: latent.encode(encoder, X)
    return encoder


def _floored(v, min_var):
    return DiagonalCovariance(np.maximum(v, min_var))


# ------------------------------------------------------------- estimators

def nmc_latent_b(encoder, forecast_pairs, min_var=DEFAULT_FLOOR) -> DiagonalCovariance:
    """Half the mean squared latent difference between long and short lead forecasts.

    ``forecast_pairs`` is ``(x_short, x_long)`` arrays of shape ``(n_pairs, n_x)``
    valid at the same times. ``encoder`` is an autoencoder or any batched map.
    """
    short, long_ = (np.atleast_2d(np.asarray(a, dtype=float)) for a in forecast_pairs)
    if len(short) < MIN_NMC_PAIRS:
        raise InsufficientSamples(f"NMC needs at least {MIN_NMC_PAIRS} pairs, got {len(short)}")
    if short.shape != long_.shape:
        raise ContractError("forecast pair arrays differ in shape")
    enc = _encoder(encoder)
    d = enc(long_) - enc(short)
    return _floored(0.5 * np.mean(d * d, axis=0), min_var)


def ensemble_cov_diag(encoded_members, min_var=DEFAULT_FLOOR) -> DiagonalCovariance:
    """Unbiased per-dimension sample variance about the ensemble mean."""
    Z = np.atleast_2d(np.asarray(encoded_members, dtype=float))
    if len(Z) < 2:
        raise ContractError("ensemble variance needs at least 2 members")
    return _floored(np.var(Z, axis=0, ddof=1), min_var)


def _o2l_discrepancy(o2l, encoder, states, network, noise_level, rng, sigma_clim, mask_values):
    values, mask = latent.simulate_images(states, network, rng, mask_values,
                                          noise_level, sigma_clim)
    return latent.o2l_apply(o2l, values, mask) - _encoder(encoder)(states)


def clim_latent_r(o2l, encoder, archive_states, network: ObservationNetwork, noise_level: float,
                  rng, sigma_clim, mask_values=None, min_var=DEFAULT_FLOOR) -> DiagonalCovariance:
    """Half the archive-mean squared gap between O2L on simulated observations and E(x)."""
    X = np.atleast_2d(np.asarray(archive_states, dtype=float))
    if len(X) < MIN_ARCHIVE:
        raise InsufficientSamples(f"archive needs at least {MIN_ARCHIVE} states, got {len(X)}")
    d = _o2l_discrepancy(o2l, encoder, X, network, noise_level, rng, sigma_clim, mask_values)
    return _floored(0.5 * np.mean(d * d, axis=0), min_var)


def ensemble_latent_r(o2l, encoder, members, network: ObservationNetwork, mask_values,
                      noise_level: float, rng, sigma_clim, centered: bool = False,
                      min_var=DEFAULT_FLOOR) -> DiagonalCovariance:
    """Flow-dependent R_z from per-member O2L discrepancies.

    By default the squared discrepancies are summed without removing their
    mean and divided by ``N_e - 1``. ``centered=True`` subtracts the member
    mean first, which makes it an ordinary sample variance.
    """
    X = members.members if isinstance(members, EnsembleSet) else members
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) < 2:
        raise ContractError("ensemble R_z needs at least 2 members")
    d = _o2l_discrepancy(o2l, encoder, X, network, noise_level, rng, sigma_clim, mask_values)
    if centered:
        d = d - d.mean(axis=0)
    return _floored(np.sum(d * d, axis=0) / (len(X) - 1), min_var)


def hybrid_blend(clim: DiagonalCovariance, ens: DiagonalCovariance, weight: float) -> DiagonalCovariance:
    if not 0.0 <= weight <= 1.0:
        raise ContractError("blend weight must lie in [0, 1]")
    if len(clim) != len(ens):
        raise ContractError("covariances differ in length")
    if weight == 0.0:
        return clim
    if weight == 1.0:
        return ens
    return DiagonalCovariance(weight * ens.variances + (1.0 - weight) * clim.variances)


def inflate(cov: DiagonalCovariance, factor: float) -> DiagonalCovariance:
    if not factor > 0:
        raise ContractError("inflation factor must be positive")
    return DiagonalCovariance(cov.variances * factor)


def floor(cov: DiagonalCovariance, min_var) -> DiagonalCovariance:
    if np.any(np.asarray(min_var) <= 0):
        raise ContractError("min_var must be positive")
    return DiagonalCovariance(np.maximum(cov.variances, min_var))


# ------------------------------------------------------ time-lagged ensemble

def assemble_time_lagged_ensemble(analysis_archive, config: ModelConfig, valid_time: int,
                                  size: int) -> EnsembleSet:
    """Forecasts from the analyses 1..size intervals before ``valid_time``.

    ``analysis_archive`` maps an interval index to the analysis state there.
    Missing early analyses shrink the ensemble; fewer than two members raises
    :class:`SpinUpRequired`.
    """
    if size < 1:
        raise ContractError("ensemble size must be >= 1")
    members, leads = [], []
    for k in range(1, size + 1):
        x0 = analysis_archive.get(valid_time - k)
        if x0 is None:
            continue
        members.append(advance(x0, k * config.steps_per_da_interval, config))
        leads.append(k)
    if len(members) < min(2, size):
        raise SpinUpRequired(f"only {len(members)} analyses available before t={valid_time}")
    return EnsembleSet(np.array(members), np.array(leads), valid_time)


# ------------------------------------------------------------- model space

def cyclic_distance(n: int) -> np.ndarray:
    i = np.arange(n)
    d = np.abs(i[:, None] - i[None, :])
    return np.minimum(d, n - d)


def gaspari_cohn(distance, radius: float) -> np.ndarray:
    """Fifth-order piecewise rational taper, 1 at distance 0 and 0 from ``radius`` on."""
    d = np.abs(np.asarray(distance, dtype=float))
    if radius == 0:
        return (d == 0).astype(float)
    if np.isinf(radius):
        return np.ones_like(d)
    r = 2.0 * d / radius
    out = np.zeros_like(r)
    a = r <= 1.0
    b = (r > 1.0) & (r < 2.0)
    ra = r[a]
    out[a] = (((-0.25 * ra + 0.5) * ra + 0.625) * ra - 5.0 / 3.0) * ra ** 2 + 1.0
    rb = r[b]
    out[b] = ((((rb / 12.0 - 0.5) * rb + 0.625) * rb + 5.0 / 3.0) * rb - 5.0) * rb + 4.0 - 2.0 / (3.0 * rb)
    return np.clip(out, 0.0, 1.0)


def localize(matrix, radius: float) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    return m * gaspari_cohn(cyclic_distance(m.shape[0]), radius)


def model_space_b(samples, localization_radius: float = 4.0, kind: str = "nmc",
                  ridge: float = 1e-8) -> FullCovariance:
    """Localized full B from NMC pairs or ensemble members.

    ``kind="nmc"``: ``samples`` is ``(x_short, x_long)`` and B is half the mean
    outer product of their difference. ``kind="ensemble"``: ``samples`` is an
    ``(N_e, n)`` array (or :class:`EnsembleSet`) and B is the unbiased sample
    covariance. After tapering, a ridge lifts the smallest eigenvalue to at
    least ``ridge`` times the largest.
    """
    if kind == "nmc":
        short, long_ = (np.atleast_2d(np.asarray(a, dtype=float)) for a in samples)
        if len(short) < MIN_NMC_PAIRS:
            raise InsufficientSamples(f"NMC needs at least {MIN_NMC_PAIRS} pairs")
        d = long_ - short
        raw = 0.5 * d.T @ d / len(d)
    elif kind == "ensemble":
        X = samples.members if isinstance(samples, EnsembleSet) else samples
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if len(X) < 2:
            raise ContractError("ensemble B needs at least 2 members")
        A = X - X.mean(axis=0)
        raw = A.T @ A / (len(X) - 1)
    else:
        raise ContractError(f"unknown kind {kind!r}")
    B = localize(raw, localization_radius)
    B = 0.5 * (B + B.T)
    return FullCovariance(regularize_spd(B, ridge))


def regularize_spd(matrix, ridge: float = 1e-8) -> np.ndarray:
    w = np.linalg.eigvalsh(matrix)
    if not np.all(np.isfinite(w)) or w[-1] <= 0:
        raise EstimationError("covariance has no positive spectrum")
    target = ridge * w[-1]
    shift = max(0.0, target - w[0])
    out = matrix + shift * np.eye(len(matrix))
    if np.linalg.eigvalsh(out)[0] <= 0:
        raise EstimationError("covariance is not positive definite after regularization")
    return out


# ------------------------------------------------------------- diagnostics

@dataclass
class DecorrelationSummary:
    mean_abs_offdiag: float
    n_samples: int
    n_dims: int
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {"mean_abs_offdiag": self.mean_abs_offdiag, "n_samples": self.n_samples,
                "n_dims": self.n_dims, **self.extra}


def latent_decorrelation_report(error_samples, min_samples: int = 100) -> DecorrelationSummary:
    """Mean |Pearson r| over all distinct pairs of dimensions of ``(n_samples, n_dims)``."""
    E = np.asarray(error_samples, dtype=float)
    if E.ndim != 2 or E.shape[1] < 2:
        raise ContractError("need a 2-D sample array with at least 2 dimensions")
    if len(E) < min_samples:
        raise InsufficientSamples(f"need at least {min_samples} samples, got {len(E)}")
    if np.any(E.std(axis=0) == 0):
        raise ContractError("a dimension has zero variance")
    C = np.corrcoef(E, rowvar=False)
    iu = np.triu_indices(E.shape[1], 1)
    return DecorrelationSummary(float(np.mean(np.abs(C[iu]))), len(E), E.shape[1])

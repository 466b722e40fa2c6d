"""Experiment configuration: one dataclass per TOML section, unknown keys rejected."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .assimilation import METHODS, SolverSettings
from .covariance import ENSEMBLE_SIZES, HybridWeights
from .dynamics import ConfigurationError, ModelConfig

MODES = ("idealized_twin", "imperfect_reference")


@dataclass(frozen=True)
class LatentConfig:
    variant: str = "mlp"
    n_z: int = 32
    ae_hidden: int = 64
    o2l_hidden: tuple = (96, 96)
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 2e-4
    o2l_epochs: int = 30
    o2l_learning_rate: float = 2e-4
    o2l_noise_level: float = 0.03
    warmup_fraction: float = 0.05
    validation_fraction: float = 0.1
    archive_size: int = 20_000
    archive_stride: int = 5
    mask_low: float = 0.5
    seed: int = 1
    ae_checkpoint: str = ""
    o2l_checkpoint: str = ""

    def __post_init__(self):
        if self.variant not in ("linear", "mlp"):
            raise ConfigurationError(f"latent.variant must be linear or mlp, got {self.variant!r}")
        if self.n_z < 1:
            raise ConfigurationError("latent.n_z must be positive")
        object.__setattr__(self, "o2l_hidden", tuple(int(h) for h in self.o2l_hidden))
        if not 0 < self.mask_low <= 1:
            raise ConfigurationError("latent.mask_low must lie in (0, 1]")


@dataclass(frozen=True)
class ObservationConfig:
    every: int = 3
    offset: int = 0
    indices: tuple = ()  # explicit grid indices override every/offset
    noise_level: float = 0.03
    withheld_fraction: float = 0.1
    qc_lag: int = 8

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if self.every < 1:
            raise ConfigurationError("observations.every must be >= 1")
        if not self.noise_level > 0:
            raise ConfigurationError("observations.noise_level must be positive")


@dataclass(frozen=True)
class CovarianceConfig:
    ensemble_size: int = 3
    use_ensemble: bool = True
    alpha_ens: float = 0.5
    beta_ens: float = 1.0
    inflation_b: float = 1.0
    inflation_r: float = 1.0
    localization_radius: float = 4.0
    nmc_short: int = 4
    nmc_long: int = 8
    nmc_pairs: int = 500
    r_archive: int = 2000
    floor_fraction: float = 1e-8
    centered_rz: bool = False

    def __post_init__(self):
        if self.ensemble_size not in ENSEMBLE_SIZES:
            raise ConfigurationError(f"covariance.ensemble_size must be one of {ENSEMBLE_SIZES}")
        HybridWeights(self.alpha_ens, self.beta_ens, self.inflation_b, self.inflation_r)
        if not 0 < self.nmc_short < self.nmc_long:
            raise ConfigurationError("need 0 < nmc_short < nmc_long")

    @property
    def weights(self) -> HybridWeights:
        return HybridWeights(self.alpha_ens, self.beta_ens, self.inflation_b, self.inflation_r)


@dataclass(frozen=True)
class MethodConfig:
    name: str = "hloba"
    window_slots: int = 4
    latent_learning_rate: float = 0.05
    model_learning_rate: float = 0.02
    max_iters: int = 500
    patience: int = 20
    min_improvement: float = 1e-8

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigurationError(f"method.name must be one of {METHODS}")
        if self.window_slots < 1:
            raise ConfigurationError("method.window_slots must be >= 1")

    def settings(self) -> SolverSettings | None:
        """Optimizer for the method; ``None`` keeps the solver's own default."""
        if self.name in ("hl3dvar", "hl4dvar"):
            lr = self.latent_learning_rate
        elif self.name == "h4dvar":
            lr = self.model_learning_rate
        else:
            return None
        return SolverSettings(learning_rate=lr, max_iters=self.max_iters,
                              patience=self.patience, min_improvement=self.min_improvement)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "idealized_twin"
    cycles: int = 1000
    horizon: int = 20
    spinup_cycles: int = 20
    seed: int = 0
    truth_forcing: float = 8.2  # used in imperfect_reference mode only
    init_error: float = 0.5     # initial analysis error, in climatological std
    obs_noise_scale: float = 1.0  # 0 gives exact observations with the same assumed R
    aggregation_windows: tuple = (1, 20, 200)
    tuning_cycles: int = 100
    tuning_seed: int = 1000
    tune_alpha: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    tune_beta: tuple = (0.0, 0.5, 1.0)
    tune_inflation: tuple = (1.0, 1.1, 1.3)
    forcing_schedule: tuple = ()  # per-cycle forcing; empty keeps model.forcing

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"experiment.mode must be one of {MODES}")
        if self.cycles < 1 or self.horizon < 1:
            raise ConfigurationError("experiment.cycles and horizon must be >= 1")
        if self.spinup_cycles < 0:
            raise ConfigurationError("experiment.spinup_cycles must be >= 0")
        for name in ("aggregation_windows", "tune_alpha", "tune_beta", "tune_inflation",
                     "forcing_schedule"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.forcing_schedule and len(self.forcing_schedule) != self.cycles:
            raise ConfigurationError("forcing_schedule needs one entry per cycle")


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    observations: ObservationConfig = field(default_factory=ObservationConfig)
    covariance: CovarianceConfig = field(default_factory=CovarianceConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def replace(self, **sections) -> "Config":
        """``cfg.replace(method={"name": "hl3dvar"})`` updates fields within sections."""
        out = {}
        for name, updates in sections.items():
            current = getattr(self, name)
            if not isinstance(updates, dict):
                out[name] = updates
                continue
            _check_keys(type(current), updates, name)
            out[name] = dataclasses.replace(current, **updates)
        return dataclasses.replace(self, **out)

    def to_dict(self) -> dict:
        return {f.name: _plain(dataclasses.asdict(getattr(self, f.name))) for f in fields(self)}


SECTIONS = {"model": ModelConfig, "latent": LatentConfig, "observations": ObservationConfig,
            "covariance": CovarianceConfig, "method": MethodConfig,
            "experiment": ExperimentConfig}


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _check_keys(cls, doc, section):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def from_dict(doc: dict) -> Config:
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown section(s): {', '.join(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        sub = doc.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigurationError(f"[{name}] must be a table")
        _check_keys(cls, sub, name)
        try:
            parts[name] = cls(**sub)
        except TypeError as e:
            raise ConfigurationError(f"[{name}]: {e}") from None
    return Config(**parts)


def load(path) -> Config:
    with open(path, "rb") as fh:
        return from_dict(tomllib.load(fh))


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


def dumps(cfg: Config) -> str:
    """TOML text that :func:`load` reads back to an equal config."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)

"""Cycling twin experiments: setup, the assimilation-forecast loop, evaluation, tuning.

Time is counted in DA intervals. Cycle ``c`` assimilates the observation
slots at intervals ``c*W + 1 .. c*W + W`` (``W`` window slots) and issues a
verification forecast from the analysis at the last slot.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import assimilation as da
from . import covariance as cv
from . import latent
from .config import Config
from .dynamics import ConfigurationError, ModelConfig, advance, nature_run, spin_up
from .metrics import (UndefinedMetric, aggregated_correlation, mean_rowwise_correlation,
                      obs_rmse, pearson, weighted_rmse)
from .observations import (ObservationNetwork, ObservationSet, every_kth, make_network,
                           qc_filter, split_withheld)

log = logging.getLogger(__name__)

STREAMS = {"truth": 1, "obs": 2, "init": 3, "rz": 4, "withheld": 5, "archive": 6,
           "rclim": 7, "nmc": 8, "bootstrap": 9}
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_CYCLES = 10


class ExperimentDiverged(RuntimeError):
    pass


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named generator for one experiment seed."""
    return np.random.default_rng([int(seed), STREAMS[name]])


# ------------------------------------------------------------------ setup

def climatology(model: ModelConfig, n_states: int, stride: int, seed: int) -> np.ndarray:
    """``n_states`` attractor states sampled every ``stride`` DA intervals."""
    x0 = spin_up(model, stream(seed, "archive"))
    run = nature_run(x0, n_states * stride, model)
    return run[stride::stride]


def build_qc_thresholds(reference_run, lag_intervals: int) -> np.ndarray:
    """Per-coordinate mean |x(t) - x(t - lag)| over the run."""
    X = np.asarray(reference_run, dtype=float)
    if len(X) < lag_intervals + 100:
        raise cv.InsufficientSamples(f"need at least lag + 100 = {lag_intervals + 100} states")
    if lag_intervals == 0:
        return np.zeros(X.shape[1])
    return np.mean(np.abs(X[lag_intervals:] - X[:-lag_intervals]), axis=0)


def make_observation_network(cfg: Config, sigma_clim) -> ObservationNetwork:
    oc = cfg.observations
    idx = oc.indices or every_kth(cfg.model.n_x, oc.every, 1.0, oc.offset).observed_indices
    return make_network(idx, sigma_clim, oc.noise_level, cfg.model.n_x)


def train_autoencoder(cfg: Config, archive) -> latent.AutoencoderModel:
    lc = cfg.latent
    if lc.variant == "linear":
        return latent.fit_linear_ae(archive, lc.n_z)
    sched = latent.Schedule(lc.epochs, lc.batch_size, lc.learning_rate, lc.warmup_fraction,
                            lc.validation_fraction)
    return latent.train_mlp_ae(archive, lc.n_z, sched, lc.seed, hidden=lc.ae_hidden)


def train_o2l_network(cfg: Config, ae, archive, sigma_clim) -> latent.O2LModel:
    lc = cfg.latent
    sched = latent.Schedule(lc.o2l_epochs, lc.batch_size, lc.o2l_learning_rate,
                            lc.warmup_fraction, lc.validation_fraction)
    net = make_observation_network(cfg, sigma_clim)
    net = net.with_noise(lc.o2l_noise_level * np.asarray(sigma_clim)[net.observed_indices])
    return latent.train_o2l(ae, archive, net, sched, lc.seed + 1, hidden=lc.o2l_hidden,
                            mask_range=(lc.mask_low, 1.0))


@dataclass
class Artifacts:
    archive: np.ndarray
    sigma_clim: np.ndarray
    ae: latent.AutoencoderModel
    o2l: latent.O2LModel
    network: ObservationNetwork
    latent_var: np.ndarray
    Bz_clim: cv.DiagonalCovariance | None = None
    Rz_clim: cv.DiagonalCovariance | None = None
    B_clim: cv.FullCovariance | None = None
    qc_thresholds: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def min_var(self, cfg: Config) -> np.ndarray:
        return cfg.covariance.floor_fraction * self.latent_var

    def with_network(self, cfg: Config) -> "Artifacts":
        return dataclasses.replace(self, network=make_observation_network(cfg, self.sigma_clim))


def _key(*parts) -> str:
    text = json.dumps(parts, sort_keys=True, default=list)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _section(cfg, name, *keys):
    d = dataclasses.asdict(getattr(cfg, name))
    return {k: d[k] for k in keys} if keys else d


def estimate_r_clim(cfg: Config, art: Artifacts) -> cv.DiagonalCovariance:
    n = min(cfg.covariance.r_archive, len(art.archive))
    rng = stream(cfg.latent.seed, "rclim")
    states = art.archive[rng.choice(len(art.archive), n, replace=False)]
    return cv.clim_latent_r(art.o2l, art.ae, states, art.network, cfg.observations.noise_level,
                            rng, art.sigma_clim, min_var=art.min_var(cfg))


def _nmc_pairs(analyses, short: int, long_: int, model: ModelConfig, n_pairs: int):
    spi = model.steps_per_da_interval
    times = np.arange(len(analyses) - n_pairs, len(analyses))
    if times[0] < long_:
        raise cv.InsufficientSamples("pre-run too short for the requested NMC pairs")
    xs = advance(analyses[times - short], short * spi, model)
    xl = advance(analyses[times - long_], long_ * spi, model)
    return xs, xl


def estimate_covariances(cfg: Config, art: Artifacts, progress=None) -> Artifacts:
    """Climatological R_z, then NMC B_z and model-space B from pre-run analyses.

    Each pre-run cycles its own family's 3D method on a separate truth
    segment with clim-only provisional statistics: B_z = R_z^clim for the
    latent pre-run and a tenth of the localized climatological covariance for
    the model-space one.
    """
    cc = cfg.covariance
    art = dataclasses.replace(art, Rz_clim=estimate_r_clim(cfg, art))
    slots = cfg.method.window_slots
    warm = cfg.experiment.spinup_cycles * slots
    n_cycles = math.ceil((cc.nmc_pairs + cc.nmc_long + warm) / slots)
    pre = cfg.replace(experiment={"cycles": n_cycles, "seed": cfg.latent.seed + 7919,
                                  "mode": "idealized_twin", "forcing_schedule": ()},
                      covariance={"use_ensemble": False})
    provisional = dataclasses.replace(art, Bz_clim=art.Rz_clim)
    clim_cov = np.cov(art.archive, rowvar=False)
    B0 = cv.regularize_spd(cv.localize(0.1 * clim_cov, cc.localization_radius))
    provisional = dataclasses.replace(provisional, B_clim=cv.FullCovariance(B0))

    lat = run_cycling_experiment(pre.replace(method={"name": "hloba"}), provisional, progress)
    xs, xl = _nmc_pairs(lat.analyses, cc.nmc_short, cc.nmc_long, cfg.model, cc.nmc_pairs)
    Bz = cv.nmc_latent_b(art.ae, (xs, xl), min_var=art.min_var(cfg))

    mod = run_cycling_experiment(pre.replace(method={"name": "h3dvar"}), provisional, progress)
    xs, xl = _nmc_pairs(mod.analyses, cc.nmc_short, cc.nmc_long, cfg.model, cc.nmc_pairs)
    B = cv.model_space_b((xs, xl), cc.localization_radius, kind="nmc")
    info = dict(art.info, prerun_latent_wrmse=lat.mean_analysis_wrmse(),
                prerun_model_wrmse=mod.mean_analysis_wrmse())
    return dataclasses.replace(art, Bz_clim=Bz, B_clim=B, info=info)


def prepare(cfg: Config, cache_dir=None, progress=None) -> Artifacts:
    """Climatology, trained networks and climatological covariances.

    With ``cache_dir`` every stage is stored under a hash of the settings it
    depends on and reused on later calls. Explicit checkpoint paths in
    ``[latent]`` take precedence over training.
    """
    lc = cfg.latent
    k_arch = _key(_section(cfg, "model"), lc.archive_size, lc.archive_stride, lc.seed)
    k_ae = _key(k_arch, _section(cfg, "latent", "variant", "n_z", "ae_hidden", "epochs",
                                 "batch_size", "learning_rate", "warmup_fraction",
                                 "validation_fraction"))
    k_o2l = _key(k_ae, _section(cfg, "latent"), _section(cfg, "observations", "every", "offset",
                                                         "indices"))
    k_cov = _key(k_o2l, _section(cfg, "observations"),
                 _section(cfg, "covariance", "localization_radius", "nmc_short", "nmc_long",
                          "nmc_pairs", "r_archive", "floor_fraction"),
                 cfg.method.window_slots, cfg.experiment.spinup_cycles)

    def cached(name, key):
        return os.path.join(cache_dir, f"{name}-{key}") if cache_dir else None

    path = cached("archive", k_arch)
    if path and os.path.exists(path + ".npy"):
        archive = np.load(path + ".npy")
    else:
        archive = climatology(cfg.model, lc.archive_size, lc.archive_stride, lc.seed)
        if path:
            os.makedirs(cache_dir, exist_ok=True)
            np.save(path + ".npy", archive)
    sigma = archive.std(axis=0)

    def model_stage(name, key, checkpoint, build):
        if checkpoint:
            return latent.load(checkpoint)
        p = cached(name, key)
        if p and os.path.exists(p + ".json"):
            return latent.load(p + ".json")
        m = build()
        if p:
            latent.save(m, p + ".json")
        return m

    ae = model_stage("ae", k_ae, lc.ae_checkpoint, lambda: train_autoencoder(cfg, archive))
    o2l = model_stage("o2l", k_o2l, lc.o2l_checkpoint,
                      lambda: train_o2l_network(cfg, ae, archive, sigma))
    if o2l.ae_fingerprint != ae.fingerprint():
        raise ConfigurationError("O2L checkpoint belongs to a different autoencoder")
    art = Artifacts(archive, sigma, ae, o2l, make_observation_network(cfg, sigma),
                    np.var(latent.encode(ae, archive), axis=0))
    if cfg.experiment.mode == "imperfect_reference":
        art.qc_thresholds = build_qc_thresholds(archive[: 2000 + cfg.observations.qc_lag],
                                                cfg.observations.qc_lag)
    p = cached("cov", k_cov)
    if p and os.path.exists(p + ".json"):
        with open(p + ".json") as fh:
            doc = json.load(fh)
        return dataclasses.replace(art, **{k: cv.covariance_from_json(json.dumps(v))
                                           for k, v in doc.items()})
    art = estimate_covariances(cfg, art, progress)
    if p:
        save_covariances(art, p + ".json")
    return art


def save_covariances(art: Artifacts, path) -> None:
    doc = {k: json.loads(getattr(art, k).to_json()) for k in ("Bz_clim", "Rz_clim", "B_clim")}
    with open(path, "w") as fh:
        json.dump(doc, fh)


# ---------------------------------------------------------------- records

@dataclass
class CycleRecord:
    cycle: int
    time: int
    analysis_wrmse: float
    background_wrmse: float
    fc_err: np.ndarray
    mean_diag_std: float
    solver_iters: int
    flags: tuple
    abs_error: np.ndarray
    diag_std: np.ndarray | None
    ooa_wrmse: float
    truth_wrmse: float
    # latent-space samples at the last slot: z_b, z_o, z_t, Bz_clim, Bz_ens, Rz_clim, Rz_ens
    latent: dict = field(default_factory=dict)
    # model-space errors at the last slot: background and decoded O2L output
    model_errors: dict = field(default_factory=dict)


@dataclass
class RunResult:
    config: Config
    records: list
    analyses: np.ndarray
    forcing: np.ndarray

    def mean_analysis_wrmse(self, spinup: int | None = None) -> float:
        s = self.config.experiment.spinup_cycles if spinup is None else spinup
        return float(np.mean([r.analysis_wrmse for r in self.records[s:]]))


# ------------------------------------------------------------- the cycle

class _Cycler:
    """Mutable state of one cycling run; use :func:`run_cycling_experiment`."""

    def __init__(self, cfg: Config, art: Artifacts):
        if art.Bz_clim is None and cfg.method.name in ("hloba", "hl3dvar", "hl4dvar"):
            raise ConfigurationError("latent methods need B_z^clim; run estimate-cov first")
        self.cfg, self.art = cfg, art
        ex, oc = cfg.experiment, cfg.observations
        self.W = cfg.method.window_slots
        self.T = ex.cycles * self.W
        self.n_int = self.T + ex.horizon
        seed = ex.seed
        per_cycle = (np.asarray(ex.forcing_schedule, dtype=float) if ex.forcing_schedule
                     else np.full(ex.cycles, cfg.model.forcing))
        # forcing of the transition into interval t (index 0 unused)
        cyc = np.clip((np.arange(self.n_int + 1) - 1) // self.W, 0, ex.cycles - 1)
        self.forcing = per_cycle[cyc]
        offset = ex.truth_forcing - cfg.model.forcing if ex.mode == "imperfect_reference" else 0.0
        self.truth = self._truth_run(stream(seed, "truth"), offset)
        self.network = art.network
        noise = stream(seed, "obs").standard_normal((self.n_int + 1, len(self.network)))
        self.obs_values = (self.truth[:, self.network.observed_indices]
                           + ex.obs_noise_scale * noise * self.network.noise_std)
        self.rz_rng = stream(seed, "rz")
        init = stream(seed, "init").standard_normal(cfg.model.n_x)
        self.analyses = np.full((self.T + 1, cfg.model.n_x), np.nan)
        self.analyses[0] = self.truth[0] + ex.init_error * art.sigma_clim * init
        self.archive = {0: self.analyses[0]}
        self.settings = cfg.method.settings()
        self.min_var = art.min_var(cfg)
        self.clim_sigma = float(np.mean(art.sigma_clim))

    def _truth_run(self, rng, offset):
        m = self.cfg.model
        x = spin_up(m.with_forcing(self.forcing[1] + offset), rng)
        out = np.empty((self.n_int + 1, m.n_x))
        out[0] = x
        for t in range(1, self.n_int + 1):
            x = advance(x, m.steps_per_da_interval, m.with_forcing(self.forcing[t] + offset))
            out[t] = x
        return out

    def model_at(self, t) -> ModelConfig:
        return self.cfg.model.with_forcing(self.forcing[min(t, self.n_int)])

    # -- observations
    def observations(self, t):
        """``(assimilated, withheld, full)`` sets at interval ``t``."""
        mask = np.zeros(self.cfg.model.n_x)
        mask[self.network.observed_indices] = 1.0
        full = ObservationSet(self.network, self.obs_values[t], mask, t)
        if self.cfg.experiment.mode != "imperfect_reference":
            return full, None, full
        split_rng = stream(self.cfg.experiment.seed, "withheld")  # same partition every time
        kept, held = split_withheld(full, self.cfg.observations.withheld_fraction, split_rng)
        kept = qc_filter(kept, self.truth[t], self.art.qc_thresholds)
        return kept, held, full

    # -- covariances
    def ensemble(self, t, model):
        if not self.cfg.covariance.use_ensemble:
            return None
        try:
            return cv.assemble_time_lagged_ensemble(self.archive, model, t,
                                                    self.cfg.covariance.ensemble_size)
        except cv.SpinUpRequired:
            return None

    def latent_stats(self, ens, obs, want_r):
        cc, art = self.cfg.covariance, self.art
        out = {"bz_clim": art.Bz_clim.variances, "rz_clim": art.Rz_clim.variances}
        Bz, Rz = art.Bz_clim, art.Rz_clim
        if ens is not None:
            bz_ens = cv.ensemble_cov_diag(latent.encode(art.ae, ens.members), self.min_var)
            Bz = cv.hybrid_blend(Bz, bz_ens, cc.alpha_ens)
            out["bz_ens"] = bz_ens.variances
            if want_r:
                mask = obs.mask[self.network.observed_indices]
                rz_ens = cv.ensemble_latent_r(art.o2l, art.ae, ens, self.network, mask,
                                              self.cfg.observations.noise_level, self.rz_rng,
                                              art.sigma_clim, centered=cc.centered_rz,
                                              min_var=self.min_var)
                Rz = cv.hybrid_blend(Rz, rz_ens, cc.beta_ens)
                out["rz_ens"] = rz_ens.variances
        out["Bz"] = cv.inflate(Bz, cc.inflation_b)
        out["Rz"] = cv.inflate(Rz, cc.inflation_r)
        return out

    def model_b(self, ens):
        cc, B = self.cfg.covariance, self.art.B_clim
        Be = None
        if ens is not None and cc.alpha_ens > 0:
            try:
                Be = cv.model_space_b(ens, cc.localization_radius, kind="ensemble")
            except cv.EstimationError:
                pass  # members coincide, so the ensemble carries no spread
        if Be is None:
            m = B.matrix
        else:
            m = (1 - cc.alpha_ens) * B.matrix + cc.alpha_ens * Be.matrix
        return cv.FullCovariance(cv.regularize_spd(cc.inflation_b * m))

    # -- methods
    def solve_slot(self, t, x_b, obs, model, stash):
        name, art = self.cfg.method.name, self.art
        ens = self.ensemble(t, model)
        if name == "h3dvar":
            res = da.solve_3dvar(da.DAProblem([obs], model, x_b=x_b, B=self.model_b(ens),
                                              settings=self.settings))
        else:
            st = self.latent_stats(ens, obs, want_r=(name == "hloba"))
            stash.clear()
            stash.update(st)
            p = da.DAProblem([obs], model, x_b=x_b, Bz=st["Bz"], Rz=st["Rz"], ae=art.ae,
                             o2l=art.o2l, settings=self.settings)
            res = da.hloba_analysis(p) if name == "hloba" else da.solve_l3dvar(p)
        self.archive[t] = res.x_a
        return res

    def run_cycle(self, c):
        W, name = self.W, self.cfg.method.name
        t0, t_end = c * W + 1, c * W + W
        model = self.model_at(t0)
        x_b = advance(self.archive[t0 - 1], model.steps_per_da_interval, model)
        sets = [self.observations(t) for t in range(t0, t_end + 1)]
        assim = [s[0] for s in sets]
        stash = {}
        if name in ("hloba", "h3dvar", "hl3dvar"):
            def slot(k, xb, obs):
                return self.solve_slot(t0 + k, xb, obs, model, stash)
            res = da.sequential_window(slot, x_b, assim, model)
            xb_end = res.slots[-1].x_b if res.slots[-1].x_b is not None else x_b
        else:
            ens = self.ensemble(t0, model)
            if name == "h4dvar":
                p = da.DAProblem(assim, model, x_b=x_b, B=self.model_b(ens), settings=self.settings)
                res = da.solve_4dvar(p)
            else:
                st = self.latent_stats(ens, assim[0], want_r=False)
                p = da.DAProblem(assim, model, x_b=x_b, Bz=st["Bz"], ae=self.art.ae,
                                 settings=self.settings)
                res = da.solve_l4dvar(p)
            for k, x in enumerate(res.trajectory):
                self.archive[t0 + k] = x
            xb_end = advance(x_b, (W - 1) * model.steps_per_da_interval, model)
        for t in range(t0, t_end + 1):
            self.analyses[t] = self.archive[t]
        for t in [t for t in self.archive if t < t_end - 10]:
            del self.archive[t]
        return self.record(c, t_end, res, xb_end, sets[-1], model, stash)

    def record(self, c, t, res, x_b, sets, model, stash):
        art, ex = self.art, self.cfg.experiment
        assim, held, full = sets
        x_a, truth = self.archive[t], self.truth[t]
        fc = x_a
        fc_err = np.empty(ex.horizon)
        for k in range(ex.horizon):
            fc = advance(fc, model.steps_per_da_interval, model)
            if ex.mode == "imperfect_reference":
                _, _, full_k = self.observations(t + k + 1)
                fc_err[k] = obs_rmse(fc, full_k)
            else:
                fc_err[k] = weighted_rmse(fc, self.truth[t + k + 1])
        truth_err = weighted_rmse(x_a, truth)
        err = truth_err if ex.mode != "imperfect_reference" else obs_rmse(x_a, held)
        diag = None if res.model_variance is None else np.sqrt(res.model_variance)
        z_o = latent.o2l_forward(art.o2l, assim)
        ooa = latent.decode(art.ae, z_o)
        lat = {"z_b": latent.encode(art.ae, x_b), "z_o": z_o, "z_t": latent.encode(art.ae, truth)}
        lat.update({k: v for k, v in stash.items() if k not in ("Bz", "Rz")})
        return CycleRecord(
            cycle=c, time=t, analysis_wrmse=err, background_wrmse=weighted_rmse(x_b, truth),
            fc_err=fc_err, mean_diag_std=math.nan if diag is None else float(diag.mean()),
            solver_iters=int(res.iterations), flags=tuple(res.flags),
            abs_error=np.abs(x_a - truth), diag_std=diag,
            ooa_wrmse=weighted_rmse(ooa, truth), truth_wrmse=truth_err, latent=lat,
            model_errors={"background": x_b - truth, "observation": ooa - truth})


def run_cycling_experiment(cfg: Config, art: Artifacts, progress=None) -> RunResult:
    """Cycle the configured method; deterministic for a given config and artifacts.

    Raises :class:`ExperimentDiverged` when the analysis error exceeds ten
    times the mean climatological std for ten consecutive cycles.
    """
    cy = _Cycler(cfg, art)
    records, bad = [], 0
    for c in range(cfg.experiment.cycles):
        rec = cy.run_cycle(c)
        records.append(rec)
        bad = bad + 1 if rec.truth_wrmse > DIVERGENCE_FACTOR * cy.clim_sigma else 0
        if bad >= DIVERGENCE_CYCLES:
            raise ExperimentDiverged(f"{cfg.method.name} diverged at cycle {c}")
        if progress:
            progress(c, rec)
    return RunResult(cfg, records, cy.analyses, cy.forcing)


# -------------------------------------------------------------- evaluation

def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetric:
        return None


def evaluate(records, aggregation_windows=(1, 20, 200), spinup: int = 20) -> dict:
    """Aggregate errors, uncertainty calibration and decorrelation over a run.

    The first ``spinup`` cycles are excluded everywhere.
    """
    recs = records[spinup:]
    if not recs:
        raise UndefinedMetric("no cycles left after the spin-up exclusion")
    for w in aggregation_windows:
        if w > len(recs):
            raise UndefinedMetric(f"aggregation window {w} exceeds the {len(recs)} evaluated cycles")
    fc = np.array([r.fc_err for r in recs])
    rep = {
        "spinup_excluded": spinup,
        "n_cycles": len(recs),
        "mean_analysis_wrmse": float(np.mean([r.analysis_wrmse for r in recs])),
        "mean_background_wrmse": float(np.mean([r.background_wrmse for r in recs])),
        "mean_ooa_wrmse": float(np.mean([r.ooa_wrmse for r in recs])),
        "mean_forecast_error": fc.mean(axis=0).tolist(),
        "forecast_error_at_horizon": float(fc[:, -1].mean()),
        "mean_solver_iters": float(np.mean([r.solver_iters for r in recs])),
        "flagged_cycles": int(sum(1 for r in recs if r.flags)),
    }
    if all(r.diag_std is not None for r in recs):
        E = np.array([r.abs_error for r in recs])
        S = np.array([r.diag_std for r in recs])
        rep["rho_x"] = {str(w): _safe(aggregated_correlation, E, S, w) for w in aggregation_windows}
        rep["mean_diag_std"] = float(S.mean())
    rep["latent_calibration"] = latent_calibration(recs)
    rep["decorrelation"] = decorrelation(recs)
    return rep


def latent_calibration(recs) -> dict:
    """Mean per-cycle correlation across latent dimensions between squared error and variance."""
    out = {}
    for which, err_key in (("zb", "z_b"), ("zo", "z_o")):
        for src in ("clim", "ens"):
            key = f"{'bz' if which == 'zb' else 'rz'}_{src}"
            rows = [r for r in recs if key in r.latent]
            if not rows:
                out[f"rho_{which}_{src}"] = None
                continue
            sq = np.array([(r.latent[err_key] - r.latent["z_t"]) ** 2 for r in rows])
            var = np.array([r.latent[key] for r in rows])
            out[f"rho_{which}_{src}"] = _safe(mean_rowwise_correlation, sq, var)
    return out


def decorrelation(recs) -> dict:
    out = {}
    for name, lat_key in (("background", "z_b"), ("observation", "z_o")):
        zl = np.array([r.latent[lat_key] - r.latent["z_t"] for r in recs])
        xm = np.array([r.model_errors[name] for r in recs])
        for space, samples in (("latent", zl), ("model", xm)):
            try:
                out[f"{space}_{name}"] = cv.latent_decorrelation_report(samples).mean_abs_offdiag
            except (cv.InsufficientSamples, cv.ContractError):
                out[f"{space}_{name}"] = None
    return out


# ------------------------------------------------------------------- output

def cycles_csv_rows(records, horizon):
    header = (["cycle", "analysis_wrmse"] + [f"fc_err_lead_{k}" for k in range(1, horizon + 1)]
              + ["mean_diag_std", "solver_iters", "flags"])
    rows = [header]
    for r in records:
        rows.append([r.cycle, repr(float(r.analysis_wrmse))]
                    + [repr(float(v)) for v in r.fc_err]
                    + [repr(float(r.mean_diag_std)), r.solver_iters, ";".join(r.flags)])
    return rows


def write_cycles_csv(records, path, horizon: int) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(cycles_csv_rows(records, horizon))


def save_records(records, path) -> None:
    """Per-cycle arrays needed to re-evaluate a run, as a compressed npz."""
    arrays = {
        "cycle": np.array([r.cycle for r in records]),
        "time": np.array([r.time for r in records]),
        "analysis_wrmse": np.array([r.analysis_wrmse for r in records]),
        "background_wrmse": np.array([r.background_wrmse for r in records]),
        "truth_wrmse": np.array([r.truth_wrmse for r in records]),
        "ooa_wrmse": np.array([r.ooa_wrmse for r in records]),
        "fc_err": np.array([r.fc_err for r in records]),
        "mean_diag_std": np.array([r.mean_diag_std for r in records]),
        "solver_iters": np.array([r.solver_iters for r in records]),
        "flags": np.array([";".join(r.flags) for r in records]),
        "abs_error": np.array([r.abs_error for r in records]),
        "model_err_background": np.array([r.model_errors["background"] for r in records]),
        "model_err_observation": np.array([r.model_errors["observation"] for r in records]),
    }
    if all(r.diag_std is not None for r in records):
        arrays["diag_std"] = np.array([r.diag_std for r in records])
    for key in records[0].latent:
        if all(key in r.latent for r in records):
            arrays["latent_" + key] = np.array([r.latent[key] for r in records])
    np.savez_compressed(path, **arrays)


def load_records(path) -> list:
    d = np.load(path)
    lat_keys = [k[len("latent_"):] for k in d.files if k.startswith("latent_")]
    out = []
    for i in range(len(d["cycle"])):
        flags = str(d["flags"][i])
        out.append(CycleRecord(
            cycle=int(d["cycle"][i]), time=int(d["time"][i]),
            analysis_wrmse=float(d["analysis_wrmse"][i]),
            background_wrmse=float(d["background_wrmse"][i]), fc_err=d["fc_err"][i],
            mean_diag_std=float(d["mean_diag_std"][i]), solver_iters=int(d["solver_iters"][i]),
            flags=tuple(flags.split(";")) if flags else (), abs_error=d["abs_error"][i],
            diag_std=d["diag_std"][i] if "diag_std" in d.files else None,
            ooa_wrmse=float(d["ooa_wrmse"][i]), truth_wrmse=float(d["truth_wrmse"][i]),
            latent={k: d["latent_" + k][i] for k in lat_keys},
            model_errors={"background": d["model_err_background"][i],
                          "observation": d["model_err_observation"][i]}))
    return out


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


# ----------------------------------------------------------- paired configs

def config_differences(a: Config, b: Config) -> list:
    da_, db = a.to_dict(), b.to_dict()
    return sorted(f"{s}.{k}" for s in da_ for k in da_[s] if da_[s][k] != db[s][k])


def check_paired(a: Config, b: Config, factors) -> None:
    """Refuse a comparison whose configs differ outside the declared factors."""
    declared = {factors} if isinstance(factors, str) else set(factors)
    extra = [d for d in config_differences(a, b) if d not in declared]
    if extra:
        raise ConfigurationError(f"paired configs also differ in {', '.join(extra)}")


def paired_variants(base: Config, factor: str, values) -> list:
    """One config per value of ``section.key``, everything else shared."""
    section, key = factor.split(".")
    out = [base.replace(**{section: {key: v}}) for v in values]
    for c in out[1:]:
        check_paired(out[0], c, factor)
    return out


# ------------------------------------------------------------------ tuning

@dataclass
class TuningResult:
    best: dict
    weights: cv.HybridWeights
    settings: da.SolverSettings | None
    table: list
    tuning_cycles: int
    tuning_seed: int

    def as_dict(self):
        return {"best": self.best, "weights": dataclasses.asdict(self.weights),
                "settings": None if self.settings is None else dataclasses.asdict(self.settings),
                "table": self.table, "tuning_cycles": self.tuning_cycles,
                "tuning_seed": self.tuning_seed}


def default_grid(cfg: Config) -> list:
    ex = cfg.experiment
    betas = ex.tune_beta if cfg.method.name == "hloba" else (cfg.covariance.beta_ens,)
    return [{"alpha_ens": a, "beta_ens": b, "inflation_b": i}
            for a in ex.tune_alpha for b in betas for i in ex.tune_inflation]


def tune(cfg: Config, art: Artifacts, grid=None, tuning_cycles: int | None = None,
         progress=None) -> TuningResult:
    """Grid search over covariance settings on a separate tuning segment.

    Scores are the mean forecast error at the verification horizon; ties keep
    the earliest grid point.
    """
    grid = default_grid(cfg) if grid is None else list(grid)
    if not grid:
        raise cv.ContractError("tuning grid is empty")
    n = tuning_cycles or cfg.experiment.tuning_cycles
    spin = min(cfg.experiment.spinup_cycles, n // 5)
    base = cfg.replace(experiment={"cycles": n, "seed": cfg.experiment.tuning_seed,
                                   "forcing_schedule": ()})
    table, best = [], None
    for point in grid:
        run = run_cycling_experiment(base.replace(covariance=dict(point)), art)
        score = float(np.mean([r.fc_err[-1] for r in run.records[spin:]]))
        table.append({"params": dict(point), "score": score,
                      "analysis_wrmse": run.mean_analysis_wrmse(spin)})
        if best is None or score < best[1]:
            best = (dict(point), score)
        if progress:
            progress(point, score)
    chosen = base.replace(covariance=best[0])
    return TuningResult(best[0], chosen.covariance.weights, chosen.method.settings(), table,
                        n, cfg.experiment.tuning_seed)


# ------------------------------------------------------------ regime drift

def alternating_schedule(cycles: int, block: int, low: float = 8.0, high: float = 10.0) -> tuple:
    return tuple(low if (c // block) % 2 == 0 else high for c in range(cycles))


def regime_drift_experiment(cfg: Config, art: Artifacts, forcing_schedule, progress=None) -> dict:
    """Run under a per-cycle forcing schedule and compare block means.

    Blocks are maximal runs of equal forcing. Reports per-block mean diagnosed
    std and realized analysis error, and their correlation when at least three
    blocks exist.
    """
    sched = tuple(float(f) for f in forcing_schedule)
    run_cfg = cfg.replace(experiment={"forcing_schedule": sched, "cycles": len(sched)})
    run = run_cycling_experiment(run_cfg, art, progress)
    spin = cfg.experiment.spinup_cycles
    rep = evaluate(run.records, tuple(w for w in cfg.experiment.aggregation_windows
                                      if w <= len(sched) - spin), spin)
    blocks, start = [], 0
    for c in range(1, len(sched) + 1):
        if c == len(sched) or sched[c] != sched[start]:
            recs = [r for r in run.records[start:c] if r.cycle >= spin]
            if recs:
                blocks.append({"start": start, "end": c, "forcing": sched[start],
                               "mean_error": float(np.mean([r.analysis_wrmse for r in recs])),
                               "mean_diag_std": float(np.mean([r.mean_diag_std for r in recs]))})
            start = c
    rep["forcing_schedule"] = list(sched)
    rep["blocks"] = blocks
    rep["block_correlation"] = None
    if len(blocks) >= 3:
        rep["block_correlation"] = _safe(pearson, [b["mean_diag_std"] for b in blocks],
                                         [b["mean_error"] for b in blocks])
    return rep

"""Point observations on the Lorenz-96 grid: H, synthetic draws, QC, withheld split."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import ConfigurationError


@dataclass(frozen=True, eq=False)
class ObservationNetwork:
    observed_indices: np.ndarray
    noise_std: np.ndarray
    n_x: int

    def __post_init__(self):
        idx = np.asarray(self.observed_indices, dtype=int)
        std = np.broadcast_to(np.asarray(self.noise_std, dtype=float), idx.shape).copy()
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_x):
            raise ConfigurationError(f"observed index out of range [0, {self.n_x})")
        if np.any(np.diff(idx) <= 0):
            raise ConfigurationError("observed indices must be sorted and unique")
        if np.any(std <= 0):
            raise ConfigurationError("noise_std must be positive")
        object.__setattr__(self, "observed_indices", idx)
        object.__setattr__(self, "noise_std", std)

    def __len__(self):
        return self.observed_indices.size

    def subset(self, positions) -> "ObservationNetwork":
        """Network restricted to the given positions (not grid indices)."""
        pos = np.asarray(positions, dtype=int)
        return ObservationNetwork(self.observed_indices[pos], self.noise_std[pos], self.n_x)

    def with_noise(self, noise_std) -> "ObservationNetwork":
        return ObservationNetwork(self.observed_indices, noise_std, self.n_x)


def every_kth(n_x: int, k: int, noise_std=1.0, offset: int = 0) -> ObservationNetwork:
    idx = np.arange(offset, n_x, k)
    return ObservationNetwork(idx, noise_std, n_x)


def make_network(indices, sigma_clim, noise_level: float, n_x: int) -> ObservationNetwork:
    """Network whose error std is ``noise_level`` times the climatological std."""
    idx = np.asarray(sorted(set(int(i) for i in indices)), dtype=int)
    sigma = np.asarray(sigma_clim, dtype=float)
    return ObservationNetwork(idx, noise_level * sigma[idx], n_x)


@dataclass
class ObservationSet:
    """Values at every network point plus a dense quality mask.

    Points removed by QC stay in the network with value 0 and mask 0.
    """

    network: ObservationNetwork
    values: np.ndarray
    mask: np.ndarray
    cycle_time: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        if self.values.shape != (len(self.network),):
            raise ConfigurationError("values must have one entry per observed index")
        if self.mask.shape != (self.network.n_x,):
            raise ConfigurationError("mask must cover the whole grid")

    @property
    def active(self) -> np.ndarray:
        """Positions (into the network) that carry a usable observation."""
        return np.flatnonzero(self.mask[self.network.observed_indices] > 0)

    @property
    def active_indices(self) -> np.ndarray:
        return self.network.observed_indices[self.active]

    @property
    def active_values(self) -> np.ndarray:
        return self.values[self.active]

    @property
    def active_std(self) -> np.ndarray:
        return self.network.noise_std[self.active]

    def image(self):
        """Dense ``(values, mask)`` on the grid; unobserved points are 0/0."""
        n = self.network.n_x
        dense = np.zeros(n)
        m = self.mask[self.network.observed_indices]
        dense[self.network.observed_indices] = np.where(m > 0, self.values, 0.0)
        return dense, self.mask.copy()


def apply_H(state, network: ObservationNetwork) -> np.ndarray:
    x = np.asarray(state, dtype=float)
    if x.shape[-1] != network.n_x:
        raise ConfigurationError("state length does not match the network grid")
    return x[..., network.observed_indices]


def synthesize_observations(truth, network: ObservationNetwork, rng: np.random.Generator,
                            cycle_time: int = 0) -> ObservationSet:
    values = apply_H(truth, network) + network.noise_std * rng.standard_normal(len(network))
    mask = np.zeros(network.n_x)
    mask[network.observed_indices] = 1.0
    return ObservationSet(network, values, mask, cycle_time)


def qc_filter(obs: ObservationSet, reference, thresholds) -> ObservationSet:
    """Reject points whose departure from ``reference`` exceeds the threshold."""
    idx = obs.network.observed_indices
    dep = np.abs(obs.values - np.asarray(reference, dtype=float)[idx])
    reject = dep > np.asarray(thresholds, dtype=float)[idx]
    values = np.where(reject, 0.0, obs.values)
    mask = obs.mask.copy()
    mask[idx[reject]] = 0.0
    return replace(obs, values=values, mask=mask)


def withheld_count(n: int, fraction: float) -> int:
    return int(math.floor(fraction * n + 0.5))


def split_withheld(obs: ObservationSet, fraction: float, rng: np.random.Generator):
    """Partition the network into assimilated and withheld subsets.

    The withheld count is ``fraction * n`` rounded half up. Pass a generator
    seeded identically every cycle to keep the partition fixed.
    """
    if not 0 <= fraction < 1:
        raise ConfigurationError("fraction must lie in [0, 1)")
    n = len(obs.network)
    k = withheld_count(n, fraction)
    held = np.sort(rng.permutation(n)[:k])
    kept = np.setdiff1d(np.arange(n), held)
    return _restrict(obs, kept), _restrict(obs, held)


def _restrict(obs, positions):
    net = obs.network.subset(positions)
    mask = np.zeros(obs.network.n_x)
    mask[net.observed_indices] = obs.mask[net.observed_indices]
    return ObservationSet(net, obs.values[positions], mask, obs.cycle_time)


CSV_COLUMNS = ("cycle_time", "index", "value", "mask", "withheld")


def write_observations_csv(path, entries) -> None:
    """``entries`` is an iterable of ``(ObservationSet, withheld_flag)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for obs, held in entries:
            for j, i in enumerate(obs.network.observed_indices):
                w.writerow([obs.cycle_time, int(i), repr(float(obs.values[j])),
                            repr(float(obs.mask[i])), int(bool(held))])


def read_observations_csv(path, network: ObservationNetwork):
    """Inverse of :func:`write_observations_csv`; returns ``{(cycle, withheld): ObservationSet}``."""
    rows = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            key = (int(r["cycle_time"]), bool(int(r["withheld"])))
            rows.setdefault(key, []).append((int(r["index"]), float(r["value"]), float(r["mask"])))
    out = {}
    pos_of = {int(i): p for p, i in enumerate(network.observed_indices)}
    for (t, held), pts in rows.items():
        pts.sort()
        positions = [pos_of[i] for i, _, _ in pts]
        net = network.subset(positions)
        mask = np.zeros(network.n_x)
        for i, _, m in pts:
            mask[i] = m
        out[(t, held)] = ObservationSet(net, [v for _, v, _ in pts], mask, t)
    return out

#!/usr/bin/env python
"""Reconstruction and observation-only analysis error against latent size and network type.

Errors are weighted RMSE on held-out climatological states, divided by the
mean climatological std. Prints one row per (variant, n_z).

    python scripts/latent_diagnostics.py --nz 12 24 32 --variants linear mlp
"""
import argparse

import numpy as np

from hloba import harness, latent
from hloba.config import Config
from hloba.metrics import weighted_rmse
from hloba.observations import synthesize_observations


def scores(cfg, art, n_test):
    truth = harness.climatology(cfg.model, n_test, cfg.latent.archive_stride,
                                seed=cfg.latent.seed + 99)
    rng = np.random.default_rng(7)
    scale = float(np.mean(art.sigma_clim))
    clim = art.archive.mean(axis=0)
    rec = np.mean([weighted_rmse(latent.decode(art.ae, latent.encode(art.ae, x)), x)
                   for x in truth])
    ooa = np.mean([weighted_rmse(latent.decode(art.ae, latent.o2l_forward(
        art.o2l, synthesize_observations(x, art.network, rng))), x) for x in truth])
    base = np.mean([weighted_rmse(clim, x) for x in truth])
    return rec / scale, ooa / scale, base / scale


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--nz", type=int, nargs="+", default=[12, 24, 32])
    p.add_argument("--variants", nargs="+", default=["linear", "mlp"],
                   choices=["linear", "mlp"])
    p.add_argument("--cache", default=".hloba-cache")
    p.add_argument("--test-states", type=int, default=1000)
    args = p.parse_args()

    print(f"{'variant':8s} {'n_z':>4s} {'recon':>7s} {'ooa':>7s} {'clim':>7s}")
    for variant in args.variants:
        for n_z in args.nz:
            cfg = Config().replace(latent={"variant": variant, "n_z": n_z})
            art = harness.prepare(cfg, args.cache)
            rec, ooa, base = scores(cfg, art, args.test_states)
            print(f"{variant:8s} {n_z:4d} {rec:7.3f} {ooa:7.3f} {base:7.3f}")


if __name__ == "__main__":
    main()

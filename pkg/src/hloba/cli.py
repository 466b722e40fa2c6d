"""Command-line entry point: ``hloba <subcommand> [--config F] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import harness, latent
from .checks import gradient_suite

log = logging.getLogger("hloba")


def _load_config(args) -> config_mod.Config:
    cfg = config_mod.load(args.config) if args.config else config_mod.Config()
    if args.seed is not None:
        cfg = cfg.replace(experiment={"seed": args.seed})
    return cfg


def _cache(args):
    return args.cache or os.path.join(args.out, "cache")


def _progress_every(n):
    def report(c, rec):
        if (c + 1) % n == 0:
            log.info("cycle %d  analysis %.4f", c + 1, rec.analysis_wrmse)
    return report


def cmd_train_ae(args, cfg):
    lc = cfg.latent
    archive = harness.climatology(cfg.model, lc.archive_size, lc.archive_stride, lc.seed)
    ae = harness.train_autoencoder(cfg, archive)
    path = os.path.join(args.out, "ae.json")
    latent.save(ae, path)
    rec = latent.decode(ae, latent.encode(ae, archive))
    rel = float(np.sqrt(np.mean(((rec - archive) / archive.std(axis=0)) ** 2)))
    harness.write_json({"checkpoint": path, "reconstruction_rel_rmse": rel,
                        **{k: v for k, v in ae.info.items() if k != "loss_history"}},
                       os.path.join(args.out, "ae_report.json"))
    print(f"wrote {path} (reconstruction rmse {rel:.3f} of climatological std)")


def cmd_train_o2l(args, cfg):
    lc = cfg.latent
    ae_path = lc.ae_checkpoint or os.path.join(args.out, "ae.json")
    if not os.path.exists(ae_path):
        raise SystemExit(f"no autoencoder at {ae_path}; run train-ae first")
    ae = latent.load(ae_path)
    archive = harness.climatology(cfg.model, lc.archive_size, lc.archive_stride, lc.seed)
    o2l = harness.train_o2l_network(cfg, ae, archive, archive.std(axis=0))
    path = os.path.join(args.out, "o2l.json")
    latent.save(o2l, path)
    print(f"wrote {path}")


def _with_local_checkpoints(args, cfg):
    """Prefer checkpoints written by train-ae/train-o2l into --out."""
    updates = {}
    for key, name in (("ae_checkpoint", "ae.json"), ("o2l_checkpoint", "o2l.json")):
        p = os.path.join(args.out, name)
        if not getattr(cfg.latent, key) and os.path.exists(p):
            updates[key] = p
    if "o2l_checkpoint" in updates and "ae_checkpoint" not in updates and not cfg.latent.ae_checkpoint:
        del updates["o2l_checkpoint"]
    return cfg.replace(latent=updates) if updates else cfg


def _prepare(args, cfg):
    return harness.prepare(_with_local_checkpoints(args, cfg), _cache(args))


def cmd_estimate_cov(args, cfg):
    art = _prepare(args, cfg)
    path = os.path.join(args.out, "covariances.json")
    harness.save_covariances(art, path)
    print(f"wrote {path}")


def cmd_tune(args, cfg):
    art = _prepare(args, cfg)
    res = harness.tune(cfg, art, progress=lambda p, s: log.info("%s -> %.4f", p, s))
    path = os.path.join(args.out, "tuning.json")
    harness.write_json(res.as_dict(), path)
    print(f"best {res.best} -> {path}")


def cmd_run_da(args, cfg):
    art = _prepare(args, cfg)
    run = harness.run_cycling_experiment(cfg, art, _progress_every(100))
    ex = cfg.experiment
    harness.write_cycles_csv(run.records, os.path.join(args.out, "cycles.csv"), ex.horizon)
    harness.save_records(run.records, os.path.join(args.out, "records.npz"))
    with open(os.path.join(args.out, "config.toml"), "w") as fh:
        fh.write(config_mod.dumps(cfg))
    report = _report(run.records, cfg)
    harness.write_json(report, os.path.join(args.out, "report.json"))
    print(f"{cfg.method.name}: mean analysis WRMSE {report['mean_analysis_wrmse']:.4f} "
          f"over {report['n_cycles']} cycles")


def _report(records, cfg):
    ex = cfg.experiment
    spin = min(ex.spinup_cycles, len(records) - 1)
    windows = tuple(w for w in ex.aggregation_windows if w <= len(records) - spin)
    rep = harness.evaluate(records, windows, spin)
    rep["config"] = cfg.to_dict()
    return rep


def cmd_evaluate(args, cfg):
    path = args.records or os.path.join(args.out, "records.npz")
    records = harness.load_records(path)
    cfg_path = os.path.join(os.path.dirname(path), "config.toml")
    if not args.config and os.path.exists(cfg_path):
        cfg = config_mod.load(cfg_path)
    report = _report(records, cfg)
    out = os.path.join(args.out, "report.json")
    harness.write_json(report, out)
    print(f"wrote {out}")


def cmd_gradcheck(args, cfg):
    results = gradient_suite(seed=cfg.experiment.seed, n_points=args.points)
    for r in results:
        print(f"{r.name:18s} point {r.point}  rel error {r.rel_error:.2e}  "
              f"{'ok' if r.passed else 'FAIL'}")
    if not all(r.passed for r in results):
        raise SystemExit(1)


COMMANDS = {"train-ae": cmd_train_ae, "train-o2l": cmd_train_o2l,
            "estimate-cov": cmd_estimate_cov, "tune": cmd_tune, "run-da": cmd_run_da,
            "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def _global_flags(parser, suppress=False):
    # subcommand copies must not overwrite values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="TOML experiment config")
    parser.add_argument("--seed", type=int, default=d(None),
                        help="experiment seed (overrides the config)")
    parser.add_argument("--out", default=d("."), help="output directory")
    parser.add_argument("--cache", default=d(None),
                        help="artifact cache directory (default OUT/cache)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hloba", description=__doc__)
    _global_flags(p)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        _global_flags(sp, suppress=True)
        if name == "evaluate":
            sp.add_argument("--records", help="records.npz from run-da (default OUT/records.npz)")
        if name == "gradcheck":
            sp.add_argument("--points", type=int, default=5)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        raise SystemExit("--seed must be an unsigned 64-bit integer")
    os.makedirs(args.out, exist_ok=True)
    cfg = _load_config(args)
    COMMANDS[args.command](args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())

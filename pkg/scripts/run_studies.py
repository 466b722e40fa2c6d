#!/usr/bin/env python
"""Run the cycling studies on the default configuration and write one JSON per study.

    python scripts/run_studies.py --out results --cache .hloba-cache
    python scripts/run_studies.py --cycles 200 --only ordering calibration
"""
import argparse
import logging
import os
import time

from hloba import harness, studies
from hloba.config import Config

STUDIES = ("ordering", "ablation", "calibration", "noise", "determinism")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results")
    p.add_argument("--cache", default=".hloba-cache")
    p.add_argument("--cycles", type=int, default=None, help="override experiment.cycles")
    p.add_argument("--only", nargs="*", choices=STUDIES, default=list(STUDIES))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    log = logging.getLogger("studies")

    cfg = Config()
    if args.cycles:
        cfg = cfg.replace(experiment={"cycles": args.cycles})
    os.makedirs(args.out, exist_ok=True)
    art = harness.prepare(cfg, args.cache)
    runs = {}

    def save(name, result):
        harness.write_json(result, os.path.join(args.out, f"{name}.json"))
        log.info("%s: %s", name, "PASS" if result["passed"] else "FAIL")

    t0 = time.time()
    if "ordering" in args.only:
        save("method_ordering", studies.method_ordering(cfg, art, cache=runs))
    if "ablation" in args.only:
        save("rz_ablation", studies.rz_ablation(cfg, art, cache=runs))
    if "calibration" in args.only:
        cal = studies.calibration(cfg, art, cache=runs)
        save("calibration", dict(cal, passed=cal["spatial_passed"] and cal["latent_passed"]))
        save("decorrelation", studies.decorrelation_verdict(cal["decorrelation"]))
    if "noise" in args.only:
        high = harness.prepare(cfg.replace(observations={"noise_level": 0.1}), args.cache)
        save("noise_robustness", studies.noise_robustness(cfg, art, high, cache=runs))
    if "determinism" in args.only:
        save("determinism", studies.determinism(cfg, art))
    log.info("done in %.0fs", time.time() - t0)


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Backdoor accuracy of the multi-metric defense as the kept fraction p varies.

Runs both the centered covariance (the default) and the uncentered second
moment, so the sensitivity of the scoring to that choice is visible.
"""
import argparse
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from fedmm import attacks as A
from fedmm.defenses import MULTI_METRICS, DefenseSpec
from fedmm.simulator import desk_scenario, run_federation, summarize


def one(job):
    attack, p, centered, seed = job
    spec = DefenseSpec(MULTI_METRICS, p=p, f=3, centered_covariance=centered)
    return job, summarize(run_federation(desk_scenario(attack, spec, seed=seed)))["mean_ba_last_10"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--attack", default=A.MODEL_REPLACEMENT)
    ap.add_argument("--ps", default="0.1,0.3,0.5,0.7")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args(argv)

    ps = [float(x) for x in args.ps.split(",")]
    jobs = [(args.attack, p, c, s) for c in (True, False) for p in ps for s in range(args.seeds)]
    acc: dict = {}
    with ProcessPoolExecutor() as pool:
        for (_, p, c, _), ba in pool.map(one, jobs):
            acc.setdefault((c, p), []).append(ba)
    print(f"{'p':>5s} {'centered':>10s} {'uncentered':>11s}")
    for p in ps:
        print(f"{p:5.2f} {np.mean(acc[(True, p)]):10.3f} {np.mean(acc[(False, p)]):11.3f}")


if __name__ == "__main__":
    main()

"""Train a network policy on the obstacle point mass and compare variants.

Runs each combination of sampling mode (off-policy from the local
controllers, on-policy from the global policy) and step rule (classic,
global) for a few seeds, then prints the mean final distance to the target
and the success rate per iteration. Pass a smaller seed count or iteration
count on the command line for a quick look:

    python3 demos/train_point_mass.py --seeds 1 --iterations 6
"""
import argparse
import time

import numpy as np

from mdgps.envs import make_env
from mdgps.mdgps import MDGPSConfig, run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--iterations", type=int, default=15)
    args = ap.parse_args()

    for sampling in ("off_policy", "on_policy"):
        for rule in ("classic", "global"):
            start = time.perf_counter()
            dist, succ = [], []
            for seed in range(args.seeds):
                cfg = MDGPSConfig(seed=seed, sampling=sampling, step_rule=rule)
                _, recs = run(make_env("pointmass"), cfg, args.iterations)
                dist.append([r.mean_final_distance for r in recs])
                succ.append([r.success_rate for r in recs])
            dist, succ = np.mean(dist, axis=0), np.mean(succ, axis=0)
            print(f"\n{sampling} / {rule} ({time.perf_counter() - start:.0f}s)")
            for k, (d, s) in enumerate(zip(dist, succ), 1):
                print(f"  iter {k:2d}  distance {d:.3f}  success {100 * s:5.1f}%")


if __name__ == "__main__":
    main()

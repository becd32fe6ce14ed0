"""Keyframe ATE with and without communication, optionally with scaled odometry noise."""

import argparse

from multisgraph.scenario import benchmark_scenario, run

p = argparse.ArgumentParser()
p.add_argument("--scale", type=float, nargs="+", default=[1.0])
args = p.parse_args()

for s in args.scale:
    noise = {"trans_sigma": [0.01 * s, 0.01 * s, 0.0], "yaw_sigma_deg": 0.2 * s}
    rows = []
    for communicate in (False, True):
        sc = benchmark_scenario(communicate=communicate)
        sc.noise = noise
        rep = run(sc)
        rows.append(rep.agents)
    print(f"noise x{s:g}: {len(rep.transforms)} transforms accepted")
    for aid in sorted(rows[0]):
        alone, merged = rows[0][aid]["ate_rmse"], rows[1][aid]["ate_rmse"]
        print(f"noise x{s:g} agent {aid}: {alone:.4f} -> {merged:.4f} m ({100 * (1 - merged / alone):.1f}% lower)")

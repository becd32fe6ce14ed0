"""Benchmark floor: alignment error, ATE, census and traffic for both agents."""

import argparse

from multisgraph.scenario import benchmark_scenario, run

p = argparse.ArgumentParser()
p.add_argument("--out", default="out/benchmark")
p.add_argument("--seed", type=int, default=0)
p.add_argument("--no-descriptors", action="store_true")
args = p.parse_args()

rep = run(benchmark_scenario(args.seed, descriptors=not args.no_descriptors), args.out)
for t in rep.transforms:
    print(f"T[{t['local']}<-{t['remote']}] {t['error_m']:.3f} m {t['yaw_error_deg']:.2f} deg fitness {t['fitness']:.4f}")
for aid, a in sorted(rep.agents.items()):
    print(f"agent {aid}: ATE {a['ate_rmse']:.4f} m census {a['census']}")
print(f"semantic {rep.semantic_bytes} B, raw {rep.raw_scan_bytes} B, ratio {rep.semantic_ratio:.4%}")

# A small version of the scaled-uncertainty benchmark
#
# Time to goal is divided by the oracle's time on the same instance. The
# flexible tube should stay close to one for longer; the rigid tube drops
# out once its constant tightening swallows the acceleration box.

import csv

from corridor_mpc.config import ProjectConfig, artifacts_for_scales
from corridor_mpc.sim import generate_instance, run_benchmark, summarize

scales = [0.25, 0.75, 1.25]
pc = ProjectConfig()
arts = artifacts_for_scales(pc, scales)
instances = [generate_instance(s, arts[scales[0]].geom) for s in (10, 11)]

rows = run_benchmark(instances, scales, ["oracle", "flexible", "rigid", "nominal"], 1, arts)
for s in summarize(rows):
    print(f"scale {s['scale']:4.2f} {s['mode']:9s} success {s['success_rate']:.2f} ratio {s['mean_ratio']:.3f}")

with open("sweep.csv", "w", newline="") as fh:
    w = csv.DictWriter(fh, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)

# From a cluttered scene to a corridor of configuration-space balls
#
# The planner works in joint space with a conservative signed distance:
# workspace clearance divided by the arm's Lipschitz constant. Any ball of
# that radius around a free configuration is collision-free.

import json

import numpy as np

from corridor_mpc.config import ProjectConfig, base_model
from corridor_mpc.corridor import build_corridor, plan_path
from corridor_mpc.geometry import scdf, workspace_clearance
from corridor_mpc.sim import generate_instance

_, geom, _, _ = base_model(ProjectConfig())
inst = generate_instance(3, geom)
print("obstacles:", inst.scene.n_obstacles, "start", inst.q_start.round(3), "goal", inst.q_goal.round(3))
print("Lipschitz constant of forward kinematics:", round(geom.lipschitz, 4))

path = plan_path(geom, inst.scene, inst.q_start, inst.q_goal, clearance=0.1)
print("waypoints after shortcutting:", len(path))

corridor = build_corridor(geom, inst.scene, path, step_size=0.005)
print(f"{len(corridor)} balls, radius min {corridor.radii.min():.3f} max {corridor.radii.max():.3f} rad")

# Spot check: random points inside a few balls never collide.

rng = np.random.default_rng(0)
worst = np.inf
for i in rng.choice(len(corridor), 10, replace=False):
    u = rng.normal(size=(2000, 2))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    pts = corridor.centers[i] + u * corridor.radii[i] * np.sqrt(rng.random(2000))[:, None]
    worst = min(worst, workspace_clearance(geom, inst.scene, pts).min())
print(f"smallest workspace clearance inside sampled balls: {worst:.4f} m")
print("scdf along the path never drops below the clearance:", bool(np.all(scdf(geom, inst.scene, corridor.centers) >= 0.1)))

with open("corridor.json", "w") as fh:
    json.dump({"instance": inst.to_dict(), "corridor": corridor.to_dict()}, fh)
print("wrote corridor.json")

# One instance, four controllers
#
# The same start/goal pair is driven by the oracle (no model error), the
# flexible tube MPC, the rigid tube MPC and a plain nominal MPC, all with
# the same drawn parameter error.

from corridor_mpc.config import ProjectConfig, build_artifacts
from corridor_mpc.sim import RunConfig, audit_trace, generate_instance, run_episode, theta_from_seed

art = build_artifacts(ProjectConfig(), 0.5)
inst = generate_instance(0, art.geom)
theta = theta_from_seed(art.unc, 1)
print("parameter error (relative masses, damping):", theta.round(4))

for mode in ("oracle", "flexible", "rigid", "nominal"):
    tr = run_episode(inst, RunConfig(mode=mode, uncertainty_scale=0.5), art, theta)
    rep = audit_trace(tr, inst, art.geom, art.X, art.U)
    print(f"{mode:9s} {tr.outcome:10s} steps={tr.steps:4d} solves={len(tr.solves):3d} "
          f"max tube={tr.max_tube:.3f} audit={rep.flags() or 'clean'}")

# The nominal MPC plans as if the model were exact. Its open-loop
# accelerations drift away from the plan, and within a few solves the
# measured state no longer admits a feasible plan; the velocity limit is
# usually the first constraint it breaks.

# Offline synthesis for the default two-link arm
#
# Everything the online controller needs is computed once per uncertainty
# scale: the error-bound constants, an acceleration box that maps into the
# torque limits, and the tube controller (P, K) with its derived constants.

import numpy as np

from corridor_mpc.config import ProjectConfig, build_artifacts

pc = ProjectConfig()
art = build_artifacts(pc, scale=1.0)

# The error bound |Delta| <= a|a| + b|qd| + c. With gravity switched off the
# constant term is exactly zero.

c = art.consts
print(f"a = {c.a:.4f}, b = {c.b:.4f}, c = {c.c:.4f}")
print("fresh-sample validation:", art.notes["beta_validation"])

# Acceleration box found by shrinking until every vertex is reachable with
# the torque limits at every sampled state.

print("accel box half-width:", np.round(art.accel.box_halfwidth, 3), "rad/s^2")

# The flexible tube contracts at rho_tilde per step; the rigid tube is the
# worst-case constant size delta_bar.

f = art.flexible
print(f"rho = {f.rho:.3f}, rho_tilde = {f.rho_tilde:.4f}, delta_bar = {f.delta_bar:.3f}")
print("contraction certificate (min eigenvalue):", f"{f.contraction_residual(art.dyn):.2e}")
print("input tightening per unit tube:", np.round(f.tightening_u, 2))
print("rigid input tightening:", np.round(f.tightening_u * f.delta_bar, 2), "of", art.accel.box_halfwidth[0].round(2))

# The rigid tube eats more than the whole acceleration box here, which is
# why the rigid benchmark fails at this scale while the flexible one runs.

for scale in (0.25, 0.5, 2.0):
    a = build_artifacts(pc, scale, accel=art.accel, certify=False)
    r = a.rigid
    tag = "none" if a.flexible is None else f"{a.flexible.rho_tilde:.4f}"
    print(f"scale {scale}: flexible rho_tilde {tag}, rigid accel tightening {r.tightening_u[0] * r.delta_bar:.2f}")

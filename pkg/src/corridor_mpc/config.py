"""Project configuration and the offline artifact pipeline.

All files carry a ``schema_version`` tag. ``build_artifacts`` runs the
offline half of the method for one uncertainty scale: error-bound
constants, the acceleration box and both tube controllers.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .arm import ArmParams, DiscreteDynamics, UncertaintySet
from .bounds import (AccelSet, ErrorBoundConstants, StateBox, TorqueSet, certify_beta,
                     convexify_accel_set, estimate_constants)
from .geometry import ArmGeometry
from .mpc import MpcConfig
from .sim import OfflineArtifacts, RunConfig
from .synthesis import SynthesisConfig, SynthesisError, TubeController, candidates, select_candidate

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_TORQUE_LIMITS = {2: [60.0, 25.0], 3: [80.0, 40.0, 15.0]}


class ConfigError(ValueError):
    """Malformed or missing configuration; the CLI maps it to exit code 2."""


@dataclass
class ProjectConfig:
    dof: int = 2
    gravity: float = 0.0
    uncertainty_fraction: float = 0.05
    torque_limits: list | None = None
    link_radius: float = 0.05
    n_samples: int = 20_000
    n_validation: int = 100_000
    margin: float = 1.1
    seed: int = 0
    artifact_dir: str = "artifacts"
    mpc: MpcConfig = field(default_factory=MpcConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.torque_limits is None:
            if self.dof not in DEFAULT_TORQUE_LIMITS:
                raise ConfigError(f"no default torque limits for dof={self.dof}")
            self.torque_limits = list(DEFAULT_TORQUE_LIMITS[self.dof])
        if len(self.torque_limits) != self.dof:
            raise ConfigError("torque_limits length must equal dof")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mpc"] = self.mpc.to_dict()
        d["run"] = dict(self.run.__dict__)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {version} != {SCHEMA_VERSION}")
        try:
            mpc = MpcConfig.from_dict(d.pop("mpc")) if "mpc" in d else MpcConfig()
            run = RunConfig(**d.pop("run")) if "run" in d else RunConfig()
            return cls(mpc=mpc, run=run, **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | None) -> ProjectConfig:
    if path is None:
        return ProjectConfig()
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            return ProjectConfig.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def write_json(path: str, payload: dict) -> None:
    payload = dict(payload, schema_version=SCHEMA_VERSION)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path: str) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"missing artifact: {path}")
    with open(path) as fh:
        d = json.load(fh)
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version mismatch")
    return d


# ---------------------------------------------------------------------------


def base_model(pc: ProjectConfig):
    arm = ArmParams.planar(pc.dof, pc.gravity)
    X = StateBox.default(pc.dof)
    U = TorqueSet(pc.torque_limits)
    return arm, ArmGeometry.from_params(arm, pc.link_radius), X, U


def build_artifacts(pc: ProjectConfig, scale: float, accel: AccelSet | None = None,
                    certify: bool = True) -> OfflineArtifacts:
    """Offline pipeline for one scale.

    The acceleration box depends only on the nominal model and is shared
    across scales when passed in. A scale with no valid tube controller
    still yields artifacts; the missing controller is ``None`` and the
    reason is kept in ``notes``.
    """
    if scale < 0:
        raise ValueError("uncertainty scale must be non-negative")
    arm, geom, X, U = base_model(pc)
    dyn = DiscreteDynamics.double_integrator(pc.dof)
    unc = UncertaintySet.masses_and_damping(pc.dof, pc.uncertainty_fraction, scale)
    if accel is None:
        accel = convexify_accel_set(arm, U, X, seed=pc.seed)
    consts = estimate_constants(arm, unc, X, n_samples=pc.n_samples, margin=pc.margin, seed=pc.seed)
    notes = {"scale": float(scale)}
    if certify:
        rep = certify_beta(consts, arm, unc, X, accel, n_validation=pc.n_validation, seed=pc.seed + 1)
        notes["beta_validation"] = {"max_ratio": rep.max_ratio, "samples": rep.n_validation,
                                    "violations": rep.violations}
    scfg = SynthesisConfig.build(X, accel, dyn, consts)
    pool = candidates(scfg, dyn, consts)
    ctrls = {}
    for mode in ("flexible", "rigid"):
        try:
            c = select_candidate(scfg, dyn, consts, mode, pool)
        except SynthesisError as exc:
            notes[mode] = f"{exc} (scale {scale:g})"
            ctrls[mode] = None
            continue
        c.provenance.update({"seed": pc.seed, "scale": float(scale), "mode": mode})
        notes[f"{mode}_contraction_residual"] = c.contraction_residual(dyn)
        ctrls[mode] = c
    return OfflineArtifacts(arm, geom, X, U, accel, unc, consts, dyn,
                            ctrls["flexible"], ctrls["rigid"], notes)


def artifact_paths(directory: str, scale: float) -> dict:
    tag = f"scale_{scale:g}"
    return {k: os.path.join(directory, tag, f"{k}.json") for k in ("consts", "accel_set", "controller")}


def save_artifacts(art: OfflineArtifacts, pc: ProjectConfig, directory: str) -> dict:
    scale = art.notes["scale"]
    paths = artifact_paths(directory, scale)
    os.makedirs(os.path.dirname(paths["consts"]), exist_ok=True)
    write_json(paths["consts"], {"consts": art.consts.to_dict(), "uncertainty": art.unc.to_dict(),
                                 "validation": art.notes.get("beta_validation")})
    write_json(paths["accel_set"], {"accel_set": art.accel.to_dict(), "torque_set": art.U.to_dict(),
                                    "state_box": art.X.to_dict()})
    write_json(paths["controller"], {
        "flexible": None if art.flexible is None else art.flexible.to_dict(),
        "rigid": None if art.rigid is None else art.rigid.to_dict(),
        "notes": art.notes, "config": pc.to_dict(),
    })
    return paths


def load_artifacts(pc: ProjectConfig, directory: str, scale: float) -> OfflineArtifacts:
    paths = artifact_paths(directory, scale)
    c, a, k = (read_json(paths[n]) for n in ("consts", "accel_set", "controller"))
    arm, geom, _, _ = base_model(pc)

    def ctrl(d):
        return None if d is None else TubeController.from_dict(d)

    return OfflineArtifacts(
        arm, geom, StateBox.from_dict(a["state_box"]), TorqueSet.from_dict(a["torque_set"]),
        AccelSet.from_dict(a["accel_set"]), UncertaintySet.from_dict(c["uncertainty"]),
        ErrorBoundConstants.from_dict(c["consts"]), DiscreteDynamics.double_integrator(pc.dof),
        ctrl(k["flexible"]), ctrl(k["rigid"]), k["notes"],
    )


def artifacts_for_scales(pc: ProjectConfig, scales, directory: str | None = None) -> dict:
    """Load cached artifacts where present, build (and cache) the rest."""
    out, accel = {}, None
    for s in scales:
        if directory is not None:
            try:
                out[s] = load_artifacts(pc, directory, s)
                accel = out[s].accel
                continue
            except ConfigError:
                pass
        out[s] = build_artifacts(pc, s, accel)
        accel = out[s].accel
        if directory is not None:
            save_artifacts(out[s], pc, directory)
    return out


def validate_artifacts(art: OfflineArtifacts) -> list:
    """Self-audit of loaded artifacts; returns a list of problems."""
    problems = []
    v = art.notes.get("beta_validation")
    if v and v["violations"]:
        problems.append(f"error bound violated on {v['violations']} validation samples")
    for mode in ("flexible", "rigid"):
        c = art.controller(mode)
        if c is None:
            continue
        if c.contraction_residual(art.dyn) < -1e-8:
            problems.append(f"{mode} controller fails its contraction certificate")
        if mode == "flexible" and not c.valid:
            problems.append("flexible controller has rho_tilde >= 1")
    if not np.all(art.accel.box_halfwidth > 0):
        problems.append("empty acceleration set")
    return problems

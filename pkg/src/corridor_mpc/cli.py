"""Command-line front end: ``synth``, ``run``, ``bench`` and ``audit``.

Exit codes are 0 on success, 1 on a domain failure (no controller,
infeasible or timed-out episode, audit violation) and 2 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

from .config import (SCHEMA_VERSION, ConfigError, artifacts_for_scales, base_model, build_artifacts,
                     load_artifacts, load_config, save_artifacts, validate_artifacts)
from .corridor import PlanningError
from .mpc import MODES
from .sim import (CSV_FIELDS, ProblemInstance, SimTrace, audit_trace, generate_instance, run_benchmark,
                  run_episode, summarize, theta_from_seed)

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


def _artifact_dir(pc, out):
    return pc.artifact_dir if os.path.isabs(pc.artifact_dir) else os.path.join(out, pc.artifact_dir)


def cmd_synth(args, pc) -> int:
    directory = _artifact_dir(pc, args.out)
    art = build_artifacts(pc, args.scale)
    paths = save_artifacts(art, pc, directory)
    problems = validate_artifacts(art)
    for mode in ("flexible", "rigid"):
        c = art.controller(mode)
        if c is None:
            print(f"{mode}: {art.notes[mode]}; try a lower --scale")
        else:
            print(f"{mode}: rho={c.rho:.4f} rho_tilde={c.rho_tilde:.4f} delta_f={c.delta_f:.4g} "
                  f"delta_bar={c.delta_bar:.4g} r_p={c.r_p:.4g}")
    v = art.notes.get("beta_validation", {})
    print(f"error bound: a={art.consts.a:.4g} b={art.consts.b:.4g} c={art.consts.c:.4g} "
          f"validation max ratio {v.get('max_ratio', float('nan')):.3f}, violations {v.get('violations')}")
    print(f"wrote {', '.join(sorted(paths.values()))}")
    for p in problems:
        print(f"validation problem: {p}", file=sys.stderr)
    return EXIT_DOMAIN if problems or art.flexible is None else EXIT_OK


def _instance(pc, seed):
    _, geom, _, _ = base_model(pc)
    return generate_instance(seed, geom, clearance=pc.run.clearance)


def cmd_run(args, pc) -> int:
    art = load_artifacts(pc, _artifact_dir(pc, args.out), args.scale)
    inst = _instance(pc, args.seed)
    run_cfg = pc.run.replace(mode=args.mode, uncertainty_scale=args.scale)
    theta = theta_from_seed(art.unc, args.seed * 1000)
    trace = run_episode(inst, run_cfg, art, theta, pc.mpc)
    report = audit_trace(trace, inst, art.geom, art.X, art.U, art.dyn.dt)
    digest = trace.digest()
    os.makedirs(os.path.join(args.out, "traces"), exist_ok=True)
    path = os.path.join(args.out, "traces", f"seed{args.seed}_{args.mode}_scale{args.scale:g}.json")
    with open(path, "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "instance": inst.to_dict(), "trace": trace.to_dict(),
                   "hash": digest, "dt": art.dyn.dt, "state_box": art.X.to_dict(),
                   "torque_set": art.U.to_dict(), "geometry": art.geom.to_dict()}, fh, sort_keys=True)
    print(f"outcome={trace.outcome} steps={trace.steps} max_delta={trace.max_tube:.4g} "
          f"audit={report.flags() or 'clean'} hash={digest[:16]} trace={path}")
    if trace.message:
        print(trace.message)
    return EXIT_OK if trace.outcome == "reached" else EXIT_DOMAIN


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_results(path, rows):
    failed = sum(r["outcome"] in ("solver_error", "planning_failed") for r in rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in CSV_FIELDS])
        if failed:
            w.writerow([f"# partial: {failed} of {len(rows)} episodes did not complete"])


def write_plotdata(path, summary, modes):
    scales = sorted({s["scale"] for s in summary})
    cols = ["scale"]
    for m in modes:
        cols += [f"{m}_success", f"{m}_ratio", f"{m}_lower", f"{m}_upper"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for sc in scales:
            row = [_fmt(sc)]
            for m in modes:
                s = next((x for x in summary if x["scale"] == sc and x["mode"] == m), None)
                vals = (s["success_rate"], s["mean_ratio"], s["lower_2sigma"], s["upper_2sigma"]) if s else (
                    float("nan"),) * 4
                row += [_fmt(float(v)) for v in vals]
            w.writerow(row)


def cmd_bench(args, pc) -> int:
    scales = sorted(set(args.scales))
    if any(s < 0 for s in scales):
        raise ConfigError("scales must be non-negative")
    arts = artifacts_for_scales(pc, scales, _artifact_dir(pc, args.out))
    instances = [_instance(pc, args.seed + i) for i in range(args.instances)]
    rows = run_benchmark(instances, scales, args.modes, args.repeats, arts, pc.run, pc.mpc, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    write_results(os.path.join(args.out, "results.csv"), rows)
    summary = summarize(rows)
    write_plotdata(os.path.join(args.out, "plotdata.csv"), summary, args.modes)
    for s in summary:
        print(f"scale={s['scale']:g} mode={s['mode']} success={s['success_rate']:.2f} "
              f"ratio={s['mean_ratio']:.3f} [{s['lower_2sigma']:.3f}, {s['upper_2sigma']:.3f}]")
    return EXIT_OK


def cmd_audit(args, pc) -> int:
    from .bounds import StateBox, TorqueSet
    from .geometry import ArmGeometry
    if not os.path.isfile(args.trace):
        raise ConfigError(f"trace file not found: {args.trace}")
    with open(args.trace) as fh:
        d = json.load(fh)
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("trace schema_version mismatch")
    inst = ProblemInstance.from_dict(d["instance"])
    trace = SimTrace.from_dict(d["trace"])
    rep = audit_trace(trace, inst, ArmGeometry.from_dict(d["geometry"]), StateBox.from_dict(d["state_box"]),
                      TorqueSet.from_dict(d["torque_set"]), d["dt"])
    if rep.clean:
        print(f"clean: {len(trace.states)} states checked")
        return EXIT_OK
    k, kind = rep.first_violation
    print(f"violations: {rep.to_dict()} first at step {k} ({kind})")
    return EXIT_DOMAIN


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="project config JSON (defaults built in)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="corridor-mpc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="offline constants and tube controllers")
    s.add_argument("--scale", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", parents=[common], help="one closed-loop episode")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--scale", type=float, default=1.0)
    r.add_argument("--mode", choices=MODES, default="flexible")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", parents=[common], help="benchmark sweep over scales and modes")
    b.add_argument("--seed", type=int, default=0, help="first instance seed")
    b.add_argument("--scales", type=float, nargs="+", required=True)
    b.add_argument("--modes", nargs="+", choices=MODES, default=["oracle", "flexible", "rigid", "nominal"])
    b.add_argument("--instances", type=int, default=10)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("audit", parents=[common], help="re-check a stored trace")
    a.add_argument("trace")
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        pc = load_config(args.config)
        return args.func(args, pc)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PlanningError as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())

"""Command-line tool: rollouts, velocity-envelope contours, tracking profiles,
one-off QP solves, and scenario linting. Outputs are delimited text plus JSON
episode summaries."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, qpcore, steer
from .kinematics import load_chain


def _cmd_rollout(args) -> int:
    scenario = harness.load_scenario(args.scenario)
    policy_factory = lambda: harness.make_policy(args.policy, scenario)
    summary, records = harness.run_batch(
        scenario, policy_factory, args.episodes, workers=args.workers, base_seed=args.seed
    )
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        harness.write_record(rec, out)
    with open(out / "batch_summary.json", "w") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
    print(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_contour(args) -> int:
    model = load_chain(args.chain)
    rng = np.random.default_rng(args.seed)
    samples = steer.sample_configurations(model, args.samples, rng)
    points = steer.velocity_limit_contour(model, samples, plane=args.plane,
                                          n_angles=args.angles)
    rows = [["angle", "x", "y"]]
    for k, (x, y) in enumerate(points):
        rows.append([2.0 * np.pi * k / args.angles, float(x), float(y)])
    _write_rows(args.output, rows)
    return 0


def _cmd_profile(args) -> int:
    steps = []
    for log in args.logs:
        steps.extend(_read_substep_log(log))
    profile = steer.tracking_error_profile(steps, n_bins=args.bins)
    _write_rows(args.output, profile.to_rows())
    return 0


def _cmd_solve(args) -> int:
    problem = qpcore.load_problem_file(args.problem)
    solution = qpcore.solve(problem)
    print(f"status: {solution.status}")
    print(f"x: {' '.join(repr(float(v)) for v in solution.x)}")
    print(f"objective: {solution.objective!r}")
    print(f"kkt_residual: {solution.kkt_residual!r}")
    print(f"newton_iterations: {solution.newton_iterations}")
    print(f"max_constraint_violation: {solution.max_constraint_violation!r}")
    return 0 if solution.status == qpcore.STATUS_CONVERGED else 1


def _cmd_validate(args) -> int:
    scenario = harness.load_scenario(args.scenario)
    scenario.validate()
    print(f"scenario '{scenario.name}' ok: platform {scenario.model.platform}, "
          f"{scenario.model.n} joints, {scenario.collision.n_pairs} collision pairs, "
          f"{scenario.substeps} controller substeps per command")
    return 0


def _write_rows(output: str | None, rows) -> None:
    if output:
        with open(output, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    else:
        csv.writer(sys.stdout).writerows(rows)


def _read_substep_log(path: str) -> list[harness._ProfileStep]:
    steps = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(harness._ProfileStep(
                command_norm=float(row["command_norm"]),
                tracking_error=float(row["tracking_error"]),
                active_counts={f: int(row[f"active_{f}"]) for f in ("collision", "position", "velocity")},
                slack_min={f: float(row[f"slack_{f}"]) for f in ("collision", "position", "velocity")},
            ))
    return steps


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graspctl",
        description="Grasp-control stack: rollouts, contours, profiles, QP solves",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rollout", help="run policy episodes on a scenario")
    p.add_argument("--scenario", required=True, help="builtin name or TOML path")
    p.add_argument("--policy", default="zero",
                   help="zero | random | waypoint | grasp | mlp:<weights.npz>")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--workers", type=int, default=None,
                   help=f"worker threads (default ${harness.WORKERS_ENV_VAR} or 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="rollout_out")
    p.set_defaults(func=_cmd_rollout)

    p = sub.add_parser("contour", help="operational-space velocity-limit contour")
    p.add_argument("--chain", default="arm5f")
    p.add_argument("--plane", choices=sorted(steer.PLANE_ROWS), default="xy")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--angles", type=int, default=360)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None)
    p.set_defaults(func=_cmd_contour)

    p = sub.add_parser("profile", help="tracking error vs command magnitude from logs")
    p.add_argument("logs", nargs="+", help="substep CSV logs from `rollout`")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--output", default=None)
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("solve", help="solve a QP dump file")
    p.add_argument("problem")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("validate", help="lint a scenario file")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # argparse handles usage; this reports data errors
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

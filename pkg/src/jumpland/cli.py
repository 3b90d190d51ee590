"""Command line entry points: plan, rollout, train, eval, export.

Exit codes: 0 success, 2 invalid input, 3 planning failure, 4 simulation
divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .formats import (
    TrajectoryParseError,
    read_rollout_log,
    read_trajectory,
    rollout_reward_terms,
    write_rollout_log,
    write_trajectory,
)
from .jump_to import (
    POLYGON_PRESETS,
    CommandRejected,
    JumpCommand,
    PlanFailed,
    check_knots,
    landing_polygon,
    polygon_extent,
    reshape_flight_joints,
    solve_jump,
)
from .reference import ReferenceMotion, resample
from .robot_model import LEG_NAMES
from .simulator import NumericalDivergence, Terrain, generate_terrain, rollout_pd

EXIT_OK, EXIT_INVALID, EXIT_PLAN, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("jumpland")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def parse_polygon(value: str) -> np.ndarray:
    """A preset name or 12 comma-separated per-foot offsets (m)."""
    if value in POLYGON_PRESETS:
        return POLYGON_PRESETS[value].copy()
    try:
        vals = [float(v) for v in value.split(",")]
    except ValueError:
        vals = []
    if len(vals) != 12:
        raise UsageError(f"--polygon must be one of {sorted(POLYGON_PRESETS)} or 12 comma-separated offsets")
    return np.array(vals).reshape(4, 3)


def plan_reference(cfg: RunConfig, cmd: JumpCommand):
    """Solve the jump and resample it at the policy rate."""
    cmd.validate()
    knots = solve_jump(cmd, cfg.morphology, cfg.to)
    flight = reshape_flight_joints(knots, cmd, cfg.morphology)
    return knots, flight, reference_from(cfg, knots, flight)


def reference_from(cfg: RunConfig, knots, flight) -> ReferenceMotion:
    ep = cfg.episode
    return resample(knots, flight, ep.reference_dt, ep.pre_trigger, ep.post_landing)


def plan_report(cfg: RunConfig, knots, cmd: JumpCommand, wall: float) -> dict:
    morph = cfg.morphology
    return {
        "status": knots.status,
        "kkt_residuals": knots.kkt,
        "slack_norm": float(np.linalg.norm(knots.xi)),
        "slack": knots.xi.tolist(),
        "durations": {"stance": knots.t_stance, "flight": knots.t_flight},
        "landing_com": knots.landing_com.tolist(),
        "displacement": cmd.displacement.tolist(),
        "checks": check_knots(knots, morph, cfg.to.mu),
        "homing_polygon": polygon_extent(morph.homing_feet),
        "landing_polygon": polygon_extent(landing_polygon(cmd, morph)),
        "iterations": knots.iterations,
        "wall_time_s": wall,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
    }


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _terrain_arg(value: str, cfg: RunConfig) -> Terrain:
    if value == "flat":
        return Terrain.flat(cfg.terrain.terrain_size, cfg.terrain.cell_size, cfg.terrain.friction)
    try:
        seed = int(value)
    except ValueError:
        raise UsageError(f"--terrain must be 'flat' or an integer seed, got {value!r}") from None
    return generate_terrain(cfg.terrain, seed)


def _apply_seed(cfg: RunConfig, seed) -> RunConfig:
    return cfg if seed is None else cfg.with_seed(seed)


# ---------------------------------------------------------------------------
# commands


def cmd_plan(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    cmd = JumpCommand([args.dx, args.dy, args.dz], parse_polygon(args.polygon))
    t0 = time.perf_counter()
    knots, flight, _ = plan_reference(cfg, cmd)
    wall = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectory(out, knots, flight, cfg.hash(), cfg.seed)
    report = plan_report(cfg, knots, cmd, wall)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    _write_json(report_path, report)
    print(f"{knots.status}: landing CoM {np.round(knots.landing_com, 4).tolist()}, "
          f"|slack| {report['slack_norm']:.2e} m, {wall:.1f} s -> {out}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    knots, flight, _ = read_trajectory(args.traj)
    motion = reference_from(cfg, knots, flight)
    terrain = _terrain_arg(args.terrain, cfg)
    params = cfg.sim.params()
    rlog = rollout_pd(motion, cfg.sim.rollout_pd(), terrain, cfg.morphology, params.decimation, params)
    terms = rollout_reward_terms(rlog, motion, cfg.morphology, cfg.reward, cfg.episode.action_scale)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rollout_log(out, rlog, motion, terms, cfg.hash(), cfg.seed,
                      {"terrain": args.terrain, "trajectory": Path(args.traj).name})
    windows = rlog.airborne_windows
    print(f"{len(rlog.time)} steps, airborne windows {[(round(a, 3), round(b, 3)) for a, b in windows]} -> {out}")
    return EXIT_OK


VARIANTS = {("flat", "off"): "baseline", ("rough", "off"): "ablation", ("rough", "on"): "proposed",
            ("flat", "on"): "flat-relaxed"}


def prepare_run_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} already holds a run; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def cmd_train(args) -> int:
    from .evaluation import policy_rollout
    from .ppo import seed_everything, train

    cfg = _apply_seed(load_config(args.config), args.seed)
    if args.iterations is not None:
        cfg = replace(cfg, ppo=replace(cfg.ppo, iterations=args.iterations))
    if args.num_envs is not None:
        cfg = replace(cfg, ppo=replace(cfg.ppo, num_envs=args.num_envs))
    reward_cfg = cfg.reward if args.relaxation == "on" else cfg.reward.without_relaxation()
    cfg = replace(cfg, reward=reward_cfg)
    out = Path(args.out)
    prepare_run_dir(out, args.force)

    knots, flight, motion = plan_reference(cfg, cfg.plan.command())
    write_trajectory(out / "trajectory.csv", knots, flight, cfg.hash(), cfg.seed)
    cfg.dump(out / "config.yaml")
    manifest = {
        "variant": VARIANTS[(args.terrain, args.relaxation)],
        "terrain": args.terrain,
        "relaxation": args.relaxation,
        "reward_sigma_joint": [reward_cfg.sigma_joint_sf, reward_cfg.sigma_joint_landing],
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "iterations": cfg.ppo.iterations,
        "num_envs": cfg.ppo.num_envs,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"training {manifest['variant']} ({args.terrain}, relaxation {args.relaxation}) -> {out}")

    env = build_training_env(cfg, motion, args.terrain)
    seed_everything(cfg.seed)
    model = train(env, cfg.ppo, out, cfg.hash(), progress=_progress_printer(cfg.ppo.iterations))
    rlog, terms = policy_rollout(model, motion, Terrain.flat(), cfg)
    write_rollout_log(out / "policy_rollout.csv", rlog, motion, terms, cfg.hash(), cfg.seed, {"terrain": "flat"})
    return EXIT_OK


def build_training_env(cfg: RunConfig, motion: ReferenceMotion, terrain_kind: str):
    from .env import JumpEnv, landing_zone_spawn

    if terrain_kind == "flat":
        terrain = Terrain.flat(cfg.terrain.terrain_size, cfg.terrain.cell_size, cfg.terrain.friction)
        spawn = None
    elif terrain_kind == "rough":
        terrain = generate_terrain(cfg.terrain, cfg.seed)
        spawn = landing_zone_spawn(motion, cfg.terrain.platform_size)
    else:
        raise UsageError(f"unknown terrain kind {terrain_kind!r}")
    return JumpEnv(
        motion, terrain, cfg.ppo.num_envs, morph=cfg.morphology, pd=cfg.sim.policy_pd(), sim=cfg.sim.params(),
        reward_cfg=cfg.reward, randomization=cfg.randomization, max_episode_s=cfg.episode.max_episode_s,
        action_scale=cfg.episode.action_scale, training=True, seed=cfg.seed, spawn_sampler=spawn,
    )


def _progress_printer(total: int):
    def show(row):
        it = row["iteration"]
        if it == 1 or it == total or it % 25 == 0:
            print(f"iter {it:5d}  reward {row['mean_reward']:+.4f}  episode {row['episode_length']:.1f}  "
                  f"lr {row['learning_rate']:.1e}", flush=True)
    return show


def _reference_for_checkpoint(cfg: RunConfig, checkpoint: Path) -> ReferenceMotion:
    traj = checkpoint.parent / "trajectory.csv"
    if traj.exists():
        knots, flight, _ = read_trajectory(traj)
        return reference_from(cfg, knots, flight)
    return plan_reference(cfg, cfg.plan.command())[2]


def cmd_eval(args) -> int:
    from .evaluation import evaluate_policy
    from .ppo import load_checkpoint

    cfg = _apply_seed(load_config(args.config), args.seed)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} not found")
    if args.config is None and (ckpt.parent / "config.yaml").exists():
        cfg = _apply_seed(load_config(ckpt.parent / "config.yaml"), args.seed)
    model, _ = load_checkpoint(ckpt)
    motion = _reference_for_checkpoint(cfg, ckpt)
    report = evaluate_policy(
        model.act, motion, args.scenario, args.height, args.episodes, cfg.seed, cfg.morphology,
        cfg.sim.policy_pd(), cfg.sim.params(), cfg.reward, cfg.randomization,
        action_scale=cfg.episode.action_scale,
    )
    out = Path(args.out) if args.out else ckpt.parent / f"eval_{args.scenario}_{args.height:.2f}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out, cfg.hash(), cfg.seed)
    c = report.counts()
    print(f"{args.scenario} @ {args.height:.2f} m: S {c['S']}  WS {c['WS']}  F {c['F']}  "
          f"success rate {report.success_rate:.3f} -> {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"run directory {run} not found")
    if args.what == "rewards":
        src = run / "metrics.csv"
        if not src.exists():
            raise UsageError(f"{run} has no metrics.csv")
        rows = list(csv.DictReader(ln for ln in src.read_text().splitlines() if not ln.startswith("#")))
        series = [k for k in rows[0] if k == "mean_reward" or k.startswith("term_")] if rows else []
        data = [(s, r["iteration"], r[s]) for s in series for r in rows]
        header = ("series", "step", "value")
    else:
        src = next((run / n for n in ("policy_rollout.csv", "rollout.csv") if (run / n).exists()), None)
        if src is None:
            raise UsageError(f"{run} has no rollout log (policy_rollout.csv or rollout.csv)")
        cols, _ = read_rollout_log(src)
        t = cols["time"]
        data = []
        if args.what == "tracking":
            for j in range(12):
                for name, key in (("q_measured", "q_"), ("q_action", "q_target_"), ("q_reference", "q_ref_")):
                    data += [(f"{name}_{j}", repr(float(ti)), repr(float(v))) for ti, v in zip(t, cols[f"{key}{j}"])]
        else:
            dt = t[1] - t[0] if len(t) > 1 else t[0]
            for leg, name in enumerate(LEG_NAMES):
                p = sum(np.abs(cols[f"tau_{3 * leg + j}"] * cols[f"qd_{3 * leg + j}"]) for j in range(3))
                data += [(f"energy_{name}", repr(float(ti)), repr(float(v))) for ti, v in zip(t, np.cumsum(p) * dt)]
        header = ("series", "time", "value")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(data)
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jumpland", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="override the configured seed")

    sp = sub.add_parser("plan", help="solve a jump trajectory")
    common(sp)
    sp.add_argument("--dx", type=float, default=0.8)
    sp.add_argument("--dy", type=float, default=0.0)
    sp.add_argument("--dz", type=float, default=0.0)
    sp.add_argument("--polygon", default="homing", help="narrow, wide, homing or 12 comma-separated offsets")
    sp.add_argument("--out", default="trajectory.csv")
    sp.add_argument("--report", help="solve report path (default: <out>.report.json)")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("rollout", help="replay a trajectory open loop with joint PD")
    common(sp)
    sp.add_argument("--traj", required=True)
    sp.add_argument("--terrain", default="flat", help="'flat' or a terrain seed")
    sp.add_argument("--out", default="rollout.csv")
    sp.set_defaults(func=cmd_rollout)

    sp = sub.add_parser("train", help="plan once, then train a tracking policy")
    common(sp)
    sp.add_argument("--terrain", choices=("flat", "rough"), default="flat")
    sp.add_argument("--relaxation", choices=("on", "off"), default="on")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--num-envs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a policy on landing scenarios")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scenario", required=True, choices=("flat", "front", "hind", "right", "HR", "FL"))
    sp.add_argument("--height", type=float, default=0.10, choices=(0.0, 0.05, 0.10, 0.13, 0.16))
    sp.add_argument("--episodes", type=int, default=50)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export", help="plot-ready long-format CSVs from a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--what", required=True, choices=("rewards", "tracking", "energy"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandRejected, ConfigError, UsageError, TrajectoryParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except PlanFailed as exc:
        print(f"plan failed: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except NumericalDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

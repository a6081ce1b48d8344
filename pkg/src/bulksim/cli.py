"""Command-line entry point.

Subcommands: run (full grasp-and-dump pipeline), plan (single path query),
scoop (greedy attack-point episode), throw-eval (scripted throw statistics),
train-attack (attack-point policy training), replay (trajectory log
verification). Output root defaults to $BULKSIM_OUT or the current directory.
"""

import argparse
import json
import math
import os
import sys

import numpy as np


def _out_dir(args, default_name: str) -> str:
    root = args.out or os.environ.get("BULKSIM_OUT", ".")
    path = root if args.out else os.path.join(root, default_name)
    os.makedirs(path, exist_ok=True)
    return path


def _load_scenario(args):
    from . import config as cfgmod
    from . import orchestrator as orch
    import dataclasses
    if args.scenario:
        scenario = cfgmod.load_scenario(args.scenario)
    else:
        scenario = orch.ScenarioConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "cycles", None) is not None:
        overrides["n_cycles"] = args.cycles
    if getattr(args, "budget", None) is not None:
        overrides["rrt_budget"] = args.budget
    if overrides:
        scenario = dataclasses.replace(scenario, **overrides)
    return scenario


def cmd_run(args) -> int:
    from . import config as cfgmod
    from . import orchestrator as orch
    try:
        scenario = _load_scenario(args)
    except cfgmod.ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    out = _out_dir(args, "run")
    result = orch.run_cycles(scenario, out_dir=out, progress=not args.quiet)
    print(f"cycles: {len(result.metrics)}  transferred: "
          f"{result.transferred_volume:.3f} m^3 "
          f"({100 * result.transfer_fraction:.1f}%)  "
          f"collision hits: {result.collision_hits}")
    return 0 if result.state.phase != orch.STOPPED else 1


def cmd_plan(args) -> int:
    from . import machine as mch
    from . import pathplan as pp
    from . import worldmap as wm
    params = mch.MachineParams()
    if args.points:
        vmap = wm.ingest_points(wm.load_points(args.points), args.voxel_size)
    else:
        vmap = wm.VoxelMap(args.voxel_size)
    start = np.array([float(v) for v in args.start.split(",")])
    goal = np.array([float(v) for v in args.goal.split(",")])
    try:
        jpath = pp.plan_rrtstar(start, goal, vmap, params,
                                budget=args.budget or pp.DEFAULT_BUDGET,
                                seed=args.seed or 0)
    except pp.PlanningFailure as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return 1
    spath = pp.smooth_bspline(jpath, vmap, params)
    out = _out_dir(args, "plan")
    path_file = os.path.join(out, "path.txt")
    with open(path_file, "w") as f:
        f.write("# q_slew q_boom q_stick\n")
        for c in spath.configs:
            f.write(f"{c[0]!r} {c[1]!r} {c[2]!r}\n")
    print(f"cost {jpath.cost:.4f}  samples {len(spath.configs)}  "
          f"smoothed {spath.smoothed}  -> {path_file}")
    return 0


def cmd_scoop(args) -> int:
    from . import attackplan as ap
    cfg = ap.GraspEnvConfig()
    env = ap.GraspEnv(cfg)
    from . import soilfield as sf
    obs = env.reset(seed=args.seed or 0)
    out = _out_dir(args, "scoop")
    rows = []
    for k in range(cfg.max_steps):
        filtered = sf.median_filter_observation(obs)
        attack = ap.greedy_oracle(filtered, cfg.geometry,
                                  machine_xy=cfg.machine_position)
        if attack is None:
            break
        obs, reward, done, info = env.step(attack)
        rows.append({"step": k, "x": attack[0], "y": attack[1],
                     "z": attack[2], "ssv": info["ssv"],
                     "remaining": info["volume"]})
        if done:
            break
    import csv
    with open(os.path.join(out, "scoops.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "x", "y", "z",
                                               "ssv", "remaining"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"{len(rows)} scoops, final volume "
          f"{rows[-1]['remaining'] if rows else 0:.3f} m^3")
    return 0


def cmd_throw_eval(args) -> int:
    from . import motioncontrol as mc
    rng = np.random.default_rng(args.seed or 0)
    target_base = np.array([12.0, 0.0, 0.0])
    landings, errors = [], []
    n = args.throws
    for i in range(n):
        phi = rng.uniform(-math.pi, math.pi)
        r = rng.uniform(10.0, 14.0)
        target = np.array([r * math.cos(phi), r * math.sin(phi), 0.0])
        res = mc.run_scripted_throw(target, seed=int(rng.integers(2 ** 31)))
        for p in res["landings"]:
            landings.append(p - np.array([target[0], target[1], 0.0]))
        errors.append(res["mean_error"])
    out = _out_dir(args, "throw-eval")
    report = os.path.join(out, "landing_report.json")
    mc.write_landing_report(report, np.array(landings), np.zeros(3),
                            extra={"throws": n,
                                   "per_throw_mean_error": errors})
    print(f"{n} throws, mean landing error "
          f"{float(np.mean(errors)):.3f} m -> {report}")
    return 0


def cmd_train_attack(args) -> int:
    from . import attackplan as ap
    env_cfg = ap.GraspEnvConfig(grid_dims=(20, 20), resolution=(0.3, 0.3))
    tc = ap.TrainerConfig(n_updates=args.updates, n_envs=args.envs,
                          seed=args.seed or 0)
    out = _out_dir(args, "train-attack")
    try:
        ap.train_policy(env_cfg, tc,
                        metrics_path=os.path.join(out, "metrics.csv"),
                        checkpoint_path=os.path.join(out, "policy.npz"),
                        progress=not args.quiet)
    except ap.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    print(f"checkpoint -> {os.path.join(out, 'policy.npz')}")
    return 0


def cmd_replay(args) -> int:
    from . import machine as mch
    params = mch.MachineParams()
    worst = 0.0
    n = 0
    with open(args.log) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            state = mch.MachineState(
                q_slew=rec["q"][0], q_boom=rec["q"][1], q_stick=rec["q"][2],
                theta_x=rec["theta"][0], theta_y=rec["theta"][1])
            kin = mch.forward_kinematics(state, params)
            worst = max(worst, float(np.max(np.abs(
                kin.end_effector - np.asarray(rec["ee"])))))
            n += 1
    print(f"{n} records, max end-effector deviation {worst:.2e} m")
    return 0 if worst <= args.tolerance else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bulksim",
        description="Bulk-material handling simulation and planning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, cycles=False, budget=False):
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="RNG seed override")
        p.add_argument("--quiet", action="store_true")
        if cycles:
            p.add_argument("--cycles", type=int, help="cycle budget override")
        if budget:
            p.add_argument("--budget", type=int, help="planner iteration budget")

    p = sub.add_parser("run", help="full grasp-and-dump pipeline")
    p.add_argument("--scenario", help="scenario YAML file")
    common(p, cycles=True, budget=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plan", help="single RRT* path query")
    p.add_argument("--start", default="0,0.3,-0.9",
                   help="start config 'slew,boom,stick'")
    p.add_argument("--goal", default="1.2,0.5,-0.6")
    p.add_argument("--points", help="obstacle point file (x y z per line)")
    p.add_argument("--voxel-size", type=float, default=0.5)
    common(p, budget=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("scoop", help="greedy attack-point episode")
    common(p)
    p.set_defaults(func=cmd_scoop)

    p = sub.add_parser("throw-eval", help="scripted throw statistics")
    p.add_argument("--throws", type=int, default=50)
    common(p)
    p.set_defaults(func=cmd_throw_eval)

    p = sub.add_parser("train-attack", help="train the attack-point policy")
    p.add_argument("--updates", type=int, default=300)
    p.add_argument("--envs", type=int, default=256)
    common(p)
    p.set_defaults(func=cmd_train_attack)

    p = sub.add_parser("replay", help="verify a trajectory log")
    p.add_argument("log", help="JSON-lines trajectory log")
    p.add_argument("--tolerance", type=float, default=1e-9)
    common(p)
    p.set_defaults(func=cmd_replay)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

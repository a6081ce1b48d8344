"""Grasp-and-dump cycle orchestration.

A fixed-sequence state machine (WAYPOINT -> GRASP -> THROW -> next cycle)
drives the scripted controllers over the soil field: plan an attack point,
plan and track a collision-free approach, run the three-phase grasp routine,
carry the load to the dump target, release ballistically, and account volume
into a destination field. Produces per-cycle metrics plus CSV/JSON artifacts.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import attackplan as ap
from . import machine as mch
from . import motioncontrol as mc
from . import pathplan as pp
from . import soilfield as sf
from . import worldmap as wm

WAYPOINT, GRASP, THROW, STOPPED = "WAYPOINT", "GRASP", "THROW", "STOPPED"
PHASES = (WAYPOINT, GRASP, THROW, STOPPED)
SIGNALS = ("SUCCESS", "FAILED", "RUNNING")

MATERIAL_DENSITY = 1600.0  # kg / m^3


@dataclass
class CycleState:
    phase: str = WAYPOINT
    cycle_index: int = 0
    phase_start_time: float = 0.0


def sm_step(state: CycleState, signal: str, now: float = 0.0) -> CycleState:
    """Fixed transition table; STOPPED absorbs everything until a reset."""
    if state.phase not in PHASES or signal not in SIGNALS:
        raise ValueError(f"unknown phase/signal {state.phase!r}/{signal!r}")
    if state.phase == STOPPED or signal == "RUNNING":
        return state
    if signal == "FAILED":
        return CycleState(STOPPED, state.cycle_index, now)
    nxt = {WAYPOINT: (GRASP, state.cycle_index),
           GRASP: (THROW, state.cycle_index),
           THROW: (WAYPOINT, state.cycle_index + 1)}[state.phase]
    return CycleState(nxt[0], nxt[1], now)


@dataclass(frozen=True)
class ScenarioConfig:
    pile: sf.PileSpec = field(default_factory=lambda: sf.PileSpec(
        mean=(11.0, 0.0), skew=(1.0, -1.0), scale=(1.4, 1.4), amplitude=2.2))
    grid_dims: Tuple[int, int] = (40, 40)
    resolution: Tuple[float, float] = (0.15, 0.15)
    grid_origin: Tuple[float, float] = (8.0, -3.0)
    dump_target: Tuple[float, float, float] = (-4.0, 10.0, 0.0)
    obstacles: Tuple[wm.Box, ...] = ()
    attack_planner: str = "greedy"          # greedy | highest | policy
    policy_checkpoint: Optional[str] = None
    r_tube: float = 1.0
    waypoint_spacing: float = 2.5
    approach_spacing: float = 1.2           # tail spacing near the attack point
    volume_threshold: float = 0.15          # m^3 / m^2, cycle-loop termination
    n_cycles: int = 30
    seed: int = 0
    s_crit: float = 1.0
    density: float = MATERIAL_DENSITY
    rrt_budget: int = 4000
    rrt_refine: int = 150
    voxel_size: float = 0.5
    use_noise: bool = True
    noise: sf.NoiseModel = field(default_factory=sf.NoiseModel)
    geometry: sf.GripperGeometry = field(default_factory=sf.GripperGeometry)
    params: mch.MachineParams = field(default_factory=mch.MachineParams)
    phase_timeout: float = 40.0             # sim seconds per tracked phase
    descent_limit: float = 12.0             # s, grasp phase-1 budget
    release_delay_range: Tuple[float, float] = (0.24, 0.36)
    swing_gate: float = 0.1                 # rad/s, release oscillation gating

    def __post_init__(self):
        lx = self.grid_dims[0] * self.resolution[0]
        ly = self.grid_dims[1] * self.resolution[1]
        box = (self.grid_origin[0], self.grid_origin[1],
               self.grid_origin[0] + lx, self.grid_origin[1] + ly)
        tx, ty = self.dump_target[0], self.dump_target[1]
        if box[0] <= tx <= box[2] and box[1] <= ty <= box[3]:
            raise ValueError("dump target lies inside the pile bounding box")
        if self.n_cycles < 0:
            raise ValueError("n_cycles must be >= 0")

    @property
    def grid_area(self) -> float:
        return (self.grid_dims[0] * self.resolution[0]
                * self.grid_dims[1] * self.resolution[1])

    def pile_box(self, z_top: float = 6.0) -> wm.Box:
        lx = self.grid_dims[0] * self.resolution[0]
        ly = self.grid_dims[1] * self.resolution[1]
        return wm.Box((self.grid_origin[0], self.grid_origin[1], -1.0),
                      (self.grid_origin[0] + lx, self.grid_origin[1] + ly, z_top))


@dataclass
class CycleMetrics:
    cycle_index: int
    scooped_volume: float
    duration: float
    duration_without_grasp: float
    mean_slew_speed_deg: float
    mean_tool_oscillation_deg: float
    tube_satisfaction: float               # percent of tracked steps
    landing_error: Optional[float] = None  # m, mean landing to dump target

    def as_row(self) -> dict:
        return {
            "cycle": self.cycle_index,
            "scooped_volume_m3": self.scooped_volume,
            "duration_s": self.duration,
            "duration_without_grasp_s": self.duration_without_grasp,
            "mean_slew_speed_deg_s": self.mean_slew_speed_deg,
            "mean_tool_oscillation_deg_s": self.mean_tool_oscillation_deg,
            "tube_satisfaction_pct": self.tube_satisfaction,
            "landing_error_m": ("" if self.landing_error is None
                                else self.landing_error),
        }


class PhaseFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Grasp routine

def grasp_routine(sim: mch.MachineSim, field_: sf.HeightField, attack,
                  geom: sf.GripperGeometry, s_crit: float = 1.0,
                  density: float = MATERIAL_DENSITY,
                  descent_limit: float = 12.0,
                  machine_xy=(0.0, 0.0)):
    """Three sequential phases: descend to contact, close the shells (the
    scoop executes against the field), retract the boom to clearance.

    Returns (field', scooped volume). Raises PhaseFailure when contact is not
    made within the descent budget.
    """
    ax, ay, az = float(attack[0]), float(attack[1]), float(attack[2])
    try:
        contact_z = max(az, field_.height_at(ax, ay) - 0.05)
    except sf.OutOfBoundsError:
        raise PhaseFailure("attack point outside the field")
    target_cyl = pp.to_cylindrical([ax, ay, contact_z])

    # phase 1: descend until the gripper reaches the contact height
    t0 = sim.state.time
    controller = mc.ScriptedTracker(k_phi=1.0, v_max=0.6)
    while sim.state.time - t0 < descent_limit:
        kin = sim.kinematics()
        if kin.end_effector[2] <= contact_z + 0.05:
            break
        cmd = controller.step(sim, target_cyl, 0.5)
        sim.step_control(mch.JointCommand(0.0, cmd.qd_ref_boom,
                                          cmd.qd_ref_stick, "hold"))
    else:
        raise PhaseFailure("no pile contact within the descent budget")

    # phase 2: close the shells; material leaves the field when fully closed
    while sim.state.shell_open_frac > 0.0:
        sim.step_control(mch.JointCommand(0.0, 0.0, 0.0, "close"))
    heading = ap.scoop_heading((ax, ay), machine_xy)
    field_, volume = sf.apply_scoop(field_, (ax, ay, az), geom, heading)
    field_ = sf.slump(field_, s_crit).field
    sim.state.load_mass = volume * density

    # phase 3: retract the boom to a clearance height above the surface
    clearance = contact_z + 2.0
    t1 = sim.state.time
    while sim.state.time - t1 < descent_limit:
        if sim.kinematics().end_effector[2] >= clearance:
            break
        sim.step_control(mch.JointCommand(0.0, 0.2, 0.05, "hold"))
    return field_, volume


# ---------------------------------------------------------------------------
# Tracking with audit

@dataclass
class TrackLog:
    configs: List[np.ndarray] = field(default_factory=list)
    tube_deltas: List[float] = field(default_factory=list)
    slew_rates: List[float] = field(default_factory=list)
    tool_rates: List[float] = field(default_factory=list)


def track_waypoints(sim: mch.MachineSim, waypoints: np.ndarray, r_tube: float,
                    timeout: float, log: TrackLog,
                    final_tolerance: float = 0.6, lookahead: int = 2) -> bool:
    """Scripted tracking through a cylindrical waypoint sequence.

    The controller aims `lookahead` waypoints ahead of the active one (pure
    pursuit over the densely subsampled path) while progress is still judged
    against the active waypoint: it advances when the gripper error drops
    below r_tube, and the final one requires final_tolerance. Returns True
    on arrival within timeout."""
    idx = 0
    start_ee = sim.kinematics().end_effector.copy()
    # transit profile: faster slew than the precision default, softened when
    # a load hangs in the gripper so the swing stays bounded
    if sim.state.load_mass <= 0:
        controller = mc.ScriptedTracker(k_phi=1.5, omega_max=0.3)
    else:
        controller = mc.ScriptedTracker()
    t0 = sim.state.time
    while sim.state.time - t0 < timeout:
        w = waypoints[idx]
        aim = waypoints[min(idx + lookahead, len(waypoints) - 1)]
        cmd = controller.step(sim, aim, r_tube)
        sim.step_control(cmd)
        s = sim.state
        kin = sim.kinematics()
        p1 = start_ee if idx == 0 else pp.waypoint_to_cartesian(waypoints[idx - 1])
        tube = pp.Tube(p1, pp.waypoint_to_cartesian(w), r_tube)
        log.configs.append(np.array([s.q_slew, s.q_boom, s.q_stick]))
        log.tube_deltas.append(pp.tube_distance(kin.end_effector, tube))
        log.slew_rates.append(abs(s.qd_slew))
        log.tool_rates.append(math.hypot(s.thetad_x, s.thetad_y))
        err = float(np.linalg.norm(kin.end_effector - pp.waypoint_to_cartesian(w)))
        if idx < len(waypoints) - 1:
            # pure pursuit can cut a corner past the active waypoint; advance
            # to the farthest lookahead waypoint already within tolerance
            for j in range(min(idx + lookahead, len(waypoints) - 1), idx - 1, -1):
                d = float(np.linalg.norm(
                    kin.end_effector - pp.waypoint_to_cartesian(waypoints[j])))
                if d < r_tube:
                    idx = j + 1 if j < len(waypoints) - 1 else j
                    break
        elif err < final_tolerance:
            return True
    return False


def _plan_phase_path(sim: mch.MachineSim, goal_cfg, vmap, scenario,
                     spacing: float, densify_tail: bool) -> np.ndarray:
    s = sim.state
    start = np.array([s.q_slew, s.q_boom, s.q_stick])
    jpath = pp.plan_rrtstar(start, np.asarray(goal_cfg, float), vmap,
                            sim.params, budget=scenario.rrt_budget,
                            seed=scenario.seed,
                            gripper_inflation=scenario.r_tube + 0.5,
                            refine_iters=scenario.rrt_refine,
                            link_inflation=scenario.r_tube)
    spath = pp.smooth_bspline(jpath, vmap, sim.params,
                              gripper_inflation=scenario.r_tube + 0.5,
                              link_inflation=scenario.r_tube)
    wps = pp.subsample_waypoints(spath, sim.params, spacing,
                                 densify_tail=densify_tail,
                                 tail_spacing=scenario.approach_spacing)
    return wps.waypoints


def build_world_map(scenario: ScenarioConfig, field_: sf.HeightField) -> wm.VoxelMap:
    """Occupancy from the soil surface plus virtual obstacles, with the pile
    bounding box masked out so approaches into it are plannable."""
    vmap = wm.voxelize_heightfield(field_, scenario.voxel_size)
    vmap = wm.mask_region(vmap, scenario.pile_box())
    for box in scenario.obstacles:
        vmap = wm.insert_virtual_obstacle(vmap, box)
    return vmap


def audit_collisions(configs: Sequence[np.ndarray], vmap: wm.VoxelMap,
                     params: mch.MachineParams) -> int:
    """Count executed configurations whose uninflated body proxy collides.

    Uses the exact sphere/voxel-box test: the conservative planner margin
    would flag near-clearance passes that do not actually touch."""
    hits = 0
    for cfg in configs:
        if wm.config_collides(cfg, vmap, params, gripper_inflation=0.0,
                              check_limits=False, exact=True):
            hits += 1
    return hits


# ---------------------------------------------------------------------------
# Full run

@dataclass
class RunResult:
    metrics: List[CycleMetrics]
    state: CycleState
    source_field: sf.HeightField
    destination_field: sf.HeightField
    initial_volume: float
    transferred_volume: float
    collision_hits: int
    landing_points: List[np.ndarray]
    stopped_reason: Optional[str] = None

    @property
    def transfer_fraction(self) -> float:
        if self.initial_volume <= 0:
            return 1.0
        return self.transferred_volume / self.initial_volume


def _attack_planner(scenario: ScenarioConfig):
    if scenario.attack_planner == "greedy":
        return lambda obs: ap.greedy_oracle(obs, scenario.geometry,
                                            machine_xy=(0.0, 0.0))
    if scenario.attack_planner == "highest":
        return lambda obs: ap.highest_point_heuristic(obs)
    if scenario.attack_planner == "policy":
        if not scenario.policy_checkpoint:
            raise ValueError("policy planner requires a checkpoint path")
        policy = ap.load_checkpoint(scenario.policy_checkpoint)
        env_cfg = ap.GraspEnvConfig(grid_dims=scenario.grid_dims,
                                    resolution=scenario.resolution,
                                    origin=scenario.grid_origin)
        return lambda obs: policy.attack_point(obs, env_cfg)
    raise ValueError(f"unknown attack planner {scenario.attack_planner!r}")


def run_cycles(scenario: ScenarioConfig, out_dir: Optional[str] = None,
               progress: bool = False) -> RunResult:
    rng = np.random.default_rng(scenario.seed)
    field_ = sf.init_field(scenario.pile, scenario.grid_dims,
                           scenario.resolution, scenario.grid_origin)
    field_ = sf.slump(field_, scenario.s_crit).field
    initial_volume = field_.total_volume()

    # destination field: 20x20 m sheet centered on the dump target
    dest_origin = (scenario.dump_target[0] - 10.0, scenario.dump_target[1] - 10.0)
    dest = sf.HeightField(np.zeros((40, 40)), 0.5, 0.5, dest_origin)

    planner = _attack_planner(scenario)
    target_cyl = pp.to_cylindrical(scenario.dump_target)
    sim = mch.MachineSim(scenario.params, mch.MachineState(
        q_slew=target_cyl[1], q_boom=0.5, q_stick=-0.6))
    state = CycleState()
    metrics: List[CycleMetrics] = []
    landing_points: List[np.ndarray] = []
    transferred = 0.0
    collision_hits = 0
    stopped_reason = None
    throw_cfg = mc.ThrowEnvConfig(
        release_delay_range=scenario.release_delay_range)

    while state.phase != STOPPED and state.cycle_index < scenario.n_cycles:
        if field_.total_volume() / scenario.grid_area < scenario.volume_threshold:
            break
        cycle_t0 = sim.state.time
        log = TrackLog()
        grasp_time = 0.0
        volume = 0.0
        landing_err = None
        try:
            # ---- WAYPOINT: approach the attack point
            obs = field_
            if scenario.use_noise:
                obs = sf.observe_noisy(field_, scenario.noise, rng)
                obs = sf.median_filter_observation(obs)
            attack = planner(obs)
            if attack is None:
                break
            attack = np.asarray(attack, dtype=float)
            hover = np.array([attack[0], attack[1],
                              max(field_.height_at(attack[0], attack[1]), attack[2]) + 1.2])
            goal = mch.inverse_kinematics(*pp.to_cylindrical(hover),
                                          params=scenario.params)
            if goal is None:
                raise PhaseFailure("attack point unreachable")
            vmap = build_world_map(scenario, field_)
            wps = _plan_phase_path(sim, goal, vmap, scenario,
                                   scenario.waypoint_spacing, densify_tail=True)
            n_before = len(log.configs)
            if not track_waypoints(sim, wps, scenario.r_tube,
                                   scenario.phase_timeout, log):
                raise PhaseFailure("approach tracking timed out")
            collision_hits += audit_collisions(log.configs[n_before:], vmap,
                                               scenario.params)
            state = sm_step(state, "SUCCESS", sim.state.time)

            # ---- GRASP
            g0 = sim.state.time
            field_, volume = grasp_routine(
                sim, field_, attack, scenario.geometry, scenario.s_crit,
                scenario.density, scenario.descent_limit)
            grasp_time = sim.state.time - g0
            state = sm_step(state, "SUCCESS", sim.state.time)

            # ---- THROW: carry to the dump target and release
            # highest reachable hover over the dump point, up to 5 m
            dump_goal, hover_z = None, None
            for z in np.arange(5.0, 1.9, -0.25):
                dump_goal = mch.inverse_kinematics(
                    target_cyl[0], target_cyl[1], float(z),
                    params=scenario.params)
                if dump_goal is not None:
                    hover_z = float(z)
                    break
            if dump_goal is None:
                raise PhaseFailure("dump target unreachable")
            vmap = build_world_map(scenario, field_)
            wps = _plan_phase_path(sim, dump_goal, vmap, scenario,
                                   scenario.waypoint_spacing, densify_tail=False)
            n_before = len(log.configs)
            track_waypoints(sim, wps, scenario.r_tube,
                            scenario.phase_timeout, log, final_tolerance=1.0)
            collision_hits += audit_collisions(log.configs[n_before:], vmap,
                                               scenario.params)
            if volume > 0:
                release = mc.ReleaseSim(throw_cfg, rng)
                oracle = mc.ReleaseOracle(scenario.dump_target, delay=0.3,
                                          tolerance=1.5,
                                          max_swing_rate=scenario.swing_gate)
                opened = False
                settled = False
                hover_cyl = np.array([target_cyl[0], target_cyl[1], hover_z])
                controller = mc.ScriptedTracker()
                t_rel = sim.state.time
                while sim.state.time - t_rel < scenario.phase_timeout:
                    dphi = mc.wrap_angle(target_cyl[1] - sim.state.q_slew)
                    if not settled and abs(dphi) < 0.03 \
                            and abs(sim.state.qd_slew) < 0.05:
                        settled = True
                    cmd = controller.step(sim, hover_cyl, scenario.r_tube)
                    kin = sim.kinematics()
                    if settled:
                        # coast the slew so residual sway damps instead of
                        # being pumped by station-keeping; once the arm
                        # attachment is on target, freeze the arm too, since
                        # chasing the swinging gripper feeds the pendulum
                        att_err = math.hypot(
                            kin.attachment_radius - hover_cyl[0],
                            kin.attachment[2]
                            - (hover_cyl[2] + mch.hang_depth(sim.params)))
                        qb = cmd.qd_ref_boom if att_err > 0.3 else 0.0
                        qs = cmd.qd_ref_stick if att_err > 0.3 else 0.0
                        cmd = mch.JointCommand(0.0, qb, qs, "hold")
                    swing = math.hypot(sim.state.thetad_x, sim.state.thetad_y)
                    if not opened and settled and oracle.release_now(
                            kin.end_effector, sim.end_effector_velocity(), swing):
                        opened = True
                    gcmd = "open" if opened else "hold"
                    cmd = mch.JointCommand(cmd.u_slew, cmd.qd_ref_boom,
                                           cmd.qd_ref_stick, gcmd)
                    for _ in range(mch.SUBSTEPS_PER_TICK):
                        sim.substep(cmd)
                        if opened:
                            release.command_open(sim.state.time)
                        release.step(sim.state.time,
                                     sim.kinematics().end_effector,
                                     sim.end_effector_velocity(), mch.SIM_DT)
                    if release.released:
                        sim.state.load_mass = 0.0
                    if release.all_landed():
                        break
                if not release.all_landed():
                    raise PhaseFailure("release never completed")
                pts = np.array([l.landing_point for l in release.loads])
                landing_points.extend(pts)
                landing_err = float(np.linalg.norm(
                    pts[:, :2].mean(axis=0) - np.asarray(scenario.dump_target[:2])))
                per_load = volume / len(pts)
                for p in pts:
                    try:
                        dest = sf.deposit(dest, p[:2], per_load)
                    except sf.OutOfBoundsError:
                        pass  # spilled outside the destination sheet
                dest = sf.slump(dest, scenario.s_crit).field
                transferred += volume
            state = sm_step(state, "SUCCESS", sim.state.time)
        except (PhaseFailure, pp.PlanningFailure, mch.InstabilityError) as exc:
            stopped_reason = f"{state.phase}: {exc}"
            state = sm_step(state, "FAILED", sim.state.time)
            break
        finally:
            duration = sim.state.time - cycle_t0
            if duration > 0:
                metrics.append(CycleMetrics(
                    cycle_index=len(metrics),
                    scooped_volume=volume,
                    duration=duration,
                    duration_without_grasp=duration - grasp_time,
                    mean_slew_speed_deg=math.degrees(
                        float(np.mean(log.slew_rates))) if log.slew_rates else 0.0,
                    mean_tool_oscillation_deg=math.degrees(
                        float(np.mean(log.tool_rates))) if log.tool_rates else 0.0,
                    tube_satisfaction=100.0 * float(
                        np.mean(np.array(log.tube_deltas) > 0))
                    if log.tube_deltas else 100.0,
                    landing_error=landing_err,
                ))
        if progress:
            m = metrics[-1]
            print(f"cycle {m.cycle_index}: {m.scooped_volume:.3f} m^3 "
                  f"in {m.duration:.1f} s")

    result = RunResult(metrics, state, field_, dest, initial_volume,
                       transferred, collision_hits, landing_points,
                       stopped_reason)
    if out_dir:
        write_artifacts(result, scenario, out_dir)
    return result


def write_artifacts(result: RunResult, scenario: ScenarioConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "cycles.csv"), "w", newline="") as f:
        fields = ["cycle", "scooped_volume_m3", "duration_s",
                  "duration_without_grasp_s", "mean_slew_speed_deg_s",
                  "mean_tool_oscillation_deg_s", "tube_satisfaction_pct",
                  "landing_error_m"]
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for m in result.metrics:
            writer.writerow(m.as_row())
    summary = {
        "cycles": len(result.metrics),
        "initial_volume_m3": result.initial_volume,
        "transferred_volume_m3": result.transferred_volume,
        "transfer_fraction": result.transfer_fraction,
        "collision_hits": result.collision_hits,
        "final_phase": result.state.phase,
        "stopped_reason": result.stopped_reason,
    }
    if len(result.landing_points) >= 2:
        stats = mc.fit_landing_gaussian(result.landing_points,
                                        scenario.dump_target)
        summary["landing_mean_error_m"] = stats.mean_error
        summary["landing_det_covariance"] = stats.det_covariance
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    sf.save_heightmap(result.source_field,
                      os.path.join(out_dir, "source_final.heightmap"))
    sf.save_heightmap(result.destination_field,
                      os.path.join(out_dir, "destination_final.heightmap"))

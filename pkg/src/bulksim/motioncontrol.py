"""Waypoint-following and throwing behaviors.

Provides the eight-term waypoint reward and nine-term throw reward with
per-term breakdowns, scripted analytic controllers (cylindrical tracking with
anti-sway, ballistic release timing), discrete-load release simulation,
landing statistics, random waypoint generation, and gym-style environment
wrappers over MachineSim for both skills.
"""

import json
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import machine as mch
from . import pathplan as pp


def wrap_angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


# ---------------------------------------------------------------------------
# Configuration

@dataclass(frozen=True)
class RewardCoefficients:
    target_coarse: float = 1.0
    target_fine: float = 2.0
    progress: float = 0.5
    action: float = 0.05
    overshoot: float = 0.5
    oscillation: float = 0.1
    tube: float = 0.2
    final: float = 0.1
    throw: float = 2.0


@dataclass(frozen=True)
class TrackerEnvConfig:
    n_waypoints: int = 5
    horizon: int = 3
    r_tube: float = 1.0
    episode_length: float = 15.0
    history_slew: int = 5
    history_arm: int = 3
    history_tool: int = 3
    obs_noise_scale: float = 0.01   # fraction of each normalization factor
    coefficients: RewardCoefficients = field(default_factory=RewardCoefficients)
    # waypoint generation
    rotation_persistence: float = 2.0 / 3.0
    manhattan_bound: float = 6.0
    final_low_prob: float = 0.5
    final_low_z: Tuple[float, float] = (1.0, 3.0)
    radius_range: Tuple[float, float] = (9.0, 15.0)
    z_range: Tuple[float, float] = (1.5, 8.0)
    # safety termination
    ground_clearance: float = 0.3
    cabin_clearance: float = 2.0
    terminal_penalty: float = -10.0
    load_range: Tuple[float, float] = (0.0, 3000.0)  # kg

    def __post_init__(self):
        if self.horizon > self.n_waypoints:
            raise ValueError("horizon must be <= number of waypoints")
        if self.r_tube <= 0:
            raise ValueError("r_tube must be positive")


@dataclass(frozen=True)
class ThrowEnvConfig:
    tracker: TrackerEnvConfig = field(default_factory=TrackerEnvConfig)
    gripper_threshold: float = 0.5
    release_delay_range: Tuple[float, float] = (0.24, 0.36)
    load_interval: float = 0.5
    hover_offset: float = 5.0
    n_loads: int = 3

    def __post_init__(self):
        lo, hi = self.release_delay_range
        if not (0.0 < lo <= hi):
            raise ValueError("release delay range must be positive")
        if not (0.0 < self.gripper_threshold < 1.0):
            raise ValueError("gripper threshold must be in (0, 1)")


SIGMA_U_WAYPOINT = np.array([mch.JointCommand.U_SLEW_MAX,
                             mch.JointCommand.QD_REF_MAX,
                             mch.JointCommand.QD_REF_MAX])
SIGMA_U_THROW = np.concatenate([SIGMA_U_WAYPOINT, [1.0]])


# ---------------------------------------------------------------------------
# Rewards

@dataclass(frozen=True)
class Transition:
    """One control-tick snapshot with everything the rewards consume.

    phi is the angular offset from the current slew position to the active
    waypoint; phi_initial is its value when that waypoint became active.
    Positions are world Cartesian meters.
    """
    ee: np.ndarray
    waypoint: np.ndarray
    final_waypoint: np.ndarray
    m: int
    n_waypoints: int
    p1: np.ndarray
    p2: np.ndarray
    r_tube: float
    u: np.ndarray
    u_prev: np.ndarray
    sigma_u: np.ndarray
    phi: float
    phi_initial: float
    tool_rates: Tuple[float, float]
    chi: bool = False
    load_positions: Optional[np.ndarray] = None   # (n_loads, 3) when throwing


def _tube_indicator(tr: Transition) -> float:
    delta = pp.tube_distance(tr.ee, pp.Tube(tr.p1, tr.p2, tr.r_tube))
    axis = np.asarray(tr.p2, float) - np.asarray(tr.p1, float)
    inside = (delta >= 0.0
              and float(np.dot(tr.ee - tr.p1, axis)) >= 0.0
              and float(np.dot(tr.ee - tr.p2, axis)) <= 0.0)
    return 1.0 if inside else 0.0


def _overshoot(tr: Transition) -> float:
    if tr.phi_initial < 0.0:
        return max(0.0, tr.phi)
    if tr.phi_initial > 0.0:
        return min(0.0, tr.phi)
    return 0.0


def waypoint_reward(tr: Transition,
                    coeffs: RewardCoefficients = RewardCoefficients()
                    ) -> Tuple[float, dict]:
    """Eight-term tracking reward with a per-term breakdown."""
    eps = np.asarray(tr.waypoint, float) - np.asarray(tr.ee, float)
    eps_final = np.asarray(tr.final_waypoint, float) - np.asarray(tr.ee, float)
    du = (np.asarray(tr.u, float) - np.asarray(tr.u_prev, float)) / tr.sigma_u
    un = np.asarray(tr.u, float) / tr.sigma_u
    terms = {
        "target_coarse": coeffs.target_coarse
        * (math.exp(-float(np.sum(np.abs(eps)))) - 1.0),
        "target_fine": coeffs.target_fine
        * math.exp(-float(np.dot(eps, eps))),
        "progress": coeffs.progress * tr.m / tr.n_waypoints,
        "action": -coeffs.action * float(np.dot(du, du)),
        "overshoot": coeffs.overshoot * (math.exp(-abs(_overshoot(tr))) - 1.0),
        "oscillation": -coeffs.oscillation
        * (abs(tr.tool_rates[0]) + abs(tr.tool_rates[1])),
        "tube": coeffs.tube * _tube_indicator(tr),
        "final": (-coeffs.final * float(np.dot(un, un))
                  if float(np.linalg.norm(eps_final)) < tr.r_tube else 0.0),
    }
    return sum(terms.values()), terms


def load_error_vector(load_positions: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Mean of the per-axis absolute load-to-target errors (3-vector)."""
    diffs = np.abs(np.asarray(target, float)[None, :]
                   - np.asarray(load_positions, float))
    return diffs.mean(axis=0)


def throw_reward(tr: Transition,
                 coeffs: RewardCoefficients = RewardCoefficients(),
                 hover_offset: float = 5.0) -> Tuple[float, dict]:
    """Nine-term throwing reward.

    The tracking error to the last waypoint gains a vertical hover offset;
    on the last waypoint the fine term switches to the released-load error,
    gated on the release flag, and the throw term mirrors it.
    """
    last = tr.m == tr.n_waypoints
    eps = np.asarray(tr.waypoint, float) - np.asarray(tr.ee, float)
    if last:
        eps = eps + np.array([0.0, 0.0, hover_offset])
    eps_final = np.asarray(tr.final_waypoint, float) - np.asarray(tr.ee, float) \
        + np.array([0.0, 0.0, hover_offset])
    du = (np.asarray(tr.u, float) - np.asarray(tr.u_prev, float)) / tr.sigma_u
    un = np.asarray(tr.u, float) / tr.sigma_u

    if last:
        if tr.chi and tr.load_positions is not None:
            lv = load_error_vector(tr.load_positions, tr.final_waypoint)
            fine_base = math.exp(-float(np.dot(lv, lv)))
        else:
            fine_base = 0.0
    else:
        fine_base = math.exp(-float(np.dot(eps, eps)))

    final_gate = (float(np.linalg.norm(eps_final)) < tr.r_tube) \
        or (last and tr.chi)
    terms = {
        "target_coarse": coeffs.target_coarse
        * (math.exp(-float(np.sum(np.abs(eps)))) - 1.0),
        "target_fine": coeffs.target_fine * fine_base,
        "throw": coeffs.throw * fine_base if last else 0.0,
        "progress": coeffs.progress * tr.m / tr.n_waypoints,
        "action": -coeffs.action * float(np.dot(du, du)),
        "overshoot": coeffs.overshoot * (math.exp(-abs(_overshoot(tr))) - 1.0),
        "oscillation": -coeffs.oscillation
        * (abs(tr.tool_rates[0]) + abs(tr.tool_rates[1])),
        "tube": coeffs.tube * _tube_indicator(tr),
        "final": -coeffs.final * float(np.dot(un, un)) if final_gate else 0.0,
    }
    return sum(terms.values()), terms


# ---------------------------------------------------------------------------
# Discrete loads and ballistics

@dataclass
class DiscreteLoad:
    position: np.ndarray
    velocity: np.ndarray
    spawn_time: float
    landed: bool = False
    landing_point: Optional[np.ndarray] = None


def ballistic_landing(position, velocity, gravity: float = 9.81,
                      ground: float = 0.0) -> Tuple[np.ndarray, float]:
    """Closed-form landing point and flight time of a projectile."""
    p = np.asarray(position, dtype=float)
    v = np.asarray(velocity, dtype=float)
    h = p[2] - ground
    if h < 0:
        h = 0.0
    t = (v[2] + math.sqrt(v[2] * v[2] + 2.0 * gravity * h)) / gravity
    land = np.array([p[0] + v[0] * t, p[1] + v[1] * t, ground])
    return land, t


def step_load(load: DiscreteLoad, dt: float, gravity: float = 9.81,
              ground: float = 0.0) -> DiscreteLoad:
    """One ballistic substep; horizontal velocity is conserved exactly and the
    ground crossing is resolved at the exact sub-step time."""
    if load.landed:
        return load
    p, v = load.position, load.velocity
    new_z = p[2] + v[2] * dt - 0.5 * gravity * dt * dt
    if new_z <= ground:
        land, _ = ballistic_landing(p, v, gravity, ground)
        load.position = land
        load.velocity = np.zeros(3)
        load.landed = True
        load.landing_point = land.copy()
        return load
    load.position = np.array([p[0] + v[0] * dt, p[1] + v[1] * dt, new_z])
    load.velocity = np.array([v[0], v[1], v[2] - gravity * dt])
    return load


class ReleaseSim:
    """Spawns three discrete loads after the gripper-open command and flies
    them ballistically. The first load appears after the (randomized) hardware
    delay, the rest at fixed intervals."""

    def __init__(self, cfg: ThrowEnvConfig, rng: Optional[np.random.Generator] = None,
                 gravity: float = 9.81, ground: float = 0.0):
        self.cfg = cfg
        self.gravity = gravity
        self.ground = ground
        rng = rng or np.random.default_rng()
        self.delay = float(rng.uniform(*cfg.release_delay_range))
        self.open_time: Optional[float] = None
        self.loads: List[DiscreteLoad] = []

    def command_open(self, t: float):
        if self.open_time is None:
            self.open_time = t

    @property
    def released(self) -> bool:
        """True once the first load is airborne (the chi flag)."""
        return len(self.loads) > 0

    def spawn_times(self) -> List[float]:
        if self.open_time is None:
            return []
        return [self.open_time + self.delay + i * self.cfg.load_interval
                for i in range(self.cfg.n_loads)]

    def step(self, t: float, gripper_pos, gripper_vel, dt: float):
        """Advance flight by dt, spawning any load whose time arrived."""
        times = self.spawn_times()
        while len(self.loads) < len(times) and t >= times[len(self.loads)]:
            self.loads.append(DiscreteLoad(
                np.asarray(gripper_pos, float).copy(),
                np.asarray(gripper_vel, float).copy(), t))
        for load in self.loads:
            step_load(load, dt, self.gravity, self.ground)

    def all_landed(self) -> bool:
        return len(self.loads) == self.cfg.n_loads \
            and all(l.landed for l in self.loads)

    def load_positions(self) -> Optional[np.ndarray]:
        if not self.loads:
            return None
        return np.array([l.position for l in self.loads])


@dataclass(frozen=True)
class LandingStats:
    landing_points: np.ndarray     # (n, 2) ground-plane points
    mean: np.ndarray               # fitted Gaussian mean, m
    covariance: np.ndarray         # (2, 2) sample covariance, m^2
    mean_error: float              # distance of the mean to the target, m
    det_covariance: float


def fit_landing_gaussian(landings, target) -> LandingStats:
    pts = np.asarray(landings, dtype=float)[:, :2]
    if len(pts) < 2:
        raise ValueError("need at least 2 landing points for statistics")
    mean = pts.mean(axis=0)
    cov = np.cov(pts.T, ddof=1)
    target_xy = np.asarray(target, dtype=float)[:2]
    return LandingStats(pts, mean, cov,
                        float(np.linalg.norm(mean - target_xy)),
                        float(np.linalg.det(cov)))


def write_landing_report(path, landings, target, extra: dict = None):
    stats = fit_landing_gaussian(landings, target)
    report = {
        "target": list(np.asarray(target, float)[:2]),
        "landing_points": stats.landing_points.tolist(),
        "mean": stats.mean.tolist(),
        "covariance": stats.covariance.tolist(),
        "mean_error": stats.mean_error,
        "det_covariance": stats.det_covariance,
    }
    if extra:
        report.update(extra)
    with open(path, "w") as f:
        json.dump(report, f, indent=2)
    return stats


# ---------------------------------------------------------------------------
# Release timing oracle

class ReleaseOracle:
    """Analytic release trigger: extrapolate the gripper by the actuation
    delay, fly a virtual load ballistically, and open when the predicted
    landing error bottoms out under tolerance."""

    def __init__(self, target, delay: float = 0.3, tolerance: float = 0.5,
                 gravity: float = 9.81, ground: float = 0.0,
                 max_swing_rate: Optional[float] = None,
                 max_speed: Optional[float] = None):
        self.target = np.asarray(target, dtype=float)
        self.delay = delay
        self.tolerance = tolerance
        self.gravity = gravity
        self.ground = ground
        self.max_swing_rate = max_swing_rate  # oscillation gating when set
        # speed gate: later loads release once the gripper has moved on, so
        # a near-hover release keeps the whole burst tight
        self.max_speed = max_speed
        self._prev_error = math.inf

    def predicted_error(self, position, velocity) -> float:
        p = np.asarray(position, float) + self.delay * np.asarray(velocity, float)
        land, _ = ballistic_landing(p, velocity, self.gravity, self.ground)
        return float(np.linalg.norm(land[:2] - self.target[:2]))

    def release_now(self, position, velocity, swing_rate: float = 0.0) -> bool:
        err = self.predicted_error(position, velocity)
        prev = self._prev_error
        self._prev_error = err
        if self.max_swing_rate is not None and swing_rate >= self.max_swing_rate:
            return False
        if self.max_speed is not None \
                and float(np.linalg.norm(np.asarray(velocity, float)[:2])) \
                > self.max_speed:
            return False
        if err > self.tolerance:
            return False
        # fire near the optimum: either close enough outright or just past
        # the minimum of the error curve
        return err <= 0.1 or err >= prev


# ---------------------------------------------------------------------------
# Waypoint generation

def generate_waypoints(cfg: TrackerEnvConfig, rng: np.random.Generator,
                       start_cyl=None) -> np.ndarray:
    """Random waypoint sequences in absolute cylindrical (r, phi, z).

    Rotation direction persists for the whole sequence in 2/3 of draws;
    consecutive waypoints keep a bounded cylindrical Manhattan distance; half
    the sequences end with a low final waypoint below the previous one."""
    r_lo, r_hi = cfg.radius_range
    z_lo, z_hi = cfg.z_range
    if start_cyl is None:
        start = np.array([rng.uniform(r_lo, r_hi), rng.uniform(-math.pi, math.pi),
                          rng.uniform(z_lo, z_hi)])
    else:
        start = np.asarray(start_cyl, dtype=float)
    persist = rng.random() < cfg.rotation_persistence
    direction = 1.0 if rng.random() < 0.5 else -1.0
    low_final = rng.random() < cfg.final_low_prob

    wps = np.empty((cfg.n_waypoints, 3))
    prev = start.copy()
    for m in range(cfg.n_waypoints):
        if not persist:
            direction = 1.0 if rng.random() < 0.5 else -1.0
        budget = cfg.manhattan_bound
        dphi = direction * rng.uniform(0.25, 0.45)
        budget -= abs(dphi) * prev[0]
        dr = rng.uniform(-1.0, 1.0)
        dz = rng.uniform(-1.0, 1.0)
        scale = min(1.0, max(budget, 0.5) / max(abs(dr) + abs(dz), 1e-9))
        r = float(np.clip(prev[0] + dr * scale, r_lo, r_hi))
        z = float(np.clip(prev[2] + dz * scale, z_lo, z_hi))
        if m == cfg.n_waypoints - 1 and low_final:
            z = min(float(rng.uniform(*cfg.final_low_z)), prev[2])
        wps[m] = [r, prev[1] + dphi, z]
        prev = wps[m]
    return wps


# ---------------------------------------------------------------------------
# Scripted tracking controller

@dataclass
class TrackerState:
    """Mutable progress through a waypoint sequence."""
    index: int = 0                       # 0-based active waypoint
    phi_initial: Optional[float] = None  # angular offset at activation
    u_prev: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def m(self) -> int:
        return self.index + 1


def _arm_jacobian(state: mch.MachineState, params: mch.MachineParams) -> np.ndarray:
    """2x2 Jacobian of the attachment (r, z) wrt (q_boom, q_stick)."""
    qb, qs = state.q_boom, state.q_stick
    lb, ls = params.boom_length, params.stick_length
    return np.array([
        [-lb * math.sin(qb) - ls * math.sin(qb + qs), -ls * math.sin(qb + qs)],
        [lb * math.cos(qb) + ls * math.cos(qb + qs), ls * math.cos(qb + qs)],
    ])


class ScriptedTracker:
    """Proportional cylindrical tracking with slew braking and command
    slope limiting.

    The slew joystick decelerates proportionally to the measured rate so the
    remaining angular error limits overshoot; boom/stick velocity references
    come from a damped 2x2 Jacobian inverse on the radial/vertical error.
    Per-tick command slopes are limited: gentle input profiles keep the
    support accelerations, and hence the free tool swing, small."""

    def __init__(self, k_phi: float = 1.0, k_vel: float = 2.0,
                 omega_max: float = 0.12,
                 k_pos: float = 0.8, v_max: float = 0.9,
                 du_slew: float = 0.06, dqd_ref: float = 0.03):
        self.k_phi = k_phi
        self.k_vel = k_vel
        self.omega_max = omega_max    # slew rate ceiling, rad/s
        self.k_pos = k_pos
        self.v_max = v_max
        self.du_slew = du_slew        # max joystick change per control tick
        self.dqd_ref = dqd_ref        # max velocity-ref change per tick, rad/s
        self._prev = np.zeros(3)

    def step(self, sim: mch.MachineSim, waypoint_cyl,
             r_tube: float) -> mch.JointCommand:
        s, p = sim.state, sim.params
        kin = sim.kinematics()
        # servo the resting gripper position (attachment minus hang depth):
        # tracking the deflected gripper itself feeds the swing back into the
        # commands and pumps the pendulum
        r = kin.attachment_radius
        phi = s.q_slew
        z = kin.attachment[2] - mch.hang_depth(p)
        r_w, phi_w, z_w = waypoint_cyl
        dphi = wrap_angle(phi_w - phi)
        dr = r_w - r
        dz = z_w - z

        # desired slew rate from the angular error, turned into a joystick
        # through the inverse of the inertia-scaled steady-state map, with a
        # feedback term that brakes as the error closes
        omega_des = float(np.clip(self.k_phi * dphi,
                                  -self.omega_max, self.omega_max))
        inertia = mch.config_inertia(s, p)
        u_ff = omega_des * (p.slew_inertia_ref + inertia) \
            / (p.slew_inertia_ref * p.slew_omega_max)
        u_slew = float(np.clip(u_ff + self.k_vel * (omega_des - s.qd_slew),
                               -mch.JointCommand.U_SLEW_MAX,
                               mch.JointCommand.U_SLEW_MAX))

        v = np.array([self.k_pos * dr, self.k_pos * dz])
        speed = float(np.linalg.norm(v))
        if speed > self.v_max:
            v *= self.v_max / speed
        J = _arm_jacobian(s, p)
        # damped least squares keeps refs bounded near singularities
        JT = J.T
        qd = JT @ np.linalg.solve(J @ JT + 0.05 * np.eye(2), v)

        raw = np.array([u_slew, qd[0], qd[1]])
        limit = np.array([self.du_slew, self.dqd_ref, self.dqd_ref])
        cmd = self._prev + np.clip(raw - self._prev, -limit, limit)
        self._prev = cmd
        return mch.JointCommand(cmd[0], cmd[1], cmd[2]).clamped()


def scripted_tracker_step(sim: mch.MachineSim, waypoint_cyl, r_tube: float,
                          tracker: Optional[ScriptedTracker] = None,
                          **gains) -> mch.JointCommand:
    """One tracking command; pass a persistent ScriptedTracker to keep the
    command slope limits across ticks (a fresh one starts from zero)."""
    tracker = tracker or ScriptedTracker(**gains)
    return tracker.step(sim, waypoint_cyl, r_tube)


# ---------------------------------------------------------------------------
# Environment wrappers

class ObservationSpec:
    """Observation layout shared by both environments."""

    def __init__(self, cfg: TrackerEnvConfig, with_gripper: bool):
        self.cfg = cfg
        self.with_gripper = with_gripper
        self.n_action_hist = cfg.history_slew + 2 * cfg.history_arm \
            + (cfg.history_slew if with_gripper else 0)
        self.n_vel_hist = cfg.history_slew + 2 * cfg.history_arm \
            + 2 * cfg.history_tool
        self.n_positions = 4       # boom, stick, tool_x, tool_y
        self.n_inertia = 1
        self.n_waypoints = 3 * cfg.horizon
        self.n_flags = 1           # last-waypoint flag
        self.n_tube = 1
        self.n_chi = 1 if with_gripper else 0

    @property
    def size(self) -> int:
        return (self.n_action_hist + self.n_vel_hist + self.n_positions
                + self.n_inertia + self.n_waypoints + self.n_flags
                + self.n_tube + self.n_chi)


class WaypointEnv:
    """Tracking environment: action (u_slew, qd_boom_ref, qd_stick_ref)."""

    ACTION_DIM = 3

    def __init__(self, cfg: TrackerEnvConfig = None, seed: int = 0,
                 params: mch.MachineParams = None):
        self.cfg = cfg or TrackerEnvConfig()
        self.rng = np.random.default_rng(seed)
        self.base_params = params or mch.MachineParams()
        self.obs_spec = ObservationSpec(self.cfg, with_gripper=False)
        self.sim: Optional[mch.MachineSim] = None
        self.reset()

    # -- episode setup -----------------------------------------------------

    def _randomized_params(self) -> mch.MachineParams:
        rng, bp = self.rng, self.base_params
        return replace(
            bp,
            arm_K=float(rng.uniform(0.8, 1.2) * bp.arm_K),
            arm_delay=int(rng.integers(max(0, bp.arm_delay - 3), bp.arm_delay + 4)),
            l_x=float(rng.uniform(0.9, 1.1) * bp.l_x),
            l_y=float(rng.uniform(0.9, 1.1) * bp.l_y),
            b_fx=float(rng.uniform(0.8, 1.2) * bp.b_fx),
            b_fy=float(rng.uniform(0.8, 1.2) * bp.b_fy),
        )

    def _initial_state(self, params) -> mch.MachineState:
        rng = self.rng
        for _ in range(100):
            qb = float(rng.uniform(*params.boom_limits))
            qs = float(rng.uniform(*params.stick_limits))
            st = mch.MachineState(q_slew=float(rng.uniform(-math.pi, math.pi)),
                                  q_boom=qb, q_stick=qs,
                                  load_mass=float(rng.uniform(*self.cfg.load_range)))
            kin = mch.forward_kinematics(st, params)
            # keep the start pose inside the band waypoints are drawn from,
            # mirroring deployment where episodes begin mid-path
            if (self.cfg.z_range[0] <= kin.end_effector[2]
                    <= self.cfg.z_range[1] + 1.5
                    and self.cfg.radius_range[0] - 1.5 <= kin.cylindrical[0]
                    <= self.cfg.radius_range[1] + 1.5):
                return st
        return mch.MachineState()

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        params = self._randomized_params()
        state = self._initial_state(params)
        self.sim = mch.MachineSim(params, state)
        kin = self.sim.kinematics()
        self.waypoints = generate_waypoints(self.cfg, self.rng,
                                            start_cyl=kin.cylindrical)
        self.tracker = TrackerState(u_prev=np.zeros(self.ACTION_DIM))
        self._activate_waypoint(0)
        self.t0 = self.sim.state.time
        self._hist_u = [np.zeros(self.ACTION_DIM)] * self.cfg.history_slew
        self._hist_qd = [np.zeros(5)] * self.cfg.history_slew
        return self.observe()

    def _activate_waypoint(self, index: int):
        self.tracker.index = index
        kin = self.sim.kinematics()
        w = self.waypoints[index]
        self.tracker.phi_initial = wrap_angle(w[1] - kin.cylindrical[1])

    # -- geometry helpers --------------------------------------------------

    def waypoint_cartesian(self, index: int) -> np.ndarray:
        return pp.waypoint_to_cartesian(self.waypoints[index])

    def tube(self) -> pp.Tube:
        i = self.tracker.index
        if i == 0:
            kin_start = self.waypoint_cartesian(0)
            # first segment: from the episode start toward waypoint 1
            p1 = getattr(self, "_start_ee", kin_start)
        else:
            p1 = self.waypoint_cartesian(i - 1)
        return pp.Tube(np.asarray(p1, float), self.waypoint_cartesian(i),
                       self.cfg.r_tube)

    def _waypoint_window(self) -> np.ndarray:
        """Next `horizon` waypoints, repeating the final one; phi is reported
        as angular error from the current slew position."""
        kin = self.sim.kinematics()
        out = np.empty((self.cfg.horizon, 3))
        for k in range(self.cfg.horizon):
            idx = min(self.tracker.index + k, len(self.waypoints) - 1)
            r, phi, z = self.waypoints[idx]
            out[k] = [r, wrap_angle(phi - kin.cylindrical[1]), z]
        return out

    # -- observation -------------------------------------------------------

    def _velocity_vector(self) -> np.ndarray:
        s = self.sim.state
        return np.array([s.qd_slew, s.qd_boom, s.qd_stick,
                         s.thetad_x, s.thetad_y])

    def _history_blocks(self):
        cfg = self.cfg
        u_hist = np.array(self._hist_u[-cfg.history_slew:])
        qd_hist = np.array(self._hist_qd[-cfg.history_slew:])
        blocks = [
            u_hist[:, 0],                        # slew actions, H=5
            u_hist[-cfg.history_arm:, 1],        # boom actions, H=3
            u_hist[-cfg.history_arm:, 2],        # stick actions
            qd_hist[:, 0],
            qd_hist[-cfg.history_arm:, 1],
            qd_hist[-cfg.history_arm:, 2],
            qd_hist[-cfg.history_tool:, 3],
            qd_hist[-cfg.history_tool:, 4],
        ]
        return blocks

    def _assemble_obs(self, extra_blocks=(), extra_clean=()) -> np.ndarray:
        s = self.sim.state
        kin = self.sim.kinematics()
        delta = pp.tube_distance(kin.end_effector, self.tube())
        noisy = np.concatenate(
            list(self._history_blocks())
            + [np.array([s.q_boom, s.q_stick, s.theta_x, s.theta_y]),
               np.array([mch.config_inertia(s, self.sim.params)
                         / self.sim.params.slew_inertia_ref])]
            + list(extra_blocks))
        if self.cfg.obs_noise_scale > 0:
            scale = np.maximum(np.abs(noisy), 1.0) * self.cfg.obs_noise_scale
            noisy = noisy + self.rng.uniform(-1, 1, noisy.shape) * scale
        clean = np.concatenate(
            [self._waypoint_window().ravel(),
             np.array([1.0 if self.tracker.m == len(self.waypoints) else 0.0]),
             np.array([delta])]
            + list(extra_clean))
        return np.concatenate([noisy, clean])

    def observe(self) -> np.ndarray:
        return self._assemble_obs()

    # -- stepping ----------------------------------------------------------

    def _safety_violation(self) -> bool:
        kin = self.sim.kinematics()
        return (kin.end_effector[2] < self.cfg.ground_clearance
                or kin.cylindrical[0] < self.cfg.cabin_clearance)

    def _make_transition(self, u: np.ndarray, sigma_u: np.ndarray,
                         chi=False, load_positions=None) -> Transition:
        s = self.sim.state
        kin = self.sim.kinematics()
        tube = self.tube()
        w = self.waypoints[self.tracker.index]
        return Transition(
            ee=kin.end_effector,
            waypoint=self.waypoint_cartesian(self.tracker.index),
            final_waypoint=self.waypoint_cartesian(len(self.waypoints) - 1),
            m=self.tracker.m, n_waypoints=len(self.waypoints),
            p1=tube.p1, p2=tube.p2, r_tube=self.cfg.r_tube,
            u=u, u_prev=self.tracker.u_prev.copy(), sigma_u=sigma_u,
            phi=wrap_angle(w[1] - kin.cylindrical[1]),
            phi_initial=self.tracker.phi_initial,
            tool_rates=(s.thetad_x, s.thetad_y),
            chi=chi, load_positions=load_positions)

    def _advance_waypoint(self):
        kin = self.sim.kinematics()
        err = float(np.linalg.norm(
            kin.end_effector - self.waypoint_cartesian(self.tracker.index)))
        if err < self.cfg.r_tube and self.tracker.index < len(self.waypoints) - 1:
            self._activate_waypoint(self.tracker.index + 1)

    def step(self, action):
        u = np.asarray(action, dtype=float)[:self.ACTION_DIM]
        cmd = mch.JointCommand(u[0], u[1], u[2]).clamped()
        u = np.array([cmd.u_slew, cmd.qd_ref_boom, cmd.qd_ref_stick])
        done, penalty = False, 0.0
        try:
            self.sim.step_control(cmd)
        except mch.InstabilityError:
            done, penalty = True, self.cfg.terminal_penalty
        tr = self._make_transition(u, SIGMA_U_WAYPOINT)
        reward, terms = waypoint_reward(tr, self.cfg.coefficients)
        if not done and self._safety_violation():
            done, penalty = True, self.cfg.terminal_penalty
        reward += penalty
        self.tracker.u_prev = u
        self._hist_u.append(u)
        self._hist_qd.append(self._velocity_vector())
        self._advance_waypoint()
        if self.sim.state.time - self.t0 >= self.cfg.episode_length - 1e-9:
            done = True
        info = {"reward_terms": terms, "m": tr.m,
                "tube_distance": pp.tube_distance(tr.ee, self.tube()),
                "terminated_unsafe": penalty != 0.0}
        return self.observe(), reward, done, info


class ThrowEnv(WaypointEnv):
    """Throwing environment: adds the gripper action, discrete-load release,
    and the release flag chi to observations and rewards."""

    ACTION_DIM = 4

    def __init__(self, cfg: ThrowEnvConfig = None, seed: int = 0,
                 params: mch.MachineParams = None):
        self.throw_cfg = cfg or ThrowEnvConfig()
        super().__init__(self.throw_cfg.tracker, seed=seed, params=params)
        self.obs_spec = ObservationSpec(self.cfg, with_gripper=True)

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        obs = super().reset(seed)
        # final waypoint is the ground throw target
        self.waypoints[-1][2] = 0.0
        self.release = ReleaseSim(self.throw_cfg, self.rng)
        self.sim.state.load_mass = max(self.sim.state.load_mass, 500.0)
        self._opened = False
        return self.observe()

    def observe(self) -> np.ndarray:
        chi = 1.0 if getattr(self, "release", None) and self.release.released \
            else 0.0
        return self._assemble_obs(extra_clean=[np.array([chi])])

    def _history_blocks(self):
        blocks = super()._history_blocks()
        u_hist = np.array(self._hist_u[-self.cfg.history_slew:])
        if u_hist.shape[1] > 3:
            blocks.insert(3, u_hist[:, 3])   # gripper action history, H=5
        else:
            blocks.insert(3, np.zeros(self.cfg.history_slew))
        return blocks

    def step(self, action):
        u = np.asarray(action, dtype=float)[:self.ACTION_DIM]
        gripper = "hold"
        if not self._opened and u[3] > self.throw_cfg.gripper_threshold:
            self._opened = True
        if self._opened:
            gripper = "open"
            self.release.command_open(self.sim.state.time)
        cmd = mch.JointCommand(u[0], u[1], u[2], gripper).clamped()
        u = np.array([cmd.u_slew, cmd.qd_ref_boom, cmd.qd_ref_stick, u[3]])

        done, penalty = False, 0.0
        try:
            for _ in range(mch.SUBSTEPS_PER_TICK):
                self.sim.substep(cmd)
                kin = self.sim.kinematics()
                self.release.step(self.sim.state.time, kin.end_effector,
                                  self.sim.end_effector_velocity(), mch.SIM_DT)
        except mch.InstabilityError:
            done, penalty = True, self.cfg.terminal_penalty
        if self.release.released and self.sim.state.load_mass > 0:
            self.sim.state.load_mass = 0.0

        tr = self._make_transition(u, SIGMA_U_THROW,
                                   chi=self.release.released,
                                   load_positions=self.release.load_positions())
        reward, terms = throw_reward(tr, self.cfg.coefficients,
                                     self.throw_cfg.hover_offset)
        if not done and self._safety_violation():
            done, penalty = True, self.cfg.terminal_penalty
        reward += penalty
        self.tracker.u_prev = u
        self._hist_u.append(u)
        self._hist_qd.append(self._velocity_vector())
        self._advance_waypoint()
        if self.sim.state.time - self.t0 >= self.cfg.episode_length - 1e-9:
            done = True
        info = {"reward_terms": terms, "m": tr.m, "chi": self.release.released,
                "loads": self.release.load_positions(),
                "all_landed": self.release.all_landed(),
                "terminated_unsafe": penalty != 0.0}
        return self.observe(), reward, done, info

    def _safety_violation(self) -> bool:
        # the ground target legitimately brings the gripper low once the
        # material is away; keep the cabin guard only after release
        kin = self.sim.kinematics()
        if kin.cylindrical[0] < self.cfg.cabin_clearance:
            return True
        if getattr(self, "release", None) and self.release.released:
            return False
        return kin.end_effector[2] < self.cfg.ground_clearance


# ---------------------------------------------------------------------------
# Scripted episode runners (acceptance statistics)

def run_scripted_tracking_episode(cfg: TrackerEnvConfig, seed: int) -> dict:
    """One scripted-tracker episode; reports per-step tube distances."""
    env = WaypointEnv(cfg, seed=seed)
    env._start_ee = env.sim.kinematics().end_effector.copy()
    controller = ScriptedTracker()
    deltas, reached = [], 0
    n_steps = int(round(cfg.episode_length / mch.CONTROL_DT))
    prev_m = env.tracker.m
    for _ in range(n_steps):
        cmd = controller.step(env.sim, env.waypoints[env.tracker.index],
                              cfg.r_tube)
        _, _, done, info = env.step([cmd.u_slew, cmd.qd_ref_boom,
                                     cmd.qd_ref_stick])
        deltas.append(info["tube_distance"])
        if env.tracker.m != prev_m:
            reached += env.tracker.m - prev_m
            prev_m = env.tracker.m
        if done:
            break
    deltas = np.array(deltas)
    return {"tube_distances": deltas,
            "satisfaction": float(np.mean(deltas > 0)) if len(deltas) else 0.0,
            "waypoints_reached": reached,
            "unsafe": bool(info.get("terminated_unsafe", False))}


def run_scripted_throw(target, seed: int = 0,
                       cfg: ThrowEnvConfig = None,
                       params: mch.MachineParams = None,
                       max_time: float = 20.0) -> dict:
    """Slew-and-release throw driven by the analytic oracle.

    The machine starts offset in azimuth from the target, tracks a hover
    point above it, and the oracle picks the release instant. Returns landing
    points and the error of the mean landing to the target."""
    cfg = cfg or ThrowEnvConfig()
    rng = np.random.default_rng(seed)
    params = params or mch.MachineParams()
    target = np.asarray(target, dtype=float)
    t_cyl = pp.to_cylindrical(target)

    ik = mch.inverse_kinematics(t_cyl[0], t_cyl[1], 2.0, params)
    if ik is None:
        raise ValueError("target outside the reachable annulus")
    phi_off = rng.uniform(0.6, 1.2) * (1 if rng.random() < 0.5 else -1)
    state = mch.MachineState(q_slew=wrap_angle(t_cyl[1] - phi_off),
                             q_boom=ik[1], q_stick=ik[2],
                             load_mass=2000.0)
    sim = mch.MachineSim(params, state)
    release = ReleaseSim(cfg, rng)
    oracle = ReleaseOracle(target, delay=0.3, tolerance=0.3, max_speed=0.25)
    # highest reachable hover over the target, up to 5 m
    hover_z = 2.0
    for zc in np.arange(5.0, 1.9, -0.25):
        if mch.inverse_kinematics(t_cyl[0], t_cyl[1], float(zc),
                                  params) is not None:
            hover_z = float(zc)
            break
    hover = np.array([t_cyl[0], t_cyl[1], hover_z])

    opened = False
    settled = False
    controller = ScriptedTracker()
    n_ticks = int(max_time / mch.CONTROL_DT)
    for _ in range(n_ticks):
        dphi = wrap_angle(t_cyl[1] - sim.state.q_slew)
        if not settled and abs(dphi) < 0.03 and abs(sim.state.qd_slew) < 0.05:
            settled = True
        cmd = controller.step(sim, hover, 1.0)
        if settled:
            # coast the slew near the hover azimuth so residual sway damps
            # out; active station-keeping pumps the pendulum instead. The
            # arm keeps tracking so the radius converges.
            cmd = mch.JointCommand(0.0, cmd.qd_ref_boom, cmd.qd_ref_stick,
                                   "hold")
        kin = sim.kinematics()
        vel = sim.end_effector_velocity()
        swing = math.hypot(sim.state.thetad_x, sim.state.thetad_y)
        if not opened and settled and sim.state.load_mass > 0 \
                and oracle.release_now(kin.end_effector, vel, swing):
            opened = True
        gripper = "open" if opened else "hold"
        cmd = mch.JointCommand(cmd.u_slew, cmd.qd_ref_boom, cmd.qd_ref_stick,
                               gripper)
        for _ in range(mch.SUBSTEPS_PER_TICK):
            sim.substep(cmd)
            if opened:
                release.command_open(sim.state.time)
            release.step(sim.state.time, sim.kinematics().end_effector,
                         sim.end_effector_velocity(), mch.SIM_DT)
        if release.released:
            sim.state.load_mass = 0.0
        if release.all_landed():
            break
    landings = [l.landing_point for l in release.loads if l.landed]
    if not landings:
        return {"landings": np.zeros((0, 3)), "mean_error": math.inf,
                "released": opened}
    pts = np.array(landings)
    err = float(np.linalg.norm(pts[:, :2].mean(axis=0) - target[:2]))
    return {"landings": pts, "mean_error": err, "released": opened}

"""Machine model: slew/boom/stick joint dynamics, configuration inertia, and
the free-swinging clamshell tool treated as a double pendulum with decoupled
tangential/radial rotations.

Frames and conventions:
  - q_boom = q_stick = 0 is the straight horizontal arm; q_stick is relative
    to the boom. The boom pivot sits at (base_radius, base_height) from the
    slew axis in the arm plane.
  - Cabin-frame x is the tangential direction (sense of increasing slew),
    y is the radial direction pointing outward along the arm.
  - theta_y swings the tool tangentially (first pendulum segment, length l_y),
    theta_x radially (second segment, length l_x). The tool hangs straight
    down at theta = 0.

The velocity updates follow a first-order-with-delay arm model and an
explicit per-substep pendulum recurrence (Euler + centrifugal forcing,
Rayleigh dissipation). Simulation runs at 50 Hz with commands held over five
substeps per 10 Hz control tick.
"""

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

SIM_DT = 0.02           # 50 Hz physics
SUBSTEPS_PER_TICK = 5   # 10 Hz control
CONTROL_DT = SIM_DT * SUBSTEPS_PER_TICK


class InstabilityError(RuntimeError):
    """Tool swing exceeded +-pi/2; the episode must terminate."""


@dataclass(frozen=True)
class MachineParams:
    boom_length: float = 9.0
    stick_length: float = 7.0
    base_radius: float = 2.0        # slew axis -> boom pivot, horizontal
    base_height: float = 3.0        # ground -> boom pivot
    boom_mass: float = 6000.0
    stick_mass: float = 4000.0
    tool_mass: float = 1500.0
    l_x: float = 1.2                # tool pendulum lengths, m
    l_y: float = 1.2
    b_fx: float = 0.5               # Rayleigh dissipation, 1/s
    b_fy: float = 0.5
    arm_K: float = 0.15             # arm velocity time constant, per substep
    arm_delay: int = 10             # substeps (0.2 s)
    slew_omega_max: float = 0.6     # rad/s at unit input with zero inertia load
    slew_inertia_ref: float = 2.8e6  # kg m^2, surrogate steady-state scaling
    slew_K: float = 0.04            # velocity lag, per substep
    slew_delay: int = 15            # substeps (0.3 s)
    slew_accel_max: float = 0.5     # rad/s^2
    gravity: float = 9.81
    slew_force_sign: float = 1.0    # sign of the centrifugal term in theta_y
    boom_limits: Tuple[float, float] = (-0.35, 1.15)
    stick_limits: Tuple[float, float] = (-2.4, 0.0)
    shell_rate: float = 2.0         # shell travel fraction per unit joystick per s

    def __post_init__(self):
        if min(self.boom_length, self.stick_length, self.l_x, self.l_y,
               self.boom_mass, self.stick_mass, self.tool_mass, self.gravity) <= 0:
            raise ValueError("lengths, masses, and gravity must be positive")
        if not (0.0 < self.arm_K <= 1.0):
            raise ValueError("arm_K must be in (0, 1]")
        if self.arm_delay < 0 or self.slew_delay < 0:
            raise ValueError("delays must be >= 0")


@dataclass
class MachineState:
    q_slew: float = 0.0
    q_boom: float = 0.3
    q_stick: float = -0.9
    qd_slew: float = 0.0
    qd_boom: float = 0.0
    qd_stick: float = 0.0
    theta_x: float = 0.0
    theta_y: float = 0.0
    thetad_x: float = 0.0
    thetad_y: float = 0.0
    shell_open_frac: float = 1.0    # 1 = fully open, 0 = closed
    load_mass: float = 0.0
    time: float = 0.0

    @property
    def gripper_open(self) -> bool:
        return self.shell_open_frac > 0.5

    def copy(self) -> "MachineState":
        return replace(self)


@dataclass(frozen=True)
class JointCommand:
    u_slew: float = 0.0             # normalized joystick, clamped to +-0.85
    qd_ref_boom: float = 0.0        # rad/s, clamped to +-0.2
    qd_ref_stick: float = 0.0
    u_gripper: str = "hold"         # open | close | hold

    U_SLEW_MAX = 0.85
    QD_REF_MAX = 0.2

    def clamped(self) -> "JointCommand":
        return JointCommand(
            float(np.clip(self.u_slew, -self.U_SLEW_MAX, self.U_SLEW_MAX)),
            float(np.clip(self.qd_ref_boom, -self.QD_REF_MAX, self.QD_REF_MAX)),
            float(np.clip(self.qd_ref_stick, -self.QD_REF_MAX, self.QD_REF_MAX)),
            self.u_gripper,
        )


# ---------------------------------------------------------------------------
# Kinematics

def _arm_plane(state: MachineState, params: MachineParams):
    """Attachment point (radial, vertical) in the arm plane."""
    qb, qs = state.q_boom, state.q_stick
    r = params.base_radius + params.boom_length * math.cos(qb) \
        + params.stick_length * math.cos(qb + qs)
    z = params.base_height + params.boom_length * math.sin(qb) \
        + params.stick_length * math.sin(qb + qs)
    return r, z


def _arm_plane_velocity(state: MachineState, params: MachineParams):
    """d/dt of the attachment (radial, vertical) from boom/stick rates."""
    qb, qs = state.q_boom, state.q_stick
    wb, ws = state.qd_boom, state.qd_stick
    sb, sbs = math.sin(qb), math.sin(qb + qs)
    cb, cbs = math.cos(qb), math.cos(qb + qs)
    vr = -params.boom_length * sb * wb - params.stick_length * sbs * (wb + ws)
    vz = params.boom_length * cb * wb + params.stick_length * cbs * (wb + ws)
    return vr, vz


@dataclass(frozen=True)
class KinematicsResult:
    attachment: np.ndarray      # world xyz of the tool attachment, m
    end_effector: np.ndarray    # world xyz of the hanging gripper, m
    cylindrical: np.ndarray     # (r, phi, z) of the end-effector
    attachment_radius: float    # radial distance of the attachment (r_y term)


def forward_kinematics(state: MachineState, params: MachineParams) -> KinematicsResult:
    r_att, z_att = _arm_plane(state, params)
    phi = state.q_slew
    radial = np.array([math.cos(phi), math.sin(phi)])
    tangential = np.array([-math.sin(phi), math.cos(phi)])

    att = np.array([r_att * radial[0], r_att * radial[1], z_att])
    ee_r = r_att + params.l_x * math.sin(state.theta_x)
    ee_t = params.l_y * math.sin(state.theta_y)
    ee_z = z_att - params.l_y * math.cos(state.theta_y) - params.l_x * math.cos(state.theta_x)
    ee_xy = ee_r * radial + ee_t * tangential
    ee = np.array([ee_xy[0], ee_xy[1], ee_z])
    cyl = np.array([math.hypot(ee[0], ee[1]), math.atan2(ee[1], ee[0]), ee_z])
    return KinematicsResult(att, ee, cyl, r_att)


def hang_depth(params: MachineParams) -> float:
    """Vertical attachment-to-gripper distance at rest (theta = 0)."""
    return params.l_x + params.l_y


def inverse_kinematics(target_r: float, target_phi: float, target_z: float,
                       params: MachineParams) -> Optional[Tuple[float, float, float]]:
    """Joint angles placing the resting end-effector at cylindrical (r, phi, z).

    Solves the planar two-link chain for the attachment point directly above
    the target; returns None when unreachable or outside joint limits.
    """
    pr = target_r - params.base_radius
    pz = target_z + hang_depth(params) - params.base_height
    lb, ls = params.boom_length, params.stick_length
    d2 = pr * pr + pz * pz
    c = (d2 - lb * lb - ls * ls) / (2 * lb * ls)
    if not (-1.0 <= c <= 1.0):
        return None
    qs = -math.acos(c)  # elbow-up, excavator-style
    qb = math.atan2(pz, pr) - math.atan2(ls * math.sin(qs), lb + ls * math.cos(qs))
    if not (params.boom_limits[0] - 1e-9 <= qb <= params.boom_limits[1] + 1e-9):
        return None
    if not (params.stick_limits[0] - 1e-9 <= qs <= params.stick_limits[1] + 1e-9):
        return None
    return (target_phi, float(np.clip(qb, *params.boom_limits)),
            float(np.clip(qs, *params.stick_limits)))


def config_inertia(state: MachineState, params: MachineParams) -> float:
    """Rotational inertia about the slew axis: point masses at the link
    midpoints plus tool and load at the attachment radius."""
    qb, qs = state.q_boom, state.q_stick
    r_boom = params.base_radius + 0.5 * params.boom_length * math.cos(qb)
    r_stick = params.base_radius + params.boom_length * math.cos(qb) \
        + 0.5 * params.stick_length * math.cos(qb + qs)
    r_tool, _ = _arm_plane(state, params)
    return (params.boom_mass * r_boom ** 2
            + params.stick_mass * r_stick ** 2
            + (params.tool_mass + state.load_mass) * r_tool ** 2)


# ---------------------------------------------------------------------------
# Dynamics primitives (one 20 ms substep each)

def arm_velocity_update(qd_prev: float, qd_ref_delayed: float, K: float) -> float:
    """First-order velocity recurrence: qd_k = qd_{k-1} + K (ref_{k-d} - qd_{k-1})."""
    return qd_prev + K * (qd_ref_delayed - qd_prev)


def slew_steady_state(u: float, inertia: float, params: MachineParams) -> float:
    """Surrogate steady-state slew rate; shrinks as configuration inertia grows."""
    return u * params.slew_omega_max * params.slew_inertia_ref \
        / (params.slew_inertia_ref + inertia)


def slew_velocity_update(omega_prev: float, u_delayed: float, inertia: float,
                         params: MachineParams, dt: float = SIM_DT) -> float:
    omega_ss = slew_steady_state(u_delayed, inertia, params)
    delta = params.slew_K * (omega_ss - omega_prev)
    delta = float(np.clip(delta, -params.slew_accel_max * dt, params.slew_accel_max * dt))
    return omega_prev + delta


def tool_velocity_update(theta_x, theta_y, thetad_x, thetad_y,
                         a_x, a_y, omega_slew, r_y,
                         params: MachineParams, dt: float = SIM_DT):
    """Per-substep pendulum velocity recurrence.

    a_x, a_y are the attachment accelerations in cabin axes (x tangential,
    y radial); omega_slew feeds the centrifugal term, r_y is the attachment
    radius.
    """
    g = params.gravity
    thetad_y_new = ((a_x * math.cos(theta_y) - g * math.sin(theta_y)
                     - params.slew_force_sign * r_y * omega_slew ** 2) / params.l_y
                    - params.b_fy * thetad_y) * dt + thetad_y
    thetad_x_new = ((-a_y * math.cos(theta_x)
                     - (g * math.cos(theta_y) + params.l_y * thetad_y ** 2)
                     * math.sin(theta_x)) / params.l_x
                    - params.b_fx * thetad_x) * dt + thetad_x
    return thetad_x_new, thetad_y_new


def pendulum_energy(state: MachineState, params: MachineParams) -> float:
    """Mechanical energy of the free tool for a stationary support (per unit
    mass): decoupled segments, zero at the hanging rest pose."""
    g = params.gravity
    e_y = 0.5 * (params.l_y * state.thetad_y) ** 2 \
        + g * params.l_y * (1.0 - math.cos(state.theta_y))
    e_x = 0.5 * (params.l_x * state.thetad_x) ** 2 \
        + g * params.l_x * (1.0 - math.cos(state.theta_x))
    return e_x + e_y


# ---------------------------------------------------------------------------
# Simulator

class MachineSim:
    """Holds a MachineState plus the command histories needed by the delayed
    dynamics. Stepping is deterministic given the command stream."""

    def __init__(self, params: MachineParams = None, state: MachineState = None):
        self.params = params or MachineParams()
        self.state = state or MachineState()
        n_arm = self.params.arm_delay + 1
        n_slew = self.params.slew_delay + 1
        self._boom_refs = deque([0.0] * n_arm, maxlen=n_arm)
        self._stick_refs = deque([0.0] * n_arm, maxlen=n_arm)
        self._slew_inputs = deque([0.0] * n_slew, maxlen=n_slew)
        kin = forward_kinematics(self.state, self.params)
        self._v_tan = kin.attachment_radius * self.state.qd_slew
        vr, _ = _arm_plane_velocity(self.state, self.params)
        self._v_rad = vr

    def substep(self, command: JointCommand):
        p, s = self.params, self.state
        command = command.clamped()
        self._boom_refs.append(command.qd_ref_boom)
        self._stick_refs.append(command.qd_ref_stick)
        self._slew_inputs.append(command.u_slew)

        inertia = config_inertia(s, p)
        s.qd_boom = arm_velocity_update(s.qd_boom, self._boom_refs[0], p.arm_K)
        s.qd_stick = arm_velocity_update(s.qd_stick, self._stick_refs[0], p.arm_K)
        s.qd_slew = slew_velocity_update(s.qd_slew, self._slew_inputs[0], inertia, p)

        s.q_boom += s.qd_boom * SIM_DT
        s.q_stick += s.qd_stick * SIM_DT
        if s.q_boom <= p.boom_limits[0] or s.q_boom >= p.boom_limits[1]:
            s.q_boom = float(np.clip(s.q_boom, *p.boom_limits))
            s.qd_boom = 0.0
        if s.q_stick <= p.stick_limits[0] or s.q_stick >= p.stick_limits[1]:
            s.q_stick = float(np.clip(s.q_stick, *p.stick_limits))
            s.qd_stick = 0.0
        s.q_slew += s.qd_slew * SIM_DT

        r_att, _ = _arm_plane(s, p)
        v_tan = r_att * s.qd_slew
        v_rad, _ = _arm_plane_velocity(s, p)
        a_x = (v_tan - self._v_tan) / SIM_DT
        a_y = (v_rad - self._v_rad) / SIM_DT
        self._v_tan, self._v_rad = v_tan, v_rad

        s.thetad_x, s.thetad_y = tool_velocity_update(
            s.theta_x, s.theta_y, s.thetad_x, s.thetad_y,
            a_x, a_y, s.qd_slew, r_att, p)
        s.theta_x += s.thetad_x * SIM_DT
        s.theta_y += s.thetad_y * SIM_DT
        if abs(s.theta_x) >= math.pi / 2 or abs(s.theta_y) >= math.pi / 2:
            raise InstabilityError(
                f"tool swing unstable at t={s.time:.2f}s "
                f"(theta_x={s.theta_x:.3f}, theta_y={s.theta_y:.3f})")

        if command.u_gripper == "open":
            s.shell_open_frac = min(1.0, s.shell_open_frac + 0.5 * p.shell_rate * SIM_DT)
        elif command.u_gripper == "close":
            s.shell_open_frac = max(0.0, s.shell_open_frac - 0.5 * p.shell_rate * SIM_DT)

        s.time += SIM_DT

    def step_control(self, command: JointCommand):
        """Advance one 10 Hz control tick (command held over five substeps)."""
        for _ in range(SUBSTEPS_PER_TICK):
            self.substep(command)
        return self.state

    def kinematics(self) -> KinematicsResult:
        return forward_kinematics(self.state, self.params)

    def end_effector_velocity(self) -> np.ndarray:
        """World-frame velocity of the hanging gripper, m/s.

        Combines slew rotation, arm extension, and pendulum swing rates."""
        p, s = self.params, self.state
        kin = forward_kinematics(s, p)
        phi = s.q_slew
        radial = np.array([math.cos(phi), math.sin(phi)])
        tangential = np.array([-math.sin(phi), math.cos(phi)])
        vr_arm, vz_arm = _arm_plane_velocity(s, p)
        # pendulum contributions in cabin axes
        v_t = p.l_y * math.cos(s.theta_y) * s.thetad_y
        v_r = p.l_x * math.cos(s.theta_x) * s.thetad_x
        v_z = p.l_y * math.sin(s.theta_y) * s.thetad_y \
            + p.l_x * math.sin(s.theta_x) * s.thetad_x
        ee_r = kin.attachment_radius + p.l_x * math.sin(s.theta_x)
        ee_t = p.l_y * math.sin(s.theta_y)
        # rotation of the cabin frame sweeps the ee position tangentially
        vx, vy = (vr_arm + v_r) * radial + (v_t + ee_r * s.qd_slew) * tangential \
            - ee_t * s.qd_slew * radial
        return np.array([vx, vy, vz_arm + v_z])

    def log_record(self, command: JointCommand = None) -> dict:
        s = self.state
        kin = self.kinematics()
        rec = {
            "time": round(s.time, 6),
            "q": [s.q_slew, s.q_boom, s.q_stick],
            "qd": [s.qd_slew, s.qd_boom, s.qd_stick],
            "theta": [s.theta_x, s.theta_y],
            "thetad": [s.thetad_x, s.thetad_y],
            "shell_open_frac": s.shell_open_frac,
            "load_mass": s.load_mass,
            "ee": kin.end_effector.tolist(),
            "cyl": kin.cylindrical.tolist(),
        }
        if command is not None:
            rec["command"] = [command.u_slew, command.qd_ref_boom,
                              command.qd_ref_stick, command.u_gripper]
        return rec

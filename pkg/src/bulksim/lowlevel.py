"""Low-level joint velocity control: LUT feedforward + PI feedback for boom
and stick, zero-order hold for slew, binary gripper constants, and safety
clamps enforcing joint limits.

The synthetic LUTs mirror the measured-machine shape qualitatively: 37 knots,
a soft deadband around zero joystick, boom symmetric, stick retracting ~30%
faster than extending. Real tables are machine-specific; these are defaults
and can be replaced from the scenario config.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

N_LUT_POINTS = 37
_DEADBAND = 0.05
_DEADBAND_SLOPE_FRACTION = 0.02  # small slope inside the deadband keeps the map invertible


@dataclass(frozen=True)
class VelocityLUT:
    """Monotone joystick -> steady-state joint velocity table."""
    joystick: np.ndarray   # strictly increasing, spans [-1, 1], passes through 0
    velocity: np.ndarray   # strictly increasing, velocity(0) = 0

    def __post_init__(self):
        j, v = np.asarray(self.joystick), np.asarray(self.velocity)
        if j.shape != v.shape or j.ndim != 1:
            raise ValueError("joystick and velocity tables must be 1D and equal length")
        if np.any(np.diff(j) <= 0) or np.any(np.diff(v) <= 0):
            raise ValueError("LUT must be strictly monotone")
        if 0.0 not in j or abs(np.interp(0.0, j, v)) > 1e-12:
            raise ValueError("LUT must pass through (0, 0)")

    def steady_velocity(self, joystick: float) -> float:
        """Forward map with clamping at the table ends."""
        return float(np.interp(joystick, self.joystick, self.velocity))

    @property
    def velocity_range(self) -> Tuple[float, float]:
        return float(self.velocity[0]), float(self.velocity[-1])


def _soft_deadband_velocity(j: np.ndarray, vel_pos: float, vel_neg: float) -> np.ndarray:
    """Piecewise-linear response: near-flat inside the deadband, linear outside."""
    out = np.empty_like(j)
    slope_pos = vel_pos / (1.0 - _DEADBAND)
    slope_neg = vel_neg / (1.0 - _DEADBAND)
    small_pos = slope_pos * _DEADBAND_SLOPE_FRACTION
    small_neg = slope_neg * _DEADBAND_SLOPE_FRACTION
    for idx, x in np.ndenumerate(j):
        if x >= _DEADBAND:
            out[idx] = small_pos * _DEADBAND + slope_pos * (x - _DEADBAND)
        elif x >= 0.0:
            out[idx] = small_pos * x
        elif x > -_DEADBAND:
            out[idx] = small_neg * x
        else:
            out[idx] = -small_neg * _DEADBAND + slope_neg * (x + _DEADBAND)
    return out


def default_boom_lut() -> VelocityLUT:
    j = np.linspace(-1.0, 1.0, N_LUT_POINTS)
    return VelocityLUT(j, _soft_deadband_velocity(j, 0.20, 0.20))


def default_stick_lut() -> VelocityLUT:
    # stick retraction (negative velocities) is ~30% faster than extension
    j = np.linspace(-1.0, 1.0, N_LUT_POINTS)
    return VelocityLUT(j, _soft_deadband_velocity(j, 0.20, 0.26))


@dataclass(frozen=True)
class PIGains:
    k_p: float = 2.0
    k_i: float = 1.0
    integrator_clamp: float = 0.3

    def __post_init__(self):
        if self.k_p < 0 or self.k_i < 0:
            raise ValueError("gains must be >= 0")


J_GRAB_OPEN = 0.5
J_GRAB_CLOSE = -0.5


def lut_feedforward(lut: VelocityLUT, qd_ref: float) -> float:
    """Inverse of the LUT: joystick producing the requested steady velocity.

    Velocities outside the table range are clamped to the end knots.
    """
    return float(np.interp(qd_ref, lut.velocity, lut.joystick))


def track_velocity(lut: VelocityLUT, gains: PIGains, qd_ref: float,
                   qd_meas: float, integrator: float,
                   dt: float = 0.02) -> Tuple[float, float]:
    """One PI + feedforward update. Returns (joystick, new integrator state).

    Anti-windup: the integral state is clamped; the output is clamped to
    [-1, 1].
    """
    e = qd_ref - qd_meas
    integrator = float(np.clip(integrator + e * dt,
                               -gains.integrator_clamp, gains.integrator_clamp))
    j = lut_feedforward(lut, qd_ref) + gains.k_p * e + gains.k_i * integrator
    return float(np.clip(j, -1.0, 1.0)), integrator


def gripper_command(u_gripper: str) -> float:
    """Binary shell control: a constant joystick per direction, zero on hold."""
    if u_gripper == "open":
        return J_GRAB_OPEN
    if u_gripper == "close":
        return J_GRAB_CLOSE
    if u_gripper == "hold":
        return 0.0
    raise ValueError(f"unknown gripper command {u_gripper!r}")


def safety_clamp(position: float, velocity_ref: float,
                 limits: Tuple[float, float], dt: float = 0.1) -> float:
    """Limit a velocity reference so the next position stays inside limits.

    A reference that would cross the limit within one step is scaled down to
    land exactly on it; at the limit itself, outward commands are zeroed.
    Idempotent, and never increases |command|.
    """
    lo, hi = limits
    allowed_hi = max(0.0, (hi - position) / dt)
    allowed_lo = min(0.0, (lo - position) / dt)
    return float(np.clip(velocity_ref, allowed_lo, allowed_hi))

"""Joint-space path planning: RRT* over (slew, boom, stick), clamped B-spline
smoothing with continuous collision checking, end-effector waypoint
subsampling, and the tube-constraint distance.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import machine as mch
from . import worldmap as wm

EDGE_CHECK_RESOLUTION = 0.05  # rad, max joint-space step between collision checks
DEFAULT_BUDGET = 20000
DEFAULT_WEIGHTS = (1.0, 1.0, 1.0)


class PlanningFailure(RuntimeError):
    """No collision-free path found within the iteration budget."""


@dataclass(frozen=True)
class Tube:
    p1: np.ndarray
    p2: np.ndarray
    r_tube: float

    def __post_init__(self):
        if self.r_tube <= 0:
            raise ValueError("r_tube must be positive")


def tube_distance(E, tube: Tube) -> float:
    """Signed distance from the tube boundary, clamped to [-r/2, r].

    Positive inside the (axis-extended) tube, r on the axis, floored at -r/2.
    Degenerate tubes fall back to the point distance with the same clamp.
    """
    p1 = np.asarray(tube.p1, dtype=float)
    p2 = np.asarray(tube.p2, dtype=float)
    E = np.asarray(E, dtype=float)
    axis = p2 - p1
    norm = float(np.linalg.norm(axis))
    if norm == 0.0:
        return max(-tube.r_tube / 2, tube.r_tube - float(np.linalg.norm(E - p1)))
    perp = float(np.linalg.norm(np.cross(E - p1, axis))) / norm
    return max(-tube.r_tube / 2, tube.r_tube - perp)


@dataclass(frozen=True)
class JointPath:
    configs: np.ndarray            # (n, 3) of (q_slew, q_boom, q_stick)
    cost: float

    def __len__(self):
        return len(self.configs)


@dataclass(frozen=True)
class SmoothPath:
    configs: np.ndarray            # densely sampled configs along the spline
    control_points: np.ndarray
    knots: np.ndarray
    degree: int
    arc_length: np.ndarray         # cumulative joint-space arc length per sample
    smoothed: bool                 # False when smoothing fell back to the raw path


@dataclass(frozen=True)
class WaypointSequence:
    waypoints: np.ndarray          # (n, 3) cylindrical targets (r, phi, z)
    spacing: float

    def __len__(self):
        return len(self.waypoints)


def joint_distance(a, b, weights=DEFAULT_WEIGHTS) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.sqrt(np.sum(np.asarray(weights) * d * d)))


def _edge_collision_free(a, b, collides: Callable, resolution=EDGE_CHECK_RESOLUTION) -> bool:
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(2, int(math.ceil(float(np.max(np.abs(b - a))) / resolution)) + 1)
    for t in np.linspace(0.0, 1.0, n):
        if collides(a + t * (b - a)):
            return False
    return True


def _make_collision_fn(vmap, params, gripper_inflation, link_inflation=0.0):
    def collides(cfg):
        return wm.config_collides(cfg, vmap, params,
                                  gripper_inflation=gripper_inflation,
                                  check_limits=False,
                                  link_inflation=link_inflation)
    return collides


def plan_rrtstar(start, goal, vmap, params: mch.MachineParams,
                 budget: int = DEFAULT_BUDGET, seed: int = 0,
                 weights=DEFAULT_WEIGHTS,
                 slew_bounds: Tuple[float, float] = (-math.pi, math.pi),
                 gripper_inflation: float = wm.GRIPPER_INFLATION_DEFAULT,
                 steer_step: float = 0.35, goal_bias: float = 0.1,
                 refine_iters: int = 400,
                 link_inflation: float = 0.0) -> JointPath:
    """RRT* in (slew, boom, stick) minimizing weighted joint-space length.

    Deterministic per seed. Stops early once a solution exists and
    refine_iters further samples have been spent improving it; raises
    PlanningFailure when the budget is exhausted without reaching the goal.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    collides = _make_collision_fn(vmap, params, gripper_inflation,
                                  link_inflation)
    if collides(start) or collides(goal):
        raise PlanningFailure("start or goal configuration in collision")
    if np.allclose(start, goal):
        return JointPath(np.array([start]), 0.0)

    lo = np.array([min(slew_bounds[0], start[0], goal[0]),
                   params.boom_limits[0], params.stick_limits[0]])
    hi = np.array([max(slew_bounds[1], start[0], goal[0]),
                   params.boom_limits[1], params.stick_limits[1]])
    w = np.asarray(weights, dtype=float)
    rng = np.random.default_rng(seed)

    nodes = np.empty((budget + 2, 3))
    nodes[0] = start
    parents = [-1]
    costs = [0.0]
    children = [set()]
    n_nodes = 1
    goal_idx = None
    found_at = None

    # direct connection is the free-space optimum; try it first
    if _edge_collision_free(start, goal, collides):
        nodes[1] = goal
        parents.append(0)
        costs.append(joint_distance(start, goal, w))
        children[0].add(1)
        children.append(set())
        n_nodes = 2
        goal_idx, found_at = 1, 0

    it = 0
    while it < budget:
        it += 1
        if goal_idx is not None and it - found_at >= refine_iters:
            break
        target = goal if rng.random() < goal_bias else rng.uniform(lo, hi)
        pts = nodes[:n_nodes]
        d2 = np.sum(w * (pts - target) ** 2, axis=1)
        near_i = int(np.argmin(d2))
        d = math.sqrt(float(d2[near_i]))
        if d < 1e-12:
            continue
        step = min(1.0, steer_step / d)
        new = pts[near_i] + step * (target - pts[near_i])
        if collides(new) or not _edge_collision_free(pts[near_i], new, collides):
            continue

        # choose best parent within the rewiring radius
        gamma = 2.5
        radius = min(2.0 * steer_step,
                     gamma * (math.log(n_nodes + 1) / (n_nodes + 1)) ** (1 / 3))
        dists = np.sqrt(np.sum(w * (pts - new) ** 2, axis=1))
        neighbor_idx = np.flatnonzero(dists <= max(radius, steer_step + 1e-9))
        best_parent, best_cost = near_i, costs[near_i] + float(dists[near_i])
        for i in neighbor_idx:
            c = costs[i] + float(dists[i])
            if c < best_cost and _edge_collision_free(pts[i], new, collides):
                best_parent, best_cost = int(i), c
        nodes[n_nodes] = new
        parents.append(best_parent)
        costs.append(best_cost)
        children.append(set())
        children[best_parent].add(n_nodes)
        new_i = n_nodes
        n_nodes += 1

        # rewire neighbors through the new node (propagate cost to subtrees)
        for i in neighbor_idx:
            c = best_cost + float(dists[i])
            if c + 1e-12 < costs[i] and _edge_collision_free(new, pts[i], collides):
                delta = c - costs[i]
                children[parents[i]].discard(int(i))
                parents[i] = new_i
                children[new_i].add(int(i))
                stack = [int(i)]
                while stack:
                    j = stack.pop()
                    costs[j] += delta
                    stack.extend(children[j])

        # try to connect the new node to the goal
        dg = joint_distance(new, goal, w)
        if dg <= steer_step and _edge_collision_free(new, goal, collides):
            c = best_cost + dg
            if goal_idx is None:
                nodes[n_nodes] = goal
                parents.append(new_i)
                costs.append(c)
                children.append(set())
                children[new_i].add(n_nodes)
                goal_idx = n_nodes
                n_nodes += 1
                found_at = it
            elif c < costs[goal_idx]:
                children[parents[goal_idx]].discard(goal_idx)
                parents[goal_idx] = new_i
                children[new_i].add(goal_idx)
                costs[goal_idx] = c

    if goal_idx is None:
        raise PlanningFailure(f"no path within {budget} iterations")
    order = []
    i = goal_idx
    while i != -1:
        order.append(i)
        i = parents[i]
    path = nodes[order[::-1]]
    return JointPath(path, costs[goal_idx])


# ---------------------------------------------------------------------------
# B-spline smoothing

def _clamped_knots(n_ctrl: int, degree: int) -> np.ndarray:
    n_inner = n_ctrl - degree - 1
    return np.concatenate([np.zeros(degree + 1),
                           np.linspace(0, 1, n_inner + 2)[1:-1],
                           np.ones(degree + 1)])


def smooth_bspline(path: JointPath, vmap, params: mch.MachineParams,
                   gripper_inflation: float = wm.GRIPPER_INFLATION_DEFAULT,
                   samples_per_segment: int = 12,
                   link_inflation: float = 0.0) -> SmoothPath:
    """Approximating cubic B-spline with the path configs as control polygon.

    Clamped knots interpolate the endpoints exactly; interior configs are
    approximated (the curve is never longer than the control polygon). If any
    dense sample collides, falls back to the unsmoothed polyline, flagged.
    """
    from scipy.interpolate import BSpline

    ctrl = np.asarray(path.configs, dtype=float)
    n = len(ctrl)
    degree = min(3, n - 1)
    if degree < 1:
        arc = np.array([0.0])
        return SmoothPath(ctrl.copy(), ctrl.copy(), np.array([0.0, 1.0]),
                          0, arc, True)
    knots = _clamped_knots(n, degree)
    spline = BSpline(knots, ctrl, degree)
    n_samples = max(2, samples_per_segment * (n - 1) + 1)
    ts = np.linspace(0.0, 1.0, n_samples)
    samples = spline(ts)

    collides = _make_collision_fn(vmap, params, gripper_inflation,
                                  link_inflation)
    ok = True
    for k in range(len(samples) - 1):
        if not _edge_collision_free(samples[k], samples[k + 1], collides):
            ok = False
            break
    if not ok:
        samples = ctrl.copy()
    seg = np.linalg.norm(np.diff(samples, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    return SmoothPath(samples, ctrl.copy(), knots, degree, arc, ok)


def path_arc_length(spath: SmoothPath) -> float:
    return float(spath.arc_length[-1])


# ---------------------------------------------------------------------------
# Waypoint subsampling

def _ee_position(config, params: mch.MachineParams) -> np.ndarray:
    state = mch.MachineState(q_slew=config[0], q_boom=config[1], q_stick=config[2])
    return mch.forward_kinematics(state, params).end_effector


def to_cylindrical(p) -> np.ndarray:
    return np.array([math.hypot(p[0], p[1]), math.atan2(p[1], p[0]), p[2]])


def subsample_waypoints(spath: SmoothPath, params: mch.MachineParams,
                        spacing: float, densify_tail: bool = False,
                        tail_spacing: float = 0.4) -> WaypointSequence:
    """End-effector targets at ~spacing arc-length intervals (Cartesian arc
    length of the resting gripper), in cylindrical coordinates. The final
    waypoint is always the exact path end; densify_tail emits three closely
    spaced final targets for precision approaches."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    ee = np.array([_ee_position(c, params) for c in spath.configs])
    seg = np.linalg.norm(np.diff(ee, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(arc[-1])
    n_seg = max(1, int(math.ceil(total / spacing))) if total > 0 else 1
    targets = np.linspace(0.0, total, n_seg + 1)
    if densify_tail and total > 2 * tail_spacing:
        targets = np.concatenate([targets[targets < total - 2 * tail_spacing],
                                  [total - 2 * tail_spacing, total - tail_spacing, total]])
    pts = np.empty((len(targets), 3))
    for k, s in enumerate(targets):
        i = int(np.searchsorted(arc, s, side="right") - 1)
        i = min(i, len(seg) - 1) if len(seg) else 0
        if len(seg) == 0 or seg[i] == 0:
            pts[k] = ee[i]
        else:
            t = (s - arc[i]) / seg[i]
            pts[k] = ee[i] + t * (ee[i + 1] - ee[i])
    pts[-1] = ee[-1]
    return WaypointSequence(np.array([to_cylindrical(p) for p in pts]), spacing)


def waypoint_to_cartesian(w) -> np.ndarray:
    r, phi, z = w
    return np.array([r * math.cos(phi), r * math.sin(phi), z])

"""Tracking/throwing rewards, ballistics, release simulation, waypoint
generation, and the environment wrappers."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bulksim import machine as mch
from bulksim import motioncontrol as mc
from bulksim import pathplan as pp
import oracles


# ---------------------------------------------------------------------------
# Reward transcriptions

def test_waypoint_reward_transcription(rng):
    coeffs = mc.RewardCoefficients()
    for _ in range(1000):
        tr = oracles.random_transition(rng, mc.Transition, mc.SIGMA_U_WAYPOINT)
        got, terms = mc.waypoint_reward(tr, coeffs)
        assert len(terms) == 8
        assert got == pytest.approx(
            oracles.waypoint_reward_oracle(tr, coeffs), abs=1e-9)
        assert got == pytest.approx(sum(terms.values()), abs=1e-12)


def test_throw_reward_transcription(rng):
    coeffs = mc.RewardCoefficients()
    for _ in range(1000):
        tr = oracles.random_transition(rng, mc.Transition, mc.SIGMA_U_THROW,
                                       with_loads=True)
        got, terms = mc.throw_reward(tr, coeffs, hover_offset=5.0)
        assert len(terms) == 9
        assert got == pytest.approx(
            oracles.throw_reward_oracle(tr, coeffs, 5.0), abs=1e-9)


def test_throw_reward_gates():
    base = oracles.random_transition(np.random.default_rng(0), mc.Transition,
                                     mc.SIGMA_U_THROW, with_loads=True)
    last = replace(base, m=base.n_waypoints, chi=False, load_positions=None)
    _, terms = mc.throw_reward(last)
    # before release the last-waypoint fine and throw terms stay zero
    assert terms["target_fine"] == 0.0 and terms["throw"] == 0.0
    released = replace(last, chi=True,
                       load_positions=np.zeros((3, 3)))
    _, terms2 = mc.throw_reward(released)
    assert terms2["target_fine"] > 0.0
    assert terms2["throw"] > 0.0
    assert terms2["final"] <= 0.0  # release opens the final action gate


def test_load_error_vector_mean_abs(rng):
    loads = rng.uniform(-5, 5, (3, 3))
    target = rng.uniform(-5, 5, 3)
    got = mc.load_error_vector(loads, target)
    assert np.allclose(got, np.abs(target[None] - loads).mean(axis=0))


def test_wrap_angle():
    assert mc.wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert mc.wrap_angle(-3.5 * math.pi) == pytest.approx(0.5 * math.pi)
    assert mc.wrap_angle(0.3) == pytest.approx(0.3)


# ---------------------------------------------------------------------------
# Ballistics

def test_ballistic_landing_closed_form_cases():
    # pure drop from h: t = sqrt(2h/g)
    land, t = mc.ballistic_landing([0, 0, 4.905], [0, 0, 0])
    assert t == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(land, [0, 0, 0], atol=1e-6)
    # thrown horizontally
    land, t = mc.ballistic_landing([1, 2, 4.905], [3, -2, 0])
    assert np.allclose(land, [4, 0, 0], atol=1e-6)
    # thrown upward from the ground: full flight 2 v / g
    land, t = mc.ballistic_landing([0, 0, 0], [1, 0, 9.81])
    assert t == pytest.approx(2.0, abs=1e-9)
    assert land[0] == pytest.approx(2.0, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_ballistic_landing_matches_quadratic_oracle(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform([-10, -10, 0], [10, 10, 12])
    v = rng.uniform(-6, 6, 3)
    land, t = mc.ballistic_landing(p, v)
    exp_land, exp_t = oracles.ballistic_landing_oracle(p, v)
    assert t == pytest.approx(exp_t, abs=1e-9)
    assert np.allclose(land, exp_land, atol=1e-6)


def test_step_load_exact_ground_crossing():
    load = mc.DiscreteLoad(np.array([0.0, 0.0, 0.2]),
                           np.array([2.0, 1.0, -1.0]), 0.0)
    analytic, _ = mc.ballistic_landing(load.position, load.velocity)
    for _ in range(100):
        mc.step_load(load, 0.02)
        if load.landed:
            break
    assert load.landed
    assert load.position[2] == 0.0
    assert np.allclose(load.landing_point, analytic, atol=1e-9)
    # landed loads are inert
    landed_at = load.position.copy()
    mc.step_load(load, 0.02)
    assert np.array_equal(load.position, landed_at)


def test_step_load_conserves_horizontal_velocity():
    load = mc.DiscreteLoad(np.array([0.0, 0.0, 50.0]),
                           np.array([2.0, -3.0, 1.0]), 0.0)
    for _ in range(10):
        mc.step_load(load, 0.02)
    assert load.velocity[0] == 2.0 and load.velocity[1] == -3.0
    assert load.velocity[2] == pytest.approx(1.0 - 10 * 0.02 * 9.81)


# ---------------------------------------------------------------------------
# Release simulation

def test_release_sim_spawn_schedule():
    cfg = mc.ThrowEnvConfig()
    rel = mc.ReleaseSim(cfg, np.random.default_rng(0))
    lo, hi = cfg.release_delay_range
    assert lo <= rel.delay <= hi
    assert rel.spawn_times() == []
    rel.command_open(2.0)
    rel.command_open(5.0)  # only the first open counts
    times = rel.spawn_times()
    assert times == pytest.approx([2.0 + rel.delay + i * 0.5 for i in range(3)])
    # stepping before the delay spawns nothing
    rel.step(2.0 + rel.delay - 0.01, [0, 0, 5], [0, 0, 0], 0.02)
    assert not rel.released
    rel.step(times[0], [0, 0, 5], [1, 0, 0], 0.02)
    assert rel.released and len(rel.loads) == 1
    rel.step(times[2], [0, 0, 5], [1, 0, 0], 0.02)
    assert len(rel.loads) == 3
    for _ in range(200):
        rel.step(99.0, [0, 0, 5], [0, 0, 0], 0.02)
    assert rel.all_landed()
    assert rel.load_positions().shape == (3, 3)


def test_throw_config_validation():
    with pytest.raises(ValueError):
        mc.ThrowEnvConfig(release_delay_range=(0.0, 0.3))
    with pytest.raises(ValueError):
        mc.ThrowEnvConfig(gripper_threshold=1.5)


# ---------------------------------------------------------------------------
# Landing statistics

def test_fit_landing_gaussian_hand_case():
    pts = np.array([[1.0, 0.0], [3.0, 0.0], [2.0, 3.0]])
    stats = mc.fit_landing_gaussian(pts, target=[2.0, 1.0])
    assert np.allclose(stats.mean, [2.0, 1.0])
    assert stats.mean_error == pytest.approx(0.0)
    # sample covariance with ddof=1
    expect = np.cov(pts.T, ddof=1)
    assert np.allclose(stats.covariance, expect)
    assert stats.det_covariance == pytest.approx(np.linalg.det(expect))
    with pytest.raises(ValueError):
        mc.fit_landing_gaussian(pts[:1], target=[0, 0])


def test_write_landing_report(tmp_path):
    import json
    path = tmp_path / "report.json"
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [2.0, 0.0, 0.0]])
    mc.write_landing_report(path, pts, [1.0, 0.0, 0.0], extra={"throws": 3})
    data = json.loads(path.read_text())
    assert data["throws"] == 3
    assert data["mean_error"] == pytest.approx(1.0 / 3.0)


# ---------------------------------------------------------------------------
# Release oracle

def test_release_oracle_predicted_error_transcription(rng):
    oracle = mc.ReleaseOracle([4.0, 1.0, 0.0], delay=0.3)
    for _ in range(200):
        p = rng.uniform([-5, -5, 1], [5, 5, 10])
        v = rng.uniform(-3, 3, 3)
        land, _ = mc.ballistic_landing(p + 0.3 * v, v)
        expect = float(np.linalg.norm(land[:2] - [4.0, 1.0]))
        assert oracle.predicted_error(p, v) == pytest.approx(expect, abs=1e-12)


def test_release_oracle_gates():
    target = [2.0, 0.0, 0.0]
    # drop point directly above the target after delay extrapolation
    p = np.array([2.0, 0.0, 5.0])
    v = np.zeros(3)
    swing_gated = mc.ReleaseOracle(target, delay=0.3, max_swing_rate=0.1)
    assert not swing_gated.release_now(p, v, swing_rate=0.5)
    assert swing_gated.release_now(p, v, swing_rate=0.0)
    speed_gated = mc.ReleaseOracle(target, delay=0.0, max_speed=0.25)
    assert not speed_gated.release_now(p, np.array([1.0, 0.0, 0.0]))
    far = mc.ReleaseOracle(target, delay=0.0, tolerance=0.5)
    assert not far.release_now([20.0, 0.0, 5.0], v)


def test_release_oracle_fires_past_error_minimum():
    oracle = mc.ReleaseOracle([3.0, 0.0, 0.0], delay=0.0, tolerance=1.0)
    # errors 0.8 (under tolerance, still falling), then rising: fire
    seq = [np.array([3.8, 0.0, 5.0]), np.array([3.4, 0.0, 5.0]),
           np.array([3.5, 0.0, 5.0])]
    fired = [oracle.release_now(p, np.zeros(3)) for p in seq]
    assert fired == [False, False, True]


# ---------------------------------------------------------------------------
# Waypoint generation

def test_generate_waypoints_constraints():
    cfg = mc.TrackerEnvConfig()
    for seed in range(300):
        rng = np.random.default_rng(seed)
        wps = mc.generate_waypoints(cfg, rng)
        assert wps.shape == (5, 3)
        assert np.all(wps[:, 0] >= cfg.radius_range[0] - 1e-9)
        assert np.all(wps[:, 0] <= cfg.radius_range[1] + 1e-9)
        assert np.all(wps[:, 2] >= 1.0 - 1e-9)  # final_low_z floor
        assert np.all(wps[:, 2] <= cfg.z_range[1] + 1e-9)
        dphi = np.diff(wps[:, 1])
        assert np.all((np.abs(dphi) >= 0.25 - 1e-9)
                      & (np.abs(dphi) <= 0.45 + 1e-9))


def test_generate_waypoints_manhattan_bound():
    cfg = mc.TrackerEnvConfig()
    for seed in range(300):
        rng = np.random.default_rng(seed)
        wps = mc.generate_waypoints(cfg, rng)
        prev = wps[0]
        # the final waypoint may override z for a low approach, so check the
        # cylindrical Manhattan budget on the interior legs only
        for m in range(1, len(wps) - 1):
            cur = wps[m]
            rot = abs(cur[1] - prev[1]) * prev[0]
            manhattan = rot + abs(cur[0] - prev[0]) + abs(cur[2] - prev[2])
            # 0.5 m residual freedom survives even a spent rotation budget
            assert manhattan <= max(cfg.manhattan_bound, rot + 0.5) + 1e-9
            prev = cur


def test_generate_waypoints_uses_start():
    cfg = mc.TrackerEnvConfig()
    rng = np.random.default_rng(0)
    start = np.array([12.0, 0.5, 4.0])
    wps = mc.generate_waypoints(cfg, rng, start_cyl=start)
    assert abs(abs(wps[0, 1] - 0.5) - 0.35) < 0.11  # first dphi in [0.25, 0.45]


# ---------------------------------------------------------------------------
# Environments and observations

def test_observation_sizes():
    cfg = mc.TrackerEnvConfig()
    assert mc.ObservationSpec(cfg, with_gripper=False).size == 44
    assert mc.ObservationSpec(cfg, with_gripper=True).size == 50
    env = mc.WaypointEnv(cfg, seed=0)
    assert env.observe().shape == (44,)
    tenv = mc.ThrowEnv(seed=0)
    assert tenv.observe().shape == (50,)


def test_tracker_config_validation():
    with pytest.raises(ValueError):
        mc.TrackerEnvConfig(horizon=6, n_waypoints=5)
    with pytest.raises(ValueError):
        mc.TrackerEnvConfig(r_tube=0.0)


def test_waypoint_env_clean_block_is_noise_free():
    cfg = mc.TrackerEnvConfig(obs_noise_scale=0.05)
    env = mc.WaypointEnv(cfg, seed=2)
    obs = env.observe()
    window = env._waypoint_window().ravel()
    clean = obs[-11:]
    assert np.allclose(clean[:9], window)
    assert clean[9] in (0.0, 1.0)
    delta = pp.tube_distance(env.sim.kinematics().end_effector, env.tube())
    assert clean[10] == pytest.approx(delta)


def test_waypoint_env_episode_terminates_on_time():
    cfg = mc.TrackerEnvConfig(episode_length=1.0, obs_noise_scale=0.0)
    env = mc.WaypointEnv(cfg, seed=0)
    done = False
    steps = 0
    while not done:
        _, _, done, info = env.step([0.0, 0.0, 0.0])
        steps += 1
        assert steps <= 10
    assert steps == 10 or info["terminated_unsafe"]


def test_waypoint_env_reward_matches_reference(rng):
    env = mc.WaypointEnv(mc.TrackerEnvConfig(), seed=5)
    for _ in range(10):
        a = rng.uniform(-0.3, 0.3, 3)
        _, reward, done, info = env.step(a)
        assert reward == pytest.approx(
            sum(info["reward_terms"].values())
            + (env.cfg.terminal_penalty if info["terminated_unsafe"] else 0.0))
        if done:
            break


def test_throw_env_release_flow():
    env = mc.ThrowEnv(seed=1)
    assert env.waypoints[-1][2] == 0.0  # ground target
    # gripper action over threshold latches the open command
    _, _, _, info = env.step([0.0, 0.0, 0.0, 1.0])
    assert env._opened
    for _ in range(60):
        _, _, done, info = env.step([0.0, 0.0, 0.0, 1.0])
        if info["chi"]:
            break
    assert info["chi"]
    assert env.sim.state.load_mass == 0.0


# ---------------------------------------------------------------------------
# Scripted controllers

def test_scripted_tracker_slope_limits():
    sim = mch.MachineSim(mch.MachineParams(), mch.MachineState())
    tracker = mc.ScriptedTracker(du_slew=0.06, dqd_ref=0.03)
    cmd = tracker.step(sim, np.array([12.0, 2.0, 4.0]), 1.0)
    # first tick starts from zero commands
    assert abs(cmd.u_slew) <= 0.06 + 1e-12
    assert abs(cmd.qd_ref_boom) <= 0.03 + 1e-12
    assert abs(cmd.qd_ref_stick) <= 0.03 + 1e-12
    prev = cmd
    for _ in range(20):
        nxt = tracker.step(sim, np.array([12.0, 2.0, 4.0]), 1.0)
        assert abs(nxt.u_slew - prev.u_slew) <= 0.06 + 1e-12
        assert abs(nxt.qd_ref_boom - prev.qd_ref_boom) <= 0.03 + 1e-12
        sim.step_control(nxt)
        prev = nxt


def test_scripted_tracker_reduces_error():
    sim = mch.MachineSim(mch.MachineParams(),
                         mch.MachineState(q_slew=0.0, q_boom=0.5, q_stick=-0.6))
    target = np.array([12.0, 0.8, 3.0])
    tracker = mc.ScriptedTracker()

    def err():
        kin = sim.kinematics()
        t = pp.waypoint_to_cartesian(target)
        return float(np.linalg.norm(kin.end_effector - t))

    e0 = err()
    for _ in range(150):
        sim.step_control(tracker.step(sim, target, 1.0))
    assert err() < 0.3 * e0


def test_run_scripted_tracking_episode_contract():
    res = mc.run_scripted_tracking_episode(mc.TrackerEnvConfig(), seed=0)
    assert set(res) == {"tube_distances", "satisfaction",
                        "waypoints_reached", "unsafe"}
    assert 0.0 <= res["satisfaction"] <= 1.0
    assert len(res["tube_distances"]) > 0

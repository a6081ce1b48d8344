"""Attack-point selection on the soil pile.

Contains the grasp environment (observations, reward, terminations), a
brute-force greedy oracle, the highest-observed-point heuristic baseline,
a numpy MLP policy with checkpoint I/O, and a PPO trainer (torch, optional
import) with a vectorized batch environment.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from ._accel import njit, USE_NUMBA
from . import soilfield as sf


@dataclass(frozen=True)
class GraspEnvConfig:
    grid_dims: Tuple[int, int] = (40, 40)
    resolution: Tuple[float, float] = (0.15, 0.15)
    origin: Tuple[float, float] = (0.0, 0.0)
    obs_dims: Optional[Tuple[int, int]] = None   # None = no downsampling
    volume_threshold: float = 0.15               # m^3 per m^2 of grid area
    max_steps: int = 150
    c_ssv: float = 1.0
    # kept small relative to c_ssv: the depth error is quadratic in metres,
    # and a larger weight makes deep bites at tall columns net-negative,
    # teaching learned policies to avoid material altogether
    c_negz: float = 0.2
    c_living: float = 0.01
    c_pos_term: float = 10.0
    c_neg_term: float = -10.0
    c_init: float = 0.0                          # tailored rewards, off by default
    c_x_back: float = 0.0
    init_point: Tuple[float, float] = (0.0, 0.0)
    s_crit: float = 1.0
    slump_iters: int = 200
    action_z_span: float = 4.0                   # m above floor for normalized p_z
    machine_position: Tuple[float, float] = (-8.0, 3.0)
    pile: sf.PileSpec = field(default_factory=sf.PileSpec)
    noise: sf.NoiseModel = field(default_factory=sf.NoiseModel)
    geometry: sf.GripperGeometry = field(default_factory=sf.GripperGeometry)

    def __post_init__(self):
        if self.volume_threshold <= 0:
            raise sf.ConfigurationError("volume threshold must be positive")
        if self.max_steps < 1:
            raise sf.ConfigurationError("max_steps must be >= 1")

    @property
    def grid_area(self) -> float:
        return (self.grid_dims[0] * self.resolution[0]
                * self.grid_dims[1] * self.resolution[1])


def z_feasible(field_: sf.HeightField, x: float, y: float,
               geom: sf.GripperGeometry) -> float:
    """Deepest physically reachable bite bottom at (x, y)."""
    return max(field_.floor_height,
               field_.height_at(x, y) - geom.closed_profile_depth)


def scoop_heading(xy, machine_xy) -> float:
    """Gripper long axis perpendicular to the slew radius through (x, y)."""
    return math.atan2(xy[1] - machine_xy[1], xy[0] - machine_xy[0]) + math.pi / 2


def grasp_reward(ssv: float, p_z: float, z_feas: float, step_index: int,
                 outcome: str, cfg: GraspEnvConfig,
                 p_xy=None, prev_p_xy=None) -> Tuple[float, dict]:
    """Per-step reward: exp-scaled scooped volume, infeasible-depth penalty,
    living cost, and terminal bonuses. Tailored terms activate only when their
    coefficients are nonzero."""
    terms = {
        "ssv": cfg.c_ssv * math.exp(ssv),
        "neg_z": (-cfg.c_negz * (z_feas - p_z) ** 2 if p_z < z_feas else 0.0),
        "living": -cfg.c_living * step_index,
        "pos_term": cfg.c_pos_term if outcome == "success" else 0.0,
        "neg_term": cfg.c_neg_term if outcome == "timeout" else 0.0,
    }
    if cfg.c_init != 0.0 and step_index == 0 and p_xy is not None:
        dx = p_xy[0] - cfg.init_point[0]
        dy = p_xy[1] - cfg.init_point[1]
        terms["init"] = -cfg.c_init * (dx * dx + dy * dy)
    if cfg.c_x_back != 0.0 and prev_p_xy is not None and p_xy is not None:
        terms["x_back"] = (-cfg.c_x_back * abs(prev_p_xy[0] - p_xy[0])
                           if p_xy[0] < prev_p_xy[0] else 0.0)
    return sum(terms.values()), terms


def check_termination(volume: float, area: float, step_index: int,
                      cfg: GraspEnvConfig) -> str:
    if volume / area < cfg.volume_threshold:
        return "success"
    if step_index >= cfg.max_steps:
        return "timeout"
    return "running"


class GraspEnv:
    """Single attack-point episode over one sampled pile."""

    def __init__(self, cfg: GraspEnvConfig = None):
        self.cfg = cfg or GraspEnvConfig()
        self.field: Optional[sf.HeightField] = None
        self.k = 0
        self._rng = None
        self._prev_xy = None

    def reset(self, seed: Optional[int] = None) -> sf.HeightField:
        cfg = self.cfg
        pile = cfg.pile if seed is None else replace(cfg.pile, rng_seed=seed)
        self.field = sf.init_field(pile, cfg.grid_dims, cfg.resolution, cfg.origin)
        self.k = 0
        self._prev_xy = None
        self._rng = np.random.default_rng(
            cfg.noise.rng_seed if seed is None else seed)
        return self.observe()

    def observe(self) -> sf.HeightField:
        obs = sf.observe_noisy(self.field, self.cfg.noise, self._rng)
        if self.cfg.obs_dims is not None:
            obs = sf.downsample_observation(obs, self.cfg.obs_dims)
        return obs

    def clamp_action(self, attack) -> np.ndarray:
        cfg = self.cfg
        lx = cfg.grid_dims[0] * cfg.resolution[0]
        ly = cfg.grid_dims[1] * cfg.resolution[1]
        eps = 1e-6
        return np.array([
            np.clip(attack[0], cfg.origin[0] + eps, cfg.origin[0] + lx - eps),
            np.clip(attack[1], cfg.origin[1] + eps, cfg.origin[1] + ly - eps),
            attack[2],
        ])

    def step(self, attack):
        """Apply one scoop at the (clamped) attack point, slump, and score."""
        cfg = self.cfg
        p = self.clamp_action(np.asarray(attack, dtype=float))
        z_feas = z_feasible(self.field, p[0], p[1], cfg.geometry)
        exec_z = max(p[2], z_feas)
        heading = scoop_heading(p[:2], cfg.machine_position)
        new_field, ssv = sf.apply_scoop(
            self.field, (p[0], p[1], exec_z), cfg.geometry, heading)
        new_field = sf.slump(new_field, cfg.s_crit, cfg.slump_iters).field
        outcome = check_termination(new_field.total_volume(), cfg.grid_area,
                                    self.k + 1, cfg)
        reward, terms = grasp_reward(ssv, p[2], z_feas, self.k, outcome, cfg,
                                     p_xy=p[:2], prev_p_xy=self._prev_xy)
        self.field = new_field
        self._prev_xy = p[:2]
        self.k += 1
        done = outcome != "running"
        info = {"ssv": ssv, "outcome": outcome, "reward_terms": terms,
                "volume": new_field.total_volume()}
        return self.observe(), reward, done, info


# ---------------------------------------------------------------------------
# Baselines

@njit(cache=True)
def _greedy_scan_loops(h, floor, dx, dy, ox, oy, length, width, depth,
                       capacity, mx, my):  # pragma: no cover - numba
    nx, ny = h.shape
    best_i, best_j, best_vol = -1, -1, 0.0
    cell_area = dx * dy
    for ci in range(nx):
        for cj in range(ny):
            ax = ox + (ci + 0.5) * dx
            ay = oy + (cj + 0.5) * dy
            heading = math.atan2(ay - my, ax - mx) + math.pi / 2
            c = math.cos(heading)
            s = math.sin(heading)
            surface = -1e30
            for i in range(nx):
                x = ox + (i + 0.5) * dx - ax
                for j in range(ny):
                    y = oy + (j + 0.5) * dy - ay
                    u = c * x + s * y
                    v = -s * x + c * y
                    if abs(u) <= length / 2 and abs(v) <= width / 2:
                        if h[i, j] > surface:
                            surface = h[i, j]
            if surface <= floor:
                continue
            pz = max(floor, h[ci, cj] - depth)
            bottom = max(pz, max(floor, surface - depth))
            vol = 0.0
            for i in range(nx):
                x = ox + (i + 0.5) * dx - ax
                for j in range(ny):
                    y = oy + (j + 0.5) * dy - ay
                    u = c * x + s * y
                    v = -s * x + c * y
                    if abs(u) <= length / 2 and abs(v) <= width / 2:
                        if h[i, j] > bottom:
                            vol += h[i, j] - bottom
            vol *= cell_area
            if vol > capacity:
                vol = capacity
            if vol > best_vol + 1e-12:
                best_i, best_j, best_vol = ci, cj, vol
    return best_i, best_j, best_vol


def _greedy_scan_numpy(obs: sf.HeightField, geom: sf.GripperGeometry, machine_xy):
    h = obs.heights
    X, Y = obs.cell_centers()
    best = (-1, -1, 0.0)
    nx, ny = h.shape
    for ci in range(nx):
        for cj in range(ny):
            axy = (X[ci, cj], Y[ci, cj])
            heading = scoop_heading(axy, machine_xy)
            c, s = math.cos(heading), math.sin(heading)
            u = c * (X - axy[0]) + s * (Y - axy[1])
            v = -s * (X - axy[0]) + c * (Y - axy[1])
            mask = (np.abs(u) <= geom.footprint_length / 2) \
                & (np.abs(v) <= geom.footprint_width / 2)
            if not mask.any():
                continue
            surface = float(h[mask].max())
            if surface <= obs.floor_height:
                continue
            pz = max(obs.floor_height, h[ci, cj] - geom.closed_profile_depth)
            bottom = max(pz, obs.floor_height,
                         surface - geom.closed_profile_depth)
            vol = float(np.sum(np.where(mask, np.maximum(0.0, h - bottom), 0.0))
                        * obs.cell_area)
            vol = min(vol, geom.capacity)
            if vol > best[2] + 1e-12:
                best = (ci, cj, vol)
    return best


def greedy_oracle(obs: sf.HeightField, geom: sf.GripperGeometry,
                  machine_xy=(-8.0, 3.0),
                  use_numba: Optional[bool] = None) -> Optional[np.ndarray]:
    """Exhaustive search over all cell centers for the volume-maximizing
    attack point (p_z at the feasible depth; heading perpendicular to the
    slew radius). Ties keep the lowest row-major index. Returns None when no
    scoop can remove anything."""
    numba_path = USE_NUMBA if use_numba is None else use_numba
    if numba_path and USE_NUMBA:
        ci, cj, vol = _greedy_scan_loops(
            np.ascontiguousarray(obs.heights, dtype=np.float64),
            obs.floor_height, obs.resolution_x, obs.resolution_y,
            obs.origin[0], obs.origin[1],
            geom.footprint_length, geom.footprint_width,
            geom.closed_profile_depth, geom.capacity,
            machine_xy[0], machine_xy[1])
    else:
        ci, cj, vol = _greedy_scan_numpy(obs, geom, machine_xy)
    if ci < 0 or vol <= 0.0:
        if float(np.max(obs.heights)) <= obs.floor_height:
            return None
        ci, cj = 0, 0
    x = obs.origin[0] + (ci + 0.5) * obs.resolution_x
    y = obs.origin[1] + (cj + 0.5) * obs.resolution_y
    pz = max(obs.floor_height,
             float(obs.heights[ci, cj]) - geom.closed_profile_depth)
    return np.array([x, y, pz])


def highest_point_heuristic(obs: sf.HeightField,
                            geom: Optional[sf.GripperGeometry] = None) -> np.ndarray:
    """Attack the highest observed cell, biting to the depth the observation
    suggests. Spike-sensitive by design: a phantom spike both selects the
    cell and lifts the commanded bite above the real surface, so the gripper
    closes on air."""
    geom = geom or sf.GripperGeometry()
    i, j = np.unravel_index(int(np.argmax(obs.heights)), obs.heights.shape)
    x = obs.origin[0] + (i + 0.5) * obs.resolution_x
    y = obs.origin[1] + (j + 0.5) * obs.resolution_y
    return np.array([x, y, z_feasible(obs, x, y, geom)])


def random_baseline(obs: sf.HeightField, rng: np.random.Generator) -> np.ndarray:
    nx, ny = obs.heights.shape
    x = obs.origin[0] + (rng.uniform(0, nx)) * obs.resolution_x
    y = obs.origin[1] + (rng.uniform(0, ny)) * obs.resolution_y
    return np.array([x, y, obs.floor_height])


# ---------------------------------------------------------------------------
# Policy representation (numpy inference + checkpoint format)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PolicySpec:
    hidden_dims: Tuple[int, ...] = (256, 256, 128, 64)
    activation: str = "relu"
    input_dim: int = 400
    output_dim: int = 3


class MLPPolicy:
    """Plain numpy MLP over the flattened observation.

    Two output layouts: 3 units (normalized [0, 1]^3 attack point) or one
    score per grid cell plus a depth unit (the attack cell is the score
    argmax). The spatial layout is what the trainer produces; the compact
    one is kept for hand-built policies."""

    def __init__(self, spec: PolicySpec, weights=None, seed: int = 0):
        self.spec = spec
        if weights is not None:
            self.weights = weights
        else:
            rng = np.random.default_rng(seed)
            dims = (spec.input_dim,) + spec.hidden_dims + (spec.output_dim,)
            self.weights = []
            for a, b in zip(dims[:-1], dims[1:]):
                w = rng.normal(0, math.sqrt(2.0 / a), (a, b))
                self.weights.append((w, np.zeros(b)))

    def _preactivation(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for i, (w, b) in enumerate(self.weights):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return h

    def forward(self, x: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self._preactivation(x)))  # [0, 1]

    def attack_point(self, obs: sf.HeightField, cfg: GraspEnvConfig) -> np.ndarray:
        nx, ny = cfg.grid_dims
        lx = nx * cfg.resolution[0]
        ly = ny * cfg.resolution[1]
        if self.spec.output_dim == nx * ny + 1:
            # argmax on pre-sigmoid scores: saturation would create ties
            out = self._preactivation(obs.heights.ravel())
            i, j = divmod(int(np.argmax(out[:-1])), ny)
            z = 1.0 / (1.0 + math.exp(-out[-1]))
            return np.array([cfg.origin[0] + (i + 0.5) * cfg.resolution[0],
                             cfg.origin[1] + (j + 0.5) * cfg.resolution[1],
                             obs.floor_height + z * cfg.action_z_span])
        a = self.forward(obs.heights.ravel())
        return np.array([cfg.origin[0] + a[0] * lx,
                         cfg.origin[1] + a[1] * ly,
                         obs.floor_height + a[2] * cfg.action_z_span])


def save_checkpoint(policy: MLPPolicy, path):
    arrays = {"version": np.array([CHECKPOINT_VERSION]),
              "hidden_dims": np.array(policy.spec.hidden_dims),
              "input_dim": np.array([policy.spec.input_dim]),
              "output_dim": np.array([policy.spec.output_dim])}
    for i, (w, b) in enumerate(policy.weights):
        arrays[f"w{i}"] = np.ascontiguousarray(w)
        arrays[f"b{i}"] = np.ascontiguousarray(b)
    np.savez(path, **arrays)


def load_checkpoint(path) -> MLPPolicy:
    data = np.load(path)
    if int(data["version"][0]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data['version'][0]}")
    spec = PolicySpec(hidden_dims=tuple(int(v) for v in data["hidden_dims"]),
                      input_dim=int(data["input_dim"][0]),
                      output_dim=int(data["output_dim"][0]))
    weights = []
    i = 0
    while f"w{i}" in data:
        weights.append((data[f"w{i}"], data[f"b{i}"]))
        i += 1
    return MLPPolicy(spec, weights=weights)


# ---------------------------------------------------------------------------
# Vectorized batch environment (training backend)

class BatchedGraspEnv:
    """N independent grasp episodes stepped together with vectorized scoop,
    slump, and noise updates. Observations are flattened float32 rows."""

    def __init__(self, cfg: GraspEnvConfig, n_envs: int, seed: int = 0):
        self.cfg = cfg
        self.n = n_envs
        self.rng = np.random.default_rng(seed)
        nx, ny = cfg.grid_dims
        self.h = np.zeros((n_envs, nx, ny))
        self.k = np.zeros(n_envs, dtype=int)
        X, Y = np.meshgrid(
            cfg.origin[0] + (np.arange(nx) + 0.5) * cfg.resolution[0],
            cfg.origin[1] + (np.arange(ny) + 0.5) * cfg.resolution[1],
            indexing="ij")
        self._X, self._Y = X, Y
        self.reset_all()

    def _sample_field(self, seed) -> np.ndarray:
        cfg = self.cfg
        f = sf.init_field(replace(cfg.pile, rng_seed=int(seed)),
                          cfg.grid_dims, cfg.resolution, cfg.origin)
        return f.heights

    def reset_all(self):
        for i in range(self.n):
            self.h[i] = self._sample_field(self.rng.integers(2 ** 31))
        self.k[:] = 0
        return self.observe()

    def _reset_envs(self, idx):
        for i in idx:
            self.h[i] = self._sample_field(self.rng.integers(2 ** 31))
            self.k[i] = 0

    def observe(self) -> np.ndarray:
        cfg = self.cfg
        h = self.h
        noise = cfg.noise
        obs = h.copy()
        if noise.gaussian_sigma > 0:
            obs += self.rng.normal(0, noise.gaussian_sigma, h.shape)
        if noise.dropout_prob > 0:
            obs = np.where(self.rng.random(h.shape) < noise.dropout_prob, 0.0, obs)
        if noise.spike_prob > 0:
            spikes = self.rng.random(h.shape) < noise.spike_prob
            obs += np.where(spikes, self.rng.uniform(*noise.spike_range, h.shape), 0.0)
        return obs.reshape(self.n, -1).astype(np.float32)

    def step(self, actions: np.ndarray):
        """actions: (N, 3) normalized [0, 1]; returns (obs, reward, done, info)."""
        cfg = self.cfg
        nx, ny = cfg.grid_dims
        lx, ly = nx * cfg.resolution[0], ny * cfg.resolution[1]
        a = np.clip(actions, 0.0, 1.0)
        ax = cfg.origin[0] + a[:, 0] * lx
        ay = cfg.origin[1] + a[:, 1] * ly
        az = a[:, 2] * cfg.action_z_span

        ci = np.clip(((ax - cfg.origin[0]) / cfg.resolution[0]).astype(int), 0, nx - 1)
        cj = np.clip(((ay - cfg.origin[1]) / cfg.resolution[1]).astype(int), 0, ny - 1)
        z_feas = np.maximum(0.0, self.h[np.arange(self.n), ci, cj]
                            - cfg.geometry.closed_profile_depth)
        exec_z = np.maximum(az, z_feas)

        heading = np.arctan2(ay - cfg.machine_position[1],
                             ax - cfg.machine_position[0]) + math.pi / 2
        c = np.cos(heading)[:, None, None]
        s = np.sin(heading)[:, None, None]
        dx = self._X[None] - ax[:, None, None]
        dy = self._Y[None] - ay[:, None, None]
        u = c * dx + s * dy
        v = -s * dx + c * dy
        mask = (np.abs(u) <= cfg.geometry.footprint_length / 2) \
            & (np.abs(v) <= cfg.geometry.footprint_width / 2)
        surface = np.max(np.where(mask, self.h, -np.inf), axis=(1, 2))
        bottom = np.maximum.reduce([
            exec_z, np.zeros(self.n),
            surface - cfg.geometry.closed_profile_depth])
        removal = np.where(mask, np.maximum(0.0, self.h - bottom[:, None, None]), 0.0)
        cell_area = cfg.resolution[0] * cfg.resolution[1]
        vol = removal.sum(axis=(1, 2)) * cell_area
        scale = np.where(vol > cfg.geometry.capacity, cfg.geometry.capacity
                         / np.maximum(vol, 1e-12), 1.0)
        self.h -= removal * scale[:, None, None]
        ssv = np.minimum(vol, cfg.geometry.capacity)

        self.h = sf.slump_batch(self.h, cfg.resolution[0], cfg.resolution[1],
                                cfg.s_crit, cfg.slump_iters)

        volume = self.h.sum(axis=(1, 2)) * cell_area
        success = volume / cfg.grid_area < cfg.volume_threshold
        timeout = (self.k + 1 >= cfg.max_steps) & ~success
        reward = (cfg.c_ssv * np.exp(ssv)
                  - cfg.c_negz * np.where(az < z_feas, (z_feas - az) ** 2, 0.0)
                  - cfg.c_living * self.k
                  + np.where(success, cfg.c_pos_term, 0.0)
                  + np.where(timeout, cfg.c_neg_term, 0.0))
        self.k += 1
        done = success | timeout
        info = {"ssv": ssv.copy(), "success": success.copy(),
                "episode_len": self.k.copy()}
        if done.any():
            self._reset_envs(np.flatnonzero(done))
        return self.observe(), reward.astype(np.float32), done, info


# ---------------------------------------------------------------------------
# PPO trainer

@dataclass(frozen=True)
class TrainerConfig:
    n_envs: int = 256
    n_updates: int = 300
    rollout_length: int = 16
    lr: float = 3e-4
    clip: float = 0.2
    # short credit horizon: scoop quality is rewarded immediately and the
    # terminal bonus follows within a few steps, while a long horizon lets
    # critic error swamp the per-action signal
    gamma: float = 0.5
    gae_lambda: float = 0.5
    epochs: int = 4
    minibatches: int = 8
    entropy_coef: float = 0.002
    value_coef: float = 0.5
    init_std: float = 0.4
    seed: int = 0


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def train_policy(env_cfg: GraspEnvConfig, trainer_cfg: TrainerConfig = None,
                 metrics_path=None, checkpoint_path=None,
                 progress: bool = False) -> MLPPolicy:
    """Clipped policy-gradient training of the attack-point policy.

    Deterministic per seed at fixed parallelism. Writes per-update metrics to
    CSV when requested and serializes the final policy checkpoint. On NaN
    divergence, raises TrainingDiverged carrying the last good weights.
    """
    import torch
    import torch.nn as nn

    tc = trainer_cfg or TrainerConfig()
    torch.manual_seed(tc.seed)
    torch.set_num_threads(max(1, torch.get_num_threads()))

    nx, ny = env_cfg.grid_dims
    obs_dim = nx * ny
    n_cells = nx * ny
    hidden = (256, 256, 128, 64)
    # fixed input scale so raw heights (metres) enter the net at O(1);
    # folded back into the first layer when exporting the numpy policy
    obs_scale = 0.5

    def mlp(out_dim):
        layers, d = [], obs_dim
        for h in hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        layers.append(nn.Linear(d, out_dim))
        return nn.Sequential(*layers)

    # spatial policy head: one score logit per grid cell (categorical attack
    # cell) plus one depth logit (gaussian in logit space, sigmoid-squashed)
    actor = mlp(n_cells + 1)
    critic = mlp(1)
    with torch.no_grad():
        # start near-uniform over cells with a deep bite: the reward plateau
        # sits above the surface (no material, no gradient) while the depth
        # penalty below the feasible bottom is smooth, so learning climbs
        # toward the feasible depth from below instead of stalling on top
        head = actor[-1]
        head.weight.mul_(0.01)
        head.bias.zero_()
        head.bias[-1] = -2.0
    log_std = nn.Parameter(torch.full((1,), math.log(tc.init_std)))
    params = list(actor.parameters()) + list(critic.parameters()) + [log_std]
    opt = torch.optim.Adam(params, lr=tc.lr)

    cell_x = torch.as_tensor(
        ((torch.arange(n_cells) // ny).float() + 0.5) / nx)
    cell_y = torch.as_tensor(
        ((torch.arange(n_cells) % ny).float() + 0.5) / ny)

    def dists(out):
        d_cell = torch.distributions.Categorical(logits=out[..., :n_cells])
        d_z = torch.distributions.Normal(out[..., n_cells], log_std.exp())
        return d_cell, d_z

    env = BatchedGraspEnv(env_cfg, tc.n_envs, seed=tc.seed)
    obs = torch.as_tensor(env.observe() * obs_scale)

    def to_numpy_policy() -> MLPPolicy:
        weights = []
        linears = [m for m in actor if isinstance(m, nn.Linear)]
        for i, lin in enumerate(linears):
            w = lin.weight.detach().numpy().T.copy()
            if i == 0:
                w *= obs_scale  # numpy policy consumes unscaled heights
            weights.append((w, lin.bias.detach().numpy().copy()))
        spec = PolicySpec(hidden_dims=hidden, input_dim=obs_dim,
                          output_dim=n_cells + 1)
        return MLPPolicy(spec, weights=weights)

    metrics = []
    last_good = to_numpy_policy()
    ep_lens, ep_successes = [], []

    for upd in range(tc.n_updates):
        buf_obs = torch.empty((tc.rollout_length, tc.n_envs, obs_dim))
        buf_cell = torch.empty((tc.rollout_length, tc.n_envs), dtype=torch.long)
        buf_z = torch.empty((tc.rollout_length, tc.n_envs))
        buf_logp = torch.empty((tc.rollout_length, tc.n_envs))
        buf_rew = torch.empty((tc.rollout_length, tc.n_envs))
        buf_done = torch.empty((tc.rollout_length, tc.n_envs))
        buf_val = torch.empty((tc.rollout_length, tc.n_envs))
        with torch.no_grad():
            for t in range(tc.rollout_length):
                d_cell, d_z = dists(actor(obs))
                cell = d_cell.sample()
                z_raw = d_z.sample()
                logp = d_cell.log_prob(cell) + d_z.log_prob(z_raw)
                val = critic(obs).squeeze(-1)
                # cell centers in normalized grid coordinates, depth squashed
                act_np = torch.stack([cell_x[cell], cell_y[cell],
                                      torch.sigmoid(z_raw)], dim=1).numpy()
                next_obs, rew, done, info = env.step(act_np)
                buf_obs[t], buf_cell[t], buf_z[t] = obs, cell, z_raw
                buf_logp[t] = logp
                buf_rew[t] = torch.as_tensor(rew)
                buf_done[t] = torch.as_tensor(done.astype(np.float32))
                buf_val[t] = val
                obs = torch.as_tensor(next_obs * obs_scale)
                if done.any():
                    ep_lens.extend(info["episode_len"][done].tolist())
                    ep_successes.extend(info["success"][done].tolist())
            last_val = critic(obs).squeeze(-1)

        adv = torch.zeros_like(buf_rew)
        gae = torch.zeros(tc.n_envs)
        for t in reversed(range(tc.rollout_length)):
            nxt = last_val if t == tc.rollout_length - 1 else buf_val[t + 1]
            mask = 1.0 - buf_done[t]
            delta = buf_rew[t] + tc.gamma * nxt * mask - buf_val[t]
            gae = delta + tc.gamma * tc.gae_lambda * mask * gae
            adv[t] = gae
        ret = adv + buf_val
        flat = lambda x: x.reshape(-1, *x.shape[2:])
        f_obs, f_cell, f_z = flat(buf_obs), flat(buf_cell), flat(buf_z)
        f_logp, f_adv, f_ret = flat(buf_logp), flat(adv), flat(ret)
        f_adv = (f_adv - f_adv.mean()) / (f_adv.std() + 1e-8)

        n = len(f_obs)
        idx = torch.randperm(n)
        mb = n // tc.minibatches
        diverged = False
        for _ in range(tc.epochs):
            for b in range(tc.minibatches):
                sel = idx[b * mb:(b + 1) * mb]
                d_cell, d_z = dists(actor(f_obs[sel]))
                logp = d_cell.log_prob(f_cell[sel]) + d_z.log_prob(f_z[sel])
                ratio = (logp - f_logp[sel]).exp()
                a = f_adv[sel]
                loss_pi = -torch.min(ratio * a,
                                     ratio.clamp(1 - tc.clip, 1 + tc.clip) * a).mean()
                loss_v = (critic(f_obs[sel]).squeeze(-1) - f_ret[sel]).pow(2).mean()
                entropy = (d_cell.entropy() + d_z.entropy()).mean()
                loss = loss_pi + tc.value_coef * loss_v - tc.entropy_coef * entropy
                if not torch.isfinite(loss):
                    diverged = True
                    break
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(params, 1.0)
                opt.step()
            if diverged:
                break
        if diverged:
            raise TrainingDiverged(f"NaN loss at update {upd}", last_good)
        last_good = to_numpy_policy()
        mean_len = float(np.mean(ep_lens[-200:])) if ep_lens else float("nan")
        succ = float(np.mean(ep_successes[-200:])) if ep_successes else 0.0
        metrics.append({"update": upd, "mean_reward": float(buf_rew.mean()),
                        "mean_episode_len": mean_len, "success_rate": succ})
        if progress and upd % 20 == 0:
            print(f"update {upd}: reward {metrics[-1]['mean_reward']:.3f} "
                  f"len {mean_len:.1f} success {succ:.2f}")

    policy = to_numpy_policy()
    if metrics_path:
        with open(metrics_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["update", "mean_reward",
                                                   "mean_episode_len", "success_rate"])
            writer.writeheader()
            writer.writerows(metrics)
    if checkpoint_path:
        save_checkpoint(policy, checkpoint_path)
    policy.metrics = metrics
    return policy


def evaluate_planner(plan_fn, env_cfg: GraspEnvConfig, episodes: int = 20,
                     seed: int = 0, max_scoops: Optional[int] = None) -> dict:
    """Run a planner callable obs -> attack point through full episodes and
    report mean scoops-to-success and volumes."""
    scoops, volumes, successes = [], [], 0
    limit = max_scoops or env_cfg.max_steps
    for ep in range(episodes):
        env = GraspEnv(env_cfg)
        obs = env.reset(seed=seed + ep)
        for k in range(limit):
            attack = plan_fn(obs)
            if attack is None:
                break
            obs, _, done, info = env.step(attack)
            volumes.append(info["ssv"])
            if done:
                if info["outcome"] == "success":
                    successes += 1
                break
        scoops.append(env.k)
    return {"mean_scoops": float(np.mean(scoops)),
            "mean_volume": float(np.mean(volumes)) if volumes else 0.0,
            "success_rate": successes / episodes}

"""2.5D granular height-field: pile initialization, scoop footprint updates,
slump relaxation, sensor-noise model, and snapshot file I/O.

The field is a row-major (n_x, n_y) grid of heights in meters. All mutating
operations are pure: they return a new HeightField and never touch the input.
"""

from dataclasses import dataclass, field as dc_field, replace
from typing import Optional, Tuple

import numpy as np

from ._accel import njit, USE_NUMBA


class ConfigurationError(ValueError):
    """Invalid grid dimensions, resolutions, or spec parameters."""


class OutOfBoundsError(ValueError):
    """A queried world position falls outside the grid."""


@dataclass(frozen=True)
class HeightField:
    heights: np.ndarray          # (n_x, n_y), meters
    resolution_x: float          # meters / cell
    resolution_y: float
    origin: Tuple[float, float] = (0.0, 0.0)
    floor_height: float = 0.0

    @property
    def shape(self):
        return self.heights.shape

    @property
    def cell_area(self):
        return self.resolution_x * self.resolution_y

    def total_volume(self) -> float:
        return float(np.sum(self.heights - self.floor_height) * self.cell_area)

    def cell_centers(self):
        """World (x, y) coordinates of every cell center, as two (n_x, n_y) arrays."""
        nx, ny = self.heights.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.resolution_x
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.resolution_y
        return np.meshgrid(xs, ys, indexing="ij")

    def world_to_index(self, x: float, y: float) -> Tuple[int, int]:
        i = int(np.floor((x - self.origin[0]) / self.resolution_x))
        j = int(np.floor((y - self.origin[1]) / self.resolution_y))
        nx, ny = self.heights.shape
        if not (0 <= i < nx and 0 <= j < ny):
            raise OutOfBoundsError(f"position ({x}, {y}) outside grid")
        return i, j

    def height_at(self, x: float, y: float) -> float:
        i, j = self.world_to_index(x, y)
        return float(self.heights[i, j])

    def validate(self):
        nx, ny = self.heights.shape
        if nx < 2 or ny < 2:
            raise ConfigurationError("grid must be at least 2x2")
        if self.resolution_x <= 0 or self.resolution_y <= 0:
            raise ConfigurationError("resolutions must be positive")
        if np.any(self.heights < self.floor_height - 1e-12):
            raise ConfigurationError("heights below floor")
        return self

    def with_heights(self, heights: np.ndarray) -> "HeightField":
        return replace(self, heights=heights)


@dataclass(frozen=True)
class GripperGeometry:
    footprint_length: float = 2.0    # m, long axis of the open clamshell
    footprint_width: float = 1.5     # m
    capacity: float = 1.5            # m^3
    closed_profile_depth: float = 0.9  # m, max bite depth of the closed shells

    def __post_init__(self):
        vals = (self.footprint_length, self.footprint_width,
                self.capacity, self.closed_profile_depth)
        if any(v <= 0 for v in vals):
            raise ConfigurationError("gripper geometry fields must be positive")
        max_cap = self.footprint_length * self.footprint_width * self.closed_profile_depth
        if self.capacity > max_cap + 1e-12:
            raise ConfigurationError("capacity exceeds footprint x bite depth")


@dataclass(frozen=True)
class PileSpec:
    kind: str = "skew_normal_pile"   # or "gp_container"
    mean: Optional[Tuple[float, float]] = None   # pile peak location (world m)
    skew: Optional[Tuple[float, float]] = None   # skewness per axis
    scale: Optional[Tuple[float, float]] = None  # spread per axis, m
    amplitude: Optional[float] = None            # peak height above floor, m
    length_scale: float = 0.8        # GP squared-exponential length scale, m
    variance: float = 0.09           # GP kernel variance, m^2
    gp_mean_height: float = 0.6      # container fill level above floor, m
    rng_seed: int = 0


@dataclass(frozen=True)
class NoiseModel:
    gaussian_sigma: float = 0.1
    dropout_prob: float = 0.10
    spike_prob: float = 0.005
    spike_range: Tuple[float, float] = (1.0, 3.0)
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.dropout_prob <= 1.0 and 0.0 <= self.spike_prob <= 1.0):
            raise ConfigurationError("probabilities must be in [0, 1]")
        if self.gaussian_sigma < 0:
            raise ConfigurationError("sigma must be >= 0")
        if self.spike_range[0] > self.spike_range[1]:
            raise ConfigurationError("spike_range min > max")


@dataclass(frozen=True)
class SlumpResult:
    field: HeightField
    converged: bool
    iterations: int


# ---------------------------------------------------------------------------
# Initialization

def _skew_normal_1d(x, loc, scale, alpha):
    from scipy.stats import norm
    t = (x - loc) / scale
    return 2.0 * norm.pdf(t) * norm.cdf(alpha * t)


def init_field(spec: PileSpec, dims: Tuple[int, int],
               resolutions: Tuple[float, float],
               origin: Tuple[float, float] = (0.0, 0.0),
               floor_height: float = 0.0) -> HeightField:
    """Sample an initial soil surface.

    skew_normal_pile: product of two 1D skew-normal profiles, rescaled so the
    peak equals the requested amplitude (a single local maximum).
    gp_container: a squared-exponential Gaussian-process surface around a
    constant fill level, clamped at the floor.
    """
    nx, ny = dims
    if nx < 2 or ny < 2:
        raise ConfigurationError("dims must be at least 2x2")
    rx, ry = resolutions
    if rx <= 0 or ry <= 0:
        raise ConfigurationError("resolutions must be positive")

    rng = np.random.default_rng(spec.rng_seed)
    lx, ly = nx * rx, ny * ry
    xs = origin[0] + (np.arange(nx) + 0.5) * rx
    ys = origin[1] + (np.arange(ny) + 0.5) * ry

    if spec.kind == "skew_normal_pile":
        mean = spec.mean
        if mean is None:
            mean = (origin[0] + lx * rng.uniform(0.35, 0.65),
                    origin[1] + ly * rng.uniform(0.35, 0.65))
        skew = spec.skew if spec.skew is not None else tuple(rng.uniform(-3.0, 3.0, 2))
        scale = spec.scale if spec.scale is not None else tuple(rng.uniform(0.12, 0.22, 2) * min(lx, ly))
        amplitude = spec.amplitude if spec.amplitude is not None else float(rng.uniform(1.5, 3.0))
        px = _skew_normal_1d(xs, mean[0], scale[0], skew[0])
        py = _skew_normal_1d(ys, mean[1], scale[1], skew[1])
        surf = np.outer(px, py)
        peak = surf.max()
        if peak > 0 and amplitude > 0:
            surf = surf * (amplitude / peak)
        else:
            surf = np.zeros_like(surf)
        heights = floor_height + surf
    elif spec.kind == "gp_container":
        # Sample the GP on a coarse grid and upsample; keeps the Cholesky cheap.
        cnx, cny = min(nx, 24), min(ny, 24)
        cx = np.linspace(xs[0], xs[-1], cnx)
        cy = np.linspace(ys[0], ys[-1], cny)
        gx, gy = np.meshgrid(cx, cy, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        cov = spec.variance * np.exp(-0.5 * d2 / spec.length_scale ** 2)
        cov += 1e-10 * np.eye(len(pts))
        sample = np.linalg.cholesky(cov) @ rng.standard_normal(len(pts))
        coarse = sample.reshape(cnx, cny) + spec.gp_mean_height
        from scipy.interpolate import RectBivariateSpline
        sp = RectBivariateSpline(cx, cy, coarse,
                                 kx=min(3, cnx - 1), ky=min(3, cny - 1))
        heights = floor_height + np.maximum(0.0, sp(xs, ys))
    else:
        raise ConfigurationError(f"unknown pile kind {spec.kind!r}")

    heights = np.maximum(heights, floor_height)
    return HeightField(heights, rx, ry, tuple(origin), floor_height).validate()


# ---------------------------------------------------------------------------
# Scoop update

def footprint_mask(field: HeightField, attack_xy, geom: GripperGeometry,
                   heading: float) -> np.ndarray:
    """Boolean mask of cells whose centers lie inside the oriented footprint."""
    X, Y = field.cell_centers()
    dx = X - attack_xy[0]
    dy = Y - attack_xy[1]
    c, s = np.cos(heading), np.sin(heading)
    u = c * dx + s * dy        # along the gripper long axis
    v = -s * dx + c * dy
    return (np.abs(u) <= geom.footprint_length / 2) & (np.abs(v) <= geom.footprint_width / 2)


def apply_scoop(field: HeightField, attack, geom: GripperGeometry,
                heading: float = 0.0) -> Tuple[HeightField, float]:
    """Remove material under the closed-clamshell footprint.

    The bite bottom is flat, at max(attack_z, floor, local surface - bite depth).
    Removal is scaled down uniformly if it would exceed the gripper capacity.
    """
    ax, ay, az = float(attack[0]), float(attack[1]), float(attack[2])
    field.world_to_index(ax, ay)  # raises OutOfBoundsError when outside

    mask = footprint_mask(field, (ax, ay), geom, heading)
    if not mask.any():
        return field, 0.0
    h = field.heights
    surface = float(h[mask].max())
    bottom = max(az, field.floor_height, surface - geom.closed_profile_depth)
    removal = np.where(mask, np.maximum(0.0, h - bottom), 0.0)
    volume = float(removal.sum() * field.cell_area)
    if volume <= 0.0:
        return field, 0.0
    if volume > geom.capacity:
        removal *= geom.capacity / volume
        volume = geom.capacity
    return field.with_heights(h - removal), volume


def deposit(field: HeightField, xy, volume: float) -> HeightField:
    """Add material volume onto the cell containing (x, y)."""
    i, j = field.world_to_index(xy[0], xy[1])
    h = field.heights.copy()
    h[i, j] += volume / field.cell_area
    return field.with_heights(h)


# ---------------------------------------------------------------------------
# Slump relaxation (cellular automaton)
#
# Each iteration moves a fraction of the over-critical excess toward the
# steepest-descent 4-neighbor (tie -> first in -x, +x, -y, +y order). Grid
# boundaries act as walls, so total volume is conserved exactly.

_SLUMP_RATE = 0.25
_SLUMP_TOL = 1e-9  # slope convergence tolerance; the relaxation is asymptotic


def max_descent_slope(field: HeightField) -> float:
    """Largest downhill finite-difference slope to any 4-neighbor."""
    h = field.heights
    out = 0.0
    for axis, d in ((0, field.resolution_x), (1, field.resolution_y)):
        diff = np.abs(np.diff(h, axis=axis)) / d
        if diff.size:
            out = max(out, float(diff.max()))
    return out


def _slump_transfers_numpy(h, dx, dy, s_crit, rate):
    nx, ny = h.shape
    drop = np.full((4, nx, ny), -np.inf)
    # slopes toward -x, +x, -y, +y
    drop[0, 1:, :] = (h[1:, :] - h[:-1, :]) / dx
    drop[1, :-1, :] = (h[:-1, :] - h[1:, :]) / dx
    drop[2, :, 1:] = (h[:, 1:] - h[:, :-1]) / dy
    drop[3, :, :-1] = (h[:, :-1] - h[:, 1:]) / dy
    best = np.argmax(drop, axis=0)     # first max wins ties, matching the loop kernel
    best_slope = np.take_along_axis(drop, best[None], axis=0)[0]
    active = best_slope > s_crit
    dist = np.where(best < 2, dx, dy)
    amount = np.where(active, rate * (best_slope - s_crit) * dist, 0.0)
    T = np.zeros((4, nx, ny))
    for k in range(4):
        T[k] = np.where(best == k, amount, 0.0)
    return T


def _slump_step_numpy(h, dx, dy, s_crit, rate):
    T = _slump_transfers_numpy(h, dx, dy, s_crit, rate)
    hn = h - T[0] - T[1] - T[2] - T[3]
    hn[:-1, :] += T[0, 1:, :]
    hn[1:, :] += T[1, :-1, :]
    hn[:, :-1] += T[2, :, 1:]
    hn[:, 1:] += T[3, :, :-1]
    return hn


@njit(cache=True)
def _slump_run_loops(h, dx, dy, s_crit, rate, max_iters):  # pragma: no cover - numba
    nx, ny = h.shape
    T = np.zeros((4, nx, ny))
    for it in range(max_iters):
        # convergence check on downhill slopes
        worst = 0.0
        for i in range(nx):
            for j in range(ny):
                if i + 1 < nx:
                    s = abs(h[i + 1, j] - h[i, j]) / dx
                    if s > worst:
                        worst = s
                if j + 1 < ny:
                    s = abs(h[i, j + 1] - h[i, j]) / dy
                    if s > worst:
                        worst = s
        if worst <= s_crit + _SLUMP_TOL:
            return h, it, True
        T[:] = 0.0
        for i in range(nx):
            for j in range(ny):
                best_k = -1
                best_slope = -np.inf
                if i > 0:
                    s = (h[i, j] - h[i - 1, j]) / dx
                    if s > best_slope:
                        best_slope = s
                        best_k = 0
                if i + 1 < nx:
                    s = (h[i, j] - h[i + 1, j]) / dx
                    if s > best_slope:
                        best_slope = s
                        best_k = 1
                if j > 0:
                    s = (h[i, j] - h[i, j - 1]) / dy
                    if s > best_slope:
                        best_slope = s
                        best_k = 2
                if j + 1 < ny:
                    s = (h[i, j] - h[i, j + 1]) / dy
                    if s > best_slope:
                        best_slope = s
                        best_k = 3
                if best_k >= 0 and best_slope > s_crit:
                    dist = dx if best_k < 2 else dy
                    T[best_k, i, j] = rate * (best_slope - s_crit) * dist
        hn = np.empty_like(h)
        for i in range(nx):
            for j in range(ny):
                v = h[i, j] - T[0, i, j] - T[1, i, j] - T[2, i, j] - T[3, i, j]
                if i + 1 < nx:
                    v += T[0, i + 1, j]
                if i > 0:
                    v += T[1, i - 1, j]
                if j + 1 < ny:
                    v += T[2, i, j + 1]
                if j > 0:
                    v += T[3, i, j - 1]
                hn[i, j] = v
        h = hn
    # did not converge within budget
    worst = 0.0
    for i in range(nx):
        for j in range(ny):
            if i + 1 < nx:
                s = abs(h[i + 1, j] - h[i, j]) / dx
                if s > worst:
                    worst = s
            if j + 1 < ny:
                s = abs(h[i, j + 1] - h[i, j]) / dy
                if s > worst:
                    worst = s
    return h, max_iters, worst <= s_crit + _SLUMP_TOL


def _slump_run_numpy(h, dx, dy, s_crit, rate, max_iters):
    for it in range(max_iters):
        worst = 0.0
        d0 = np.abs(np.diff(h, axis=0)) / dx
        d1 = np.abs(np.diff(h, axis=1)) / dy
        if d0.size:
            worst = max(worst, float(d0.max()))
        if d1.size:
            worst = max(worst, float(d1.max()))
        if worst <= s_crit + _SLUMP_TOL:
            return h, it, True
        h = _slump_step_numpy(h, dx, dy, s_crit, rate)
    return h, max_iters, max_descent_slope(
        HeightField(h, dx, dy)) <= s_crit


def slump(field: HeightField, s_crit: float, max_iters: int = 200,
          use_numba: Optional[bool] = None) -> SlumpResult:
    """Relax the surface until no downhill slope exceeds s_crit.

    Conserves total volume exactly (boundaries are walls). Returns the relaxed
    field plus a converged flag; hitting max_iters is a normal, flagged return.
    """
    if s_crit <= 0:
        raise ConfigurationError("s_crit must be positive")
    if max_iters < 1:
        raise ConfigurationError("max_iters must be >= 1")
    numba_path = USE_NUMBA if use_numba is None else use_numba
    h = np.ascontiguousarray(field.heights, dtype=np.float64)
    if numba_path and USE_NUMBA:
        hn, iters, conv = _slump_run_loops(h.copy(), field.resolution_x,
                                           field.resolution_y, float(s_crit),
                                           _SLUMP_RATE, int(max_iters))
    else:
        hn, iters, conv = _slump_run_numpy(h.copy(), field.resolution_x,
                                           field.resolution_y, float(s_crit),
                                           _SLUMP_RATE, int(max_iters))
    return SlumpResult(field.with_heights(hn), bool(conv), int(iters))


@njit(cache=True)
def _slump_batch_loops(h, dx, dy, s_crit, rate, max_iters):  # pragma: no cover - numba
    n, nx, ny = h.shape
    amount = np.zeros((n, nx, ny))
    bestk = np.zeros((n, nx, ny), np.int64)
    for _ in range(max_iters):
        # global convergence over the whole stack, matching the numpy path:
        # per-axis max of |diff| first, divided by the resolution after
        m0 = 0.0
        m1 = 0.0
        for k in range(n):
            for i in range(nx - 1):
                for j in range(ny):
                    d = abs(h[k, i + 1, j] - h[k, i, j])
                    if d > m0:
                        m0 = d
            for i in range(nx):
                for j in range(ny - 1):
                    d = abs(h[k, i, j + 1] - h[k, i, j])
                    if d > m1:
                        m1 = d
        worst = 0.0
        if nx > 1 and m0 / dx > worst:
            worst = m0 / dx
        if ny > 1 and m1 / dy > worst:
            worst = m1 / dy
        if worst <= s_crit + _SLUMP_TOL:
            break
        for k in range(n):
            for i in range(nx):
                for j in range(ny):
                    best = -1
                    best_slope = -np.inf
                    if i > 0:
                        s = (h[k, i, j] - h[k, i - 1, j]) / dx
                        if s > best_slope:
                            best_slope = s
                            best = 0
                    if i + 1 < nx:
                        s = (h[k, i, j] - h[k, i + 1, j]) / dx
                        if s > best_slope:
                            best_slope = s
                            best = 1
                    if j > 0:
                        s = (h[k, i, j] - h[k, i, j - 1]) / dy
                        if s > best_slope:
                            best_slope = s
                            best = 2
                    if j + 1 < ny:
                        s = (h[k, i, j] - h[k, i, j + 1]) / dy
                        if s > best_slope:
                            best_slope = s
                            best = 3
                    bestk[k, i, j] = best
                    if best >= 0 and best_slope > s_crit:
                        dist = dx if best < 2 else dy
                        amount[k, i, j] = rate * (best_slope - s_crit) * dist
                    else:
                        amount[k, i, j] = 0.0
        hn = np.empty_like(h)
        for k in range(n):
            for i in range(nx):
                for j in range(ny):
                    # neighbor contributions in the same direction order as
                    # the vectorized path so results agree bitwise
                    v = h[k, i, j] - amount[k, i, j]
                    if i + 1 < nx and bestk[k, i + 1, j] == 0:
                        v += amount[k, i + 1, j]
                    if i > 0 and bestk[k, i - 1, j] == 1:
                        v += amount[k, i - 1, j]
                    if j + 1 < ny and bestk[k, i, j + 1] == 2:
                        v += amount[k, i, j + 1]
                    if j > 0 and bestk[k, i, j - 1] == 3:
                        v += amount[k, i, j - 1]
                    hn[k, i, j] = v
        h = hn
    return h


def _slump_batch_numpy(h, dx, dy, s_crit, max_iters):
    n, nx, ny = h.shape
    for _ in range(max_iters):
        worst = 0.0
        if nx > 1:
            worst = max(worst, float(np.abs(np.diff(h, axis=1)).max()) / dx)
        if ny > 1:
            worst = max(worst, float(np.abs(np.diff(h, axis=2)).max()) / dy)
        if worst <= s_crit + _SLUMP_TOL:
            break
        drop = np.full((4, n, nx, ny), -np.inf)
        drop[0, :, 1:, :] = (h[:, 1:, :] - h[:, :-1, :]) / dx
        drop[1, :, :-1, :] = (h[:, :-1, :] - h[:, 1:, :]) / dx
        drop[2, :, :, 1:] = (h[:, :, 1:] - h[:, :, :-1]) / dy
        drop[3, :, :, :-1] = (h[:, :, :-1] - h[:, :, 1:]) / dy
        best = np.argmax(drop, axis=0)
        best_slope = np.take_along_axis(drop, best[None], axis=0)[0]
        active = best_slope > s_crit
        dist = np.where(best < 2, dx, dy)
        amount = np.where(active, _SLUMP_RATE * (best_slope - s_crit) * dist, 0.0)
        hn = h - amount
        hn[:, :-1, :] += np.where(best == 0, amount, 0.0)[:, 1:, :]
        hn[:, 1:, :] += np.where(best == 1, amount, 0.0)[:, :-1, :]
        hn[:, :, :-1] += np.where(best == 2, amount, 0.0)[:, :, 1:]
        hn[:, :, 1:] += np.where(best == 3, amount, 0.0)[:, :, :-1]
        h = hn
    return h


def slump_batch(heights: np.ndarray, dx: float, dy: float, s_crit: float,
                max_iters: int = 200,
                use_numba: Optional[bool] = None) -> np.ndarray:
    """Vectorized slump over a (N, n_x, n_y) stack, for batched environments.

    Applies the same transfer rule to every field simultaneously; iterates
    until every field satisfies the slope bound or max_iters is reached.
    """
    h = np.ascontiguousarray(np.array(heights, dtype=np.float64))
    numba_path = USE_NUMBA if use_numba is None else use_numba
    if numba_path and USE_NUMBA:
        return _slump_batch_loops(h, dx, dy, float(s_crit), _SLUMP_RATE,
                                  int(max_iters))
    return _slump_batch_numpy(h, dx, dy, float(s_crit), int(max_iters))


# ---------------------------------------------------------------------------
# Observation model

def observe_noisy(field: HeightField, noise: NoiseModel,
                  rng: Optional[np.random.Generator] = None) -> HeightField:
    """Sensor model: Gaussian noise, then dropout (to floor), then spikes.

    With a fresh rng the result is deterministic per noise.rng_seed. The source
    field is never modified. The returned observation may dip below the floor
    (raw sensor semantics) and is not validated.
    """
    if rng is None:
        rng = np.random.default_rng(noise.rng_seed)
    h = field.heights.copy()
    if noise.gaussian_sigma > 0:
        h += rng.normal(0.0, noise.gaussian_sigma, h.shape)
    if noise.dropout_prob > 0:
        h = np.where(rng.random(h.shape) < noise.dropout_prob,
                     field.floor_height, h)
    if noise.spike_prob > 0:
        spikes = rng.random(h.shape) < noise.spike_prob
        h = h + np.where(
            spikes, rng.uniform(noise.spike_range[0], noise.spike_range[1], h.shape), 0.0)
    return field.with_heights(h)


def median_filter_observation(obs: HeightField, size: int = 3) -> HeightField:
    """Spike-robust cleanup used by classical planners on noisy observations."""
    from scipy.ndimage import median_filter
    return obs.with_heights(median_filter(obs.heights, size=size, mode="nearest"))


def downsample_observation(obs: HeightField, target_dims) -> HeightField:
    """Bicubic resample to a coarser grid; identity when dims are unchanged."""
    nx, ny = obs.heights.shape
    tx, ty = target_dims
    if tx > nx or ty > ny:
        raise ConfigurationError("target dims exceed source dims")
    if (tx, ty) == (nx, ny):
        return obs.with_heights(obs.heights.copy())
    from scipy.interpolate import RectBivariateSpline
    xs = (np.arange(nx) + 0.5) * obs.resolution_x
    ys = (np.arange(ny) + 0.5) * obs.resolution_y
    sp = RectBivariateSpline(xs, ys, obs.heights,
                             kx=min(3, nx - 1), ky=min(3, ny - 1))
    rx = nx * obs.resolution_x / tx
    ry = ny * obs.resolution_y / ty
    txs = (np.arange(tx) + 0.5) * rx
    tys = (np.arange(ty) + 0.5) * ry
    return HeightField(sp(txs, tys), rx, ry, obs.origin, obs.floor_height)


# ---------------------------------------------------------------------------
# Snapshot file format: plain-text header + row-major heights.

def save_heightmap(field: HeightField, path):
    with open(path, "w") as f:
        nx, ny = field.heights.shape
        f.write(f"# bulksim heightmap v1\n")
        f.write(f"{nx} {ny} "
                f"{float(field.resolution_x)!r} {float(field.resolution_y)!r} "
                f"{float(field.origin[0])!r} {float(field.origin[1])!r} "
                f"{float(field.floor_height)!r}\n")
        for row in field.heights:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_heightmap(path) -> HeightField:
    with open(path) as f:
        header = f.readline()
        if not header.startswith("# bulksim heightmap"):
            raise ConfigurationError(f"{path}: not a heightmap snapshot")
        parts = f.readline().split()
        nx, ny = int(parts[0]), int(parts[1])
        rx, ry, ox, oy, floor = map(float, parts[2:7])
        heights = np.loadtxt(f, ndmin=2)
    if heights.shape != (nx, ny):
        raise ConfigurationError(f"{path}: data shape {heights.shape} != header ({nx}, {ny})")
    return HeightField(heights, rx, ry, (ox, oy), floor)

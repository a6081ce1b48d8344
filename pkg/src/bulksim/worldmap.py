"""Sparse 3D voxel occupancy map with point ingestion, region masking,
virtual obstacles, and a conservative sphere-proxy collision test for the
machine body.

The map is a flat hash set of voxel indices; at desk scale an octree buys
nothing, and the interface leaves room to swap one in later.
"""

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from . import machine as mch


class JointLimitError(ValueError):
    """Collision query for a configuration outside the joint limits."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, world meters."""
    min_corner: Tuple[float, float, float]
    max_corner: Tuple[float, float, float]

    def contains(self, p) -> bool:
        return all(self.min_corner[k] <= p[k] <= self.max_corner[k] for k in range(3))

    @property
    def volume(self) -> float:
        return math.prod(max(0.0, self.max_corner[k] - self.min_corner[k])
                         for k in range(3))


class VoxelMap:
    def __init__(self, voxel_size: float = 0.5, origin=(0.0, 0.0, 0.0)):
        if voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        self.voxel_size = float(voxel_size)
        self.origin = tuple(float(v) for v in origin)
        self._occupied: set = set()
        self._centers_cache: Optional[np.ndarray] = None

    def __len__(self):
        return len(self._occupied)

    def occupied_indices(self):
        return frozenset(self._occupied)

    def index_of(self, point) -> Tuple[int, int, int]:
        return tuple(int(math.floor((point[k] - self.origin[k]) / self.voxel_size))
                     for k in range(3))

    def voxel_center(self, idx) -> np.ndarray:
        return np.array([self.origin[k] + (idx[k] + 0.5) * self.voxel_size
                         for k in range(3)])

    def is_occupied(self, idx) -> bool:
        return tuple(idx) in self._occupied

    def insert_point(self, point):
        self._occupied.add(self.index_of(point))
        self._centers_cache = None

    def centers(self) -> np.ndarray:
        """(N, 3) world centers of all occupied voxels, cached."""
        if self._centers_cache is None \
                or len(self._centers_cache) != len(self._occupied):
            if self._occupied:
                idx = np.array(sorted(self._occupied), dtype=float)
            else:
                idx = np.zeros((0, 3))
            self._centers_cache = np.asarray(self.origin) \
                + (idx + 0.5) * self.voxel_size
        return self._centers_cache

    def copy(self) -> "VoxelMap":
        out = VoxelMap(self.voxel_size, self.origin)
        out._occupied = set(self._occupied)
        return out


def ingest_points(points: Iterable, voxel_size: float = 0.5,
                  origin=(0.0, 0.0, 0.0)) -> VoxelMap:
    """Mark the voxel of every point occupied (idempotent set semantics)."""
    vmap = VoxelMap(voxel_size, origin)
    for p in points:
        vmap.insert_point(p)
    return vmap


def load_points(path) -> np.ndarray:
    """Whitespace-separated `x y z` lines, meters."""
    pts = np.loadtxt(path, ndmin=2)
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    return pts


def _box_index_range(vmap: VoxelMap, box: Box):
    lo = vmap.index_of(box.min_corner)
    hi = tuple(int(math.ceil((box.max_corner[k] - vmap.origin[k]) / vmap.voxel_size))
               for k in range(3))
    return lo, hi


def mask_region(vmap: VoxelMap, box: Box) -> VoxelMap:
    """Remove all voxels whose centers lie inside the box (pile region,
    upper-carriage region)."""
    out = vmap.copy()
    out._occupied = {idx for idx in out._occupied
                     if not box.contains(vmap.voxel_center(idx))}
    return out


def insert_virtual_obstacle(vmap: VoxelMap, box: Box) -> VoxelMap:
    """Fill the box with occupied voxels at map resolution (idempotent)."""
    out = vmap.copy()
    if box.volume <= 0.0:
        return out
    lo, hi = _box_index_range(vmap, box)
    for i in range(lo[0], hi[0]):
        for j in range(lo[1], hi[1]):
            for k in range(lo[2], hi[2]):
                out._occupied.add((i, j, k))
    return out


def voxelize_heightfield(field, voxel_size: float = 0.5,
                         origin=(0.0, 0.0, 0.0),
                         min_height: float = 0.05) -> VoxelMap:
    """Occupy voxels under the soil surface (column fill above the floor)."""
    vmap = VoxelMap(voxel_size, origin)
    X, Y = field.cell_centers()
    H = field.heights
    for i in range(H.shape[0]):
        for j in range(H.shape[1]):
            top = H[i, j]
            if top - field.floor_height < min_height:
                continue
            z = field.floor_height + voxel_size / 2
            while z < top:
                vmap.insert_point((X[i, j], Y[i, j], z))
                z += voxel_size
    return vmap


# ---------------------------------------------------------------------------
# Machine body proxy and collision checking

@dataclass(frozen=True)
class SphereProxy:
    center: np.ndarray  # world m
    radius: float


GRIPPER_INFLATION_DEFAULT = 0.5  # m, margin for tool oscillation


def body_proxy_spheres(config, params: mch.MachineParams,
                       gripper_inflation: float = GRIPPER_INFLATION_DEFAULT,
                       spheres_per_link: int = 4,
                       link_inflation: float = 0.0) -> list:
    """Spheres along boom and stick plus an inflated gripper ball.

    config is (q_slew, q_boom, q_stick); the tool is assumed hanging straight
    down with its swing envelope absorbed into the gripper inflation.
    """
    q_slew, q_boom, q_stick = config
    state = mch.MachineState(q_slew=q_slew, q_boom=q_boom, q_stick=q_stick)
    radial = np.array([math.cos(q_slew), math.sin(q_slew), 0.0])
    base = np.array([0.0, 0.0, params.base_height]) + params.base_radius * radial

    def planar(r, z):
        return r * radial + np.array([0.0, 0.0, z])

    elbow_r = params.base_radius + params.boom_length * math.cos(q_boom)
    elbow_z = params.base_height + params.boom_length * math.sin(q_boom)
    att_r, att_z = mch._arm_plane(state, params)

    spheres = []
    link_radius = 0.6 + link_inflation
    for a, b in ((base, planar(elbow_r, elbow_z)),
                 (planar(elbow_r, elbow_z), planar(att_r, att_z))):
        for t in np.linspace(0.0, 1.0, spheres_per_link):
            spheres.append(SphereProxy(a + t * (b - a), link_radius))
    gripper_center = planar(att_r, att_z - mch.hang_depth(params) / 2)
    gripper_radius = mch.hang_depth(params) / 2 + 0.5 + gripper_inflation
    spheres.append(SphereProxy(gripper_center, gripper_radius))
    return spheres


def _spheres_hit(vmap: VoxelMap, centers: np.ndarray, radii: np.ndarray,
                 exact: bool) -> bool:
    """Vectorized sphere-set vs occupied-voxel test over the whole map."""
    vox = vmap.centers()
    if len(vox) == 0:
        return False
    diff = np.abs(centers[:, None, :] - vox[None, :, :])
    if exact:
        gap = np.maximum(diff - vmap.voxel_size / 2, 0.0)
        d2 = np.einsum("sna,sna->sn", gap, gap)
        return bool(np.any(d2 <= radii[:, None] ** 2))
    reach = radii + vmap.voxel_size * math.sqrt(3) / 2
    d2 = np.einsum("sna,sna->sn", diff, diff)
    return bool(np.any(d2 <= reach[:, None] ** 2))


def sphere_collides(vmap: VoxelMap, center, radius: float) -> bool:
    """Conservative test: any occupied voxel center within radius plus the
    voxel half-diagonal of the sphere center."""
    return _spheres_hit(vmap, np.asarray(center, float)[None, :],
                        np.array([radius]), exact=False)


def sphere_intersects(vmap: VoxelMap, center, radius: float) -> bool:
    """Exact test: sphere overlaps the axis-aligned box of an occupied voxel.

    Unlike sphere_collides this adds no conservative margin, so it suits
    auditing executed trajectories rather than planning."""
    return _spheres_hit(vmap, np.asarray(center, float)[None, :],
                        np.array([radius]), exact=True)


def config_collides(config, vmap: VoxelMap, params: mch.MachineParams,
                    gripper_inflation: float = GRIPPER_INFLATION_DEFAULT,
                    check_limits: bool = True, exact: bool = False,
                    link_inflation: float = 0.0) -> bool:
    """True iff any body-proxy sphere intersects an occupied voxel."""
    if check_limits:
        _, qb, qs = config
        if not (params.boom_limits[0] - 1e-9 <= qb <= params.boom_limits[1] + 1e-9):
            raise JointLimitError(f"boom angle {qb} outside limits")
        if not (params.stick_limits[0] - 1e-9 <= qs <= params.stick_limits[1] + 1e-9):
            raise JointLimitError(f"stick angle {qs} outside limits")
    if len(vmap) == 0:
        return False
    spheres = body_proxy_spheres(config, params, gripper_inflation,
                                 link_inflation=link_inflation)
    centers = np.array([sp.center for sp in spheres])
    radii = np.array([sp.radius for sp in spheres])
    return _spheres_hit(vmap, centers, radii, exact)

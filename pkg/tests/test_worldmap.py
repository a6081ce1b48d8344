"""Voxel map construction, region edits, and the body-proxy collision tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bulksim import machine as mch
from bulksim import worldmap as wm


PARAMS = mch.MachineParams()


def test_ingest_points_idempotent():
    pts = [(0.1, 0.1, 0.1), (0.2, 0.2, 0.2), (0.4, 0.3, 0.1)]
    vmap = wm.ingest_points(pts, voxel_size=0.5)
    assert len(vmap) == 1
    again = wm.ingest_points(pts * 3, voxel_size=0.5)
    assert again.occupied_indices() == vmap.occupied_indices()


def test_index_center_roundtrip(rng):
    vmap = wm.VoxelMap(0.5, origin=(1.0, -2.0, 0.0))
    for _ in range(50):
        p = rng.uniform(-10, 10, 3)
        idx = vmap.index_of(p)
        c = vmap.voxel_center(idx)
        assert vmap.index_of(c) == idx
        assert np.all(np.abs(c - p) <= 0.25 + 1e-12)


def test_centers_cache_tracks_insertions():
    vmap = wm.VoxelMap(0.5)
    assert len(vmap.centers()) == 0
    vmap.insert_point((0.1, 0.1, 0.1))
    assert len(vmap.centers()) == 1
    vmap.insert_point((3.0, 0.0, 0.0))
    cs = vmap.centers()
    assert len(cs) == 2
    assert np.allclose(sorted(cs[:, 0]), [0.25, 3.25])


def test_box_volume_and_contains():
    box = wm.Box((0, 0, 0), (2, 3, 4))
    assert box.volume == 24
    assert box.contains((1, 1, 1)) and not box.contains((2.1, 1, 1))
    assert wm.Box((0, 0, 0), (-1, 1, 1)).volume == 0.0


def test_insert_virtual_obstacle_fills_box():
    vmap = wm.VoxelMap(0.5)
    out = wm.insert_virtual_obstacle(vmap, wm.Box((0, 0, 0), (1, 1, 1)))
    assert len(out) == 8  # 2x2x2 voxels of size 0.5
    assert len(vmap) == 0  # pure update


def test_mask_region_removes_centers_inside():
    vmap = wm.insert_virtual_obstacle(wm.VoxelMap(0.5),
                                      wm.Box((0, 0, 0), (2, 2, 1)))
    n = len(vmap)
    out = wm.mask_region(vmap, wm.Box((0, 0, 0), (1, 1, 1)))
    assert len(out) == n - 8
    for idx in out.occupied_indices():
        assert not wm.Box((0, 0, 0), (1, 1, 1)).contains(out.voxel_center(idx))


def test_voxelize_heightfield_column_count():
    from bulksim import soilfield as sf
    f = sf.HeightField(np.full((4, 4), 1.6), 0.5, 0.5)
    vmap = wm.voxelize_heightfield(f, voxel_size=0.5)
    # columns at z = 0.25, 0.75, 1.25 under a 1.6 m surface
    assert len(vmap) == 4 * 4 * 3


def test_sphere_exact_vs_conservative_geometry():
    vmap = wm.VoxelMap(0.5)
    vmap.insert_point((0.25, 0.25, 0.25))  # voxel box [0, 0.5]^3
    # sphere just touching the +x face
    assert wm.sphere_intersects(vmap, (0.8, 0.25, 0.25), 0.301)
    assert not wm.sphere_intersects(vmap, (0.8, 0.25, 0.25), 0.299)
    # corner case: diagonal distance to (0.5, 0.5, 0.5)
    d = math.sqrt(3 * 0.3 ** 2)
    assert wm.sphere_intersects(vmap, (0.8, 0.8, 0.8), d + 1e-6)
    assert not wm.sphere_intersects(vmap, (0.8, 0.8, 0.8), d - 1e-6)


@settings(max_examples=200, deadline=None)
@given(cx=st.floats(-2, 2), cy=st.floats(-2, 2), cz=st.floats(-2, 2),
       r=st.floats(0.05, 1.5))
def test_conservative_test_covers_exact(cx, cy, cz, r):
    vmap = wm.VoxelMap(0.5)
    vmap.insert_point((0.25, 0.25, 0.25))
    if wm.sphere_intersects(vmap, (cx, cy, cz), r):
        assert wm.sphere_collides(vmap, (cx, cy, cz), r)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_adding_voxels_never_clears_collision(seed):
    rng = np.random.default_rng(seed)
    vmap = wm.VoxelMap(0.5)
    for _ in range(30):
        vmap.insert_point(rng.uniform(-12, 12, 3))
    cfg = (rng.uniform(-math.pi, math.pi),
           rng.uniform(*PARAMS.boom_limits),
           rng.uniform(*PARAMS.stick_limits))
    before = wm.config_collides(cfg, vmap, PARAMS, check_limits=False)
    bigger = vmap.copy()
    for _ in range(30):
        bigger.insert_point(rng.uniform(-12, 12, 3))
    after = wm.config_collides(cfg, bigger, PARAMS, check_limits=False)
    if before:
        assert after


def test_config_collides_empty_map_is_free():
    assert not wm.config_collides((0.0, 0.3, -0.9), wm.VoxelMap(0.5), PARAMS)


def test_config_collides_limit_check():
    vmap = wm.VoxelMap(0.5)
    with pytest.raises(wm.JointLimitError):
        wm.config_collides((0.0, 2.0, -0.9), vmap, PARAMS)
    with pytest.raises(wm.JointLimitError):
        wm.config_collides((0.0, 0.3, 0.5), vmap, PARAMS)
    # same configs pass with the check disabled
    assert not wm.config_collides((0.0, 2.0, -0.9), vmap, PARAMS,
                                  check_limits=False)


def test_config_collides_detects_wall_in_reach():
    # wall straddling the arm along +x at gripper height
    vmap = wm.insert_virtual_obstacle(
        wm.VoxelMap(0.5), wm.Box((9.0, -1.0, 0.0), (10.0, 1.0, 6.0)))
    hit = wm.config_collides((0.0, 0.3, -0.9), vmap, PARAMS,
                             check_limits=False)
    assert hit
    # rotated 90 degrees away, the same pose is free
    free = wm.config_collides((math.pi / 2, 0.3, -0.9), vmap, PARAMS,
                              check_limits=False)
    assert not free


def test_body_proxy_inflations_grow_radii():
    base = wm.body_proxy_spheres((0.0, 0.3, -0.9), PARAMS)
    fat = wm.body_proxy_spheres((0.0, 0.3, -0.9), PARAMS,
                                gripper_inflation=1.5, link_inflation=1.0)
    assert len(base) == len(fat) == 9  # 4 per link + gripper ball
    assert fat[-1].radius == pytest.approx(base[-1].radius + 1.0)
    assert fat[0].radius == pytest.approx(base[0].radius + 1.0)


def test_load_points_rejects_wrong_columns(tmp_path):
    path = tmp_path / "pts.txt"
    path.write_text("1 2\n3 4\n")
    with pytest.raises(ValueError):
        wm.load_points(path)
    good = tmp_path / "good.txt"
    good.write_text("1 2 3\n4 5 6\n")
    assert wm.load_points(good).shape == (2, 3)

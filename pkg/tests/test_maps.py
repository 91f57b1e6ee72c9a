import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarcam.errors import EmptyCloud
from lidarcam.geometry import image_coords, preset_grid, spherical_cells
from lidarcam.maps import (
    SyncedMaps,
    build_synced_maps,
    dump_maps,
    load_maps,
    occupancy,
    subsample,
)

from conftest import SIMPLE_CALIB, SIMPLE_IMAGE_SIZE, tiny_maps


def check_sync(maps, calib, image_size):
    """The stored uv of every valid cell must reproduce from the stored
    xyz through the calibration, and the xyz must project back into the
    cell that holds it."""
    cells = maps.valid_cells
    pts = maps.xyz[cells[:, 0], cells[:, 1]]
    uv, ok = image_coords(pts, calib, image_size)
    assert ok.all()
    err = np.abs(uv - maps.uv[cells[:, 0], cells[:, 1]]).max()
    assert err <= 1e-5
    return err


def test_build_synced_maps_basic(dense_maps):
    assert dense_maps.xyz.shape == (40, 275, 3)
    assert dense_maps.uv.shape == (40, 275, 2)
    assert dense_maps.valid.dtype == bool
    assert 0.05 < occupancy(dense_maps) < 0.9
    # invalid cells carry no stale payload
    assert np.all(dense_maps.xyz[~dense_maps.valid] == 0.0)
    assert np.all(dense_maps.uv[~dense_maps.valid] == 0.0)


def test_synced_maps_sync_contract(kitti_root, dense_maps):
    from lidarcam.geometry import DEFAULT_IMAGE_SIZE, parse_calibration
    calib = parse_calibration((kitti_root / "calib" / "000000.txt").read_text())
    check_sync(dense_maps, calib, DEFAULT_IMAGE_SIZE)


def test_cell_contract(dense_maps):
    """Each stored point projects into the cell that stores it."""
    cells = dense_maps.valid_cells
    pts = dense_maps.xyz[cells[:, 0], cells[:, 1]]
    ui, vi, ok = spherical_cells(pts, dense_maps.grid)
    assert ok.all()
    assert np.array_equal(vi, cells[:, 0])
    assert np.array_equal(ui, cells[:, 1])


def test_collision_keeps_nearest():
    grid = preset_grid("37x180")
    direction = np.array([1.0, 0.02, -0.05])
    direction /= np.linalg.norm(direction)
    pts = np.stack([direction * 30.0, direction * 10.0, direction * 20.0])
    refl = np.array([[0.1], [0.2], [0.3]])
    cloud = np.concatenate([pts, refl], axis=1)
    maps = build_synced_maps(cloud, SIMPLE_CALIB, grid, SIMPLE_IMAGE_SIZE)
    assert maps.valid.sum() == 1
    r, c = np.argwhere(maps.valid)[0]
    assert np.allclose(maps.xyz[r, c], direction * 10.0)
    assert maps.refl[r, c] == pytest.approx(0.2)


def test_collision_tie_prefers_earlier_point():
    """Two points with bit-identical coordinates are a true range tie;
    the earlier input row must win, observable through reflectance."""
    grid = preset_grid("37x180")
    cloud = np.array([
        [15.0, 0.02, -0.45, 0.25],
        [15.0, 0.02, -0.45, 0.75],
    ])
    maps = build_synced_maps(cloud, SIMPLE_CALIB, grid, SIMPLE_IMAGE_SIZE)
    assert maps.valid.sum() == 1
    r, c = np.argwhere(maps.valid)[0]
    assert maps.refl[r, c] == pytest.approx(0.25)


def test_winner_outside_image_invalidates_cell():
    grid = preset_grid("37x180")
    # steep left direction: in the spherical window but projects far
    # outside the 320x240 simple camera
    d = np.array([0.2, 1.0, -0.1])
    d /= np.linalg.norm(d)
    pts = np.stack([d * 20.0])
    uv, ok = image_coords(pts, SIMPLE_CALIB, SIMPLE_IMAGE_SIZE)
    assert not ok[0]
    maps = build_synced_maps(pts, SIMPLE_CALIB, grid, SIMPLE_IMAGE_SIZE)
    assert maps.valid.sum() == 0


def test_empty_cloud_raises():
    grid = preset_grid("37x180")
    with pytest.raises(EmptyCloud):
        build_synced_maps(np.empty((0, 4)), SIMPLE_CALIB, grid, SIMPLE_IMAGE_SIZE)


def test_valid_cells_row_major(dense_maps):
    cells = dense_maps.valid_cells
    flat = cells[:, 0] * dense_maps.width + cells[:, 1]
    assert np.all(np.diff(flat) > 0)


def test_row_index_inverts_valid_cells(dense_maps):
    cells = dense_maps.valid_cells
    rows = dense_maps.row_index[cells[:, 0], cells[:, 1]]
    assert np.array_equal(rows, np.arange(len(cells)))
    assert np.all(dense_maps.row_index[~dense_maps.valid] == -1)


# ------------------------------------------------------------- subsample

def test_subsample_extents_and_content(dense_maps):
    sub = subsample(dense_maps, 2, 2)
    assert sub.height == (dense_maps.height + 1) // 2
    assert sub.width == (dense_maps.width + 1) // 2
    assert np.array_equal(sub.valid, dense_maps.valid[::2, ::2])
    assert np.array_equal(sub.xyz, dense_maps.xyz[::2, ::2])
    assert np.array_equal(sub.uv, dense_maps.uv[::2, ::2])
    assert sub.grid.delta_theta == pytest.approx(dense_maps.grid.delta_theta * 2)
    assert sub.grid.delta_phi == pytest.approx(dense_maps.grid.delta_phi * 2)
    assert sub.grid.theta_origin == dense_maps.grid.theta_origin
    assert sub.grid.phi_origin == dense_maps.grid.phi_origin


def test_subsample_chain_keeps_sync(kitti_root, dense_maps):
    from lidarcam.geometry import DEFAULT_IMAGE_SIZE, parse_calibration
    calib = parse_calibration((kitti_root / "calib" / "000000.txt").read_text())
    maps = dense_maps
    for _ in range(4):
        maps = subsample(maps, 2, 2)
        if maps.valid.any():
            check_sync(maps, calib, DEFAULT_IMAGE_SIZE)


@settings(max_examples=30, deadline=None)
@given(rs=st.integers(1, 4), cs=st.integers(1, 4))
def test_subsample_strides_property(rs, cs):
    maps = tiny_maps(seed=9, height=11, width=13)
    sub = subsample(maps, rs, cs)
    assert sub.height == -(-maps.height // rs)
    assert sub.width == -(-maps.width // cs)
    assert np.array_equal(sub.valid, maps.valid[::rs, ::cs])


# ---------------------------------------------------------------- dumps

def test_dump_load_round_trip(tmp_path, dense_maps):
    path = tmp_path / "frame.ffpm"
    dump_maps(dense_maps, path)
    assert (tmp_path / "frame.ffpm.txt").exists()
    back = load_maps(path)
    assert (back.height, back.width) == (dense_maps.height, dense_maps.width)
    assert np.array_equal(back.valid, dense_maps.valid)
    # payload is stored in float32
    assert np.array_equal(back.xyz, dense_maps.xyz.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.uv, dense_maps.uv.astype(np.float32).astype(np.float64))
    assert back.grid.delta_theta == pytest.approx(dense_maps.grid.delta_theta, rel=0, abs=0)


def test_dump_rejects_bad_magic(tmp_path, dense_maps):
    path = tmp_path / "frame.ffpm"
    dump_maps(dense_maps, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        load_maps(path)


def test_dump_bytes_are_deterministic(tmp_path, dense_maps):
    a = tmp_path / "a.ffpm"
    b = tmp_path / "b.ffpm"
    dump_maps(dense_maps, a)
    dump_maps(dense_maps, b)
    assert a.read_bytes() == b.read_bytes()


def test_synced_maps_rejects_mismatched_grid():
    maps = tiny_maps()
    wrong = preset_grid("40x275")
    with pytest.raises(Exception):
        SyncedMaps(xyz=maps.xyz, uv=maps.uv, valid=maps.valid, grid=wrong)

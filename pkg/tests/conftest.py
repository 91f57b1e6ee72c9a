import numpy as np
import pytest

from lidarcam import synthetic
from lidarcam.geometry import CalibrationSet, SphericalGrid
from lidarcam.maps import build_synced_maps
from lidarcam.pipeline import PipelineConfig


@pytest.fixture(scope="session")
def kitti_root(tmp_path_factory):
    """Five full-size KITTI-format frames."""
    root = tmp_path_factory.mktemp("kitti")
    for i in range(5):
        synthetic.write_frame(root, f"{i:06d}", seed=i)
    return root


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """Two quick frames with quarter-scale images for fusion tests."""
    root = tmp_path_factory.mktemp("kitti_small")
    for i in range(2):
        synthetic.write_frame(
            root, f"{i:06d}", seed=10 + i,
            image_scale=0.25, n_azimuth=150, n_beams=32,
        )
    return root


@pytest.fixture(scope="session")
def small_cfg():
    return PipelineConfig(preset="37x180", fusion="none", image_size=(320, 96))


# An easy-to-reason-about calibration: camera sits at the sensor origin
# looking along +x, so a point (r, 0, 0) lands at the principal point.
SIMPLE_CALIB = CalibrationSet(
    cam_projection=np.array([
        [100.0, 0.0, 160.0, 0.0],
        [0.0, 100.0, 120.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ]),
    rectification=np.eye(3),
    lidar_to_cam=np.array([
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
    ]),
)

SIMPLE_IMAGE_SIZE = (320, 240)


@pytest.fixture
def simple_calib():
    return SIMPLE_CALIB


@pytest.fixture(scope="session")
def dense_maps(kitti_root):
    """Synchronized maps of frame 0 at the middle preset."""
    from lidarcam.geometry import (
        DEFAULT_CROP, DEFAULT_IMAGE_SIZE, crop_points, parse_calibration,
        preset_grid, read_velodyne,
    )
    calib = parse_calibration((kitti_root / "calib" / "000000.txt").read_text())
    points = crop_points(read_velodyne(kitti_root / "velodyne" / "000000.bin"), DEFAULT_CROP)
    return build_synced_maps(points, calib, preset_grid("40x275"), DEFAULT_IMAGE_SIZE)


def tiny_maps(seed=5, height=8, width=10, fill=0.7):
    """Small handmade synchronized maps for exact-oracle tests.

    Points sit near the cell directions at varied ranges so windowed
    searches see real distance structure; invalid holes are scattered by
    the seed.  Cell/uv consistency with a real calibration is not needed
    here, only the array contract.
    """
    rng = np.random.default_rng(seed)
    grid = SphericalGrid.from_window(height, width)
    valid = rng.random((height, width)) < fill
    theta = grid.theta_origin + (np.arange(width) + 0.5) * grid.delta_theta
    phi = grid.phi_origin + (np.arange(height) + 0.5) * grid.delta_phi
    rr = rng.uniform(2.0, 30.0, (height, width))
    tt, pp = np.meshgrid(theta, phi)
    xyz = np.stack([
        rr * np.cos(pp) * np.cos(tt),
        rr * np.cos(pp) * np.sin(tt),
        rr * np.sin(pp),
    ], axis=2)
    xyz[~valid] = 0.0
    uv = np.zeros((height, width, 2))
    uv[..., 0] = np.clip(160 + 300 * np.tan(tt), 0, 1200)
    uv[..., 1] = np.clip(180 - 300 * np.tan(pp), 0, 370)
    uv[~valid] = 0.0
    from lidarcam.maps import SyncedMaps
    return SyncedMaps(xyz=xyz, uv=uv, valid=valid, grid=grid)

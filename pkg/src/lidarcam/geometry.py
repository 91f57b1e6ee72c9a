"""Calibration handling and the two LiDAR projections.

Coordinate conventions follow KITTI: the LiDAR frame is x forward, y left,
z up; image coordinates are (u, v) = (column, row) pixels with the origin
at the top-left corner of the padded image.

Two projections are provided.  The spherical one maps a 3D return onto an
ordered H x W grid using azimuth atan2(y, x) and elevation
asin(z / ||p||); the perspective one maps a return into camera-2 pixel
space through the composed calibration matrix.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CalibrationError,
    MalformedNumber,
    MissingKey,
    VelodyneFormatError,
    ZeroNormPoint,
)

__all__ = [
    "DEFAULT_IMAGE_SIZE",
    "DEFAULT_CROP",
    "PRESET_NAMES",
    "CropBox",
    "SphericalGrid",
    "CalibrationSet",
    "parse_calibration",
    "serialize_calibration",
    "read_velodyne",
    "crop_points",
    "preset_grid",
    "project_spherical",
    "spherical_cells",
    "project_to_image",
    "image_coords",
]

# Padded image extents as (width, height).
DEFAULT_IMAGE_SIZE = (1280, 384)

# Angular window shared by all grid presets.  Azimuth spans the forward
# hemisphere implied by the x >= 0 crop; elevation covers crop-box returns
# beyond roughly 2 m range (the literal elevation extremes of the crop box
# degenerate to +/- pi/2 at the origin, which would waste nearly every row).
AZIMUTH_WINDOW = (-math.pi / 2.0, math.pi / 2.0)
ELEVATION_WINDOW = (math.radians(-25.0), math.radians(3.0))

PRESET_NAMES = ("37x180", "40x275", "46x420")

_CALIB_SHAPES = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}
_TOKEN_RE = re.compile(r"\S+")


@dataclass(frozen=True)
class CropBox:
    """Axis-aligned keep-volume in the LiDAR frame, bounds inclusive."""

    x: tuple[float, float] = (0.0, 70.4)
    y: tuple[float, float] = (-40.0, 40.0)
    z: tuple[float, float] = (-1.0, 3.0)

    def mask(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (
            (p[:, 0] >= self.x[0]) & (p[:, 0] <= self.x[1])
            & (p[:, 1] >= self.y[0]) & (p[:, 1] <= self.y[1])
            & (p[:, 2] >= self.z[0]) & (p[:, 2] <= self.z[1])
        )

    def contains(self, point) -> bool:
        return bool(self.mask(np.asarray(point, dtype=np.float64).reshape(1, -1))[0])


DEFAULT_CROP = CropBox()


def crop_points(points: np.ndarray, box: CropBox = DEFAULT_CROP) -> np.ndarray:
    """Filter an (N, 3) or (N, 4) array to the crop box, preserving order."""
    points = np.asarray(points, dtype=np.float64)
    return points[box.mask(points)]


@dataclass(frozen=True)
class SphericalGrid:
    """Discretization of the spherical projection.

    ``theta_origin``/``phi_origin`` are the angles of the lower edge of
    column 0 and row 0; a return lands in column
    floor((azimuth - theta_origin) / delta_theta) and the analogous row.
    Row 0 therefore holds the lowest elevations.
    """

    height: int
    width: int
    delta_theta: float
    delta_phi: float
    theta_origin: float
    phi_origin: float

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid extents must be positive")
        if not (self.delta_theta > 0.0 and self.delta_phi > 0.0):
            raise ValueError("grid cell sizes must be positive")

    @classmethod
    def from_window(
        cls,
        height: int,
        width: int,
        azimuth: tuple[float, float] = AZIMUTH_WINDOW,
        elevation: tuple[float, float] = ELEVATION_WINDOW,
    ) -> "SphericalGrid":
        return cls(
            height=height,
            width=width,
            delta_theta=(azimuth[1] - azimuth[0]) / width,
            delta_phi=(elevation[1] - elevation[0]) / height,
            theta_origin=azimuth[0],
            phi_origin=elevation[0],
        )

    @property
    def cells(self) -> int:
        return self.height * self.width


def preset_grid(name: str) -> SphericalGrid:
    """Build a grid from an "HxW" preset name, e.g. ``40x275``.

    The three standard presets are 37x180, 40x275 and 46x420; any other
    positive HxW pair is accepted and uses the same angular window.
    """
    m = re.fullmatch(r"(\d+)x(\d+)", name.strip().lower())
    if m is None:
        raise ValueError(f"preset must look like '40x275', got {name!r}")
    return SphericalGrid.from_window(int(m.group(1)), int(m.group(2)))


@dataclass(frozen=True)
class CalibrationSet:
    """Camera-2 projection, rectification and LiDAR extrinsics plus their
    composition into a single 3x4 LiDAR-to-pixel matrix."""

    cam_projection: np.ndarray
    rectification: np.ndarray
    lidar_to_cam: np.ndarray
    composed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = np.array(self.cam_projection, dtype=np.float64)
        r = np.array(self.rectification, dtype=np.float64)
        t = np.array(self.lidar_to_cam, dtype=np.float64)
        if p.shape != (3, 4) or r.shape != (3, 3) or t.shape != (3, 4):
            raise CalibrationError(
                f"bad calibration shapes P2={p.shape} R0_rect={r.shape} "
                f"Tr_velo_to_cam={t.shape}"
            )
        for m in (p, r, t):
            if not np.isfinite(m).all():
                raise CalibrationError("calibration matrix contains non-finite values")
        residual = float(np.abs(r.T @ r - np.eye(3)).max())
        if residual > 1e-3:
            raise CalibrationError(
                f"rectification is not orthonormal (residual {residual:.3e})"
            )
        r4 = np.eye(4)
        r4[:3, :3] = r
        t4 = np.eye(4)
        t4[:3, :4] = t
        composed = p @ r4 @ t4
        for m in (p, r, t, composed):
            m.flags.writeable = False
        object.__setattr__(self, "cam_projection", p)
        object.__setattr__(self, "rectification", r)
        object.__setattr__(self, "lidar_to_cam", t)
        object.__setattr__(self, "composed", composed)


def parse_calibration(raw_text: str) -> CalibrationSet:
    """Parse KITTI calibration text into a CalibrationSet.

    Lines look like ``P2: v0 v1 ... v11``.  Unknown keys are ignored and
    whitespace is free-form.  Raises MissingKey if P2, R0_rect or
    Tr_velo_to_cam is absent, MalformedNumber (with 1-based line and
    column) for an unparseable value or a wrong value count.
    """
    found: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(raw_text.splitlines(), start=1):
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in _CALIB_SHAPES or key in found:
            continue
        shape = _CALIB_SHAPES[key]
        base = line.index(":") + 1
        values = []
        for tok in _TOKEN_RE.finditer(rest):
            try:
                values.append(float(tok.group()))
            except ValueError:
                raise MalformedNumber(lineno, base + tok.start() + 1, tok.group()) from None
        want = shape[0] * shape[1]
        if len(values) != want:
            raise MalformedNumber(
                lineno, base + len(rest),
                f"{key} expects {want} values, found {len(values)}",
            )
        found[key] = np.array(values, dtype=np.float64).reshape(shape)
    for key in _CALIB_SHAPES:
        if key not in found:
            raise MissingKey(key)
    return CalibrationSet(found["P2"], found["R0_rect"], found["Tr_velo_to_cam"])


def serialize_calibration(calib: CalibrationSet) -> str:
    """Render the three stored matrices back to calibration text.

    Values are written with shortest round-trip precision, so
    ``parse_calibration(serialize_calibration(c))`` reproduces the matrices
    bit for bit.
    """
    def line(key: str, m: np.ndarray) -> str:
        return f"{key}: " + " ".join(repr(float(v)) for v in m.ravel())

    return "\n".join([
        line("P2", calib.cam_projection),
        line("R0_rect", calib.rectification),
        line("Tr_velo_to_cam", calib.lidar_to_cam),
    ]) + "\n"


def read_velodyne(path) -> np.ndarray:
    """Read a little-endian float32 (x, y, z, reflectance) point file.

    Returns an (N, 4) float64 array.  Raises VelodyneFormatError when the
    file size is not a multiple of 16 bytes.
    """
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise VelodyneFormatError(
            f"{path}: {raw.size * 4} bytes is not a whole number of points"
        )
    return raw.reshape(-1, 4).astype(np.float64)


def spherical_cells(points: np.ndarray, grid: SphericalGrid):
    """Vectorized spherical projection of an (N, 3) array.

    Returns (u, v, ok) where u/v are int64 column/row indices (-1 where
    rejected) and ok marks points that landed inside the grid.  Zero-norm
    rows are rejected rather than raised here; the scalar wrapper raises.
    """
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    sq = x * x + y * y + z * z
    ok = sq > 0.0
    r = np.sqrt(sq)
    azimuth = np.arctan2(y, x)
    safe_r = np.where(ok, r, 1.0)
    elevation = np.arcsin(np.clip(z / safe_r, -1.0, 1.0))
    u = np.floor((azimuth - grid.theta_origin) / grid.delta_theta)
    v = np.floor((elevation - grid.phi_origin) / grid.delta_phi)
    ok &= (u >= 0) & (u < grid.width) & (v >= 0) & (v < grid.height)
    ui = np.where(ok, u, -1.0).astype(np.int64)
    vi = np.where(ok, v, -1.0).astype(np.int64)
    return ui, vi, ok


def project_spherical(point, grid: SphericalGrid):
    """Project one 3D point onto the grid.

    Returns (u, v) cell indices or None when the point falls outside the
    grid window.  Raises ZeroNormPoint for the zero vector.
    """
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    if float(p[0, 0] ** 2 + p[0, 1] ** 2 + p[0, 2] ** 2) == 0.0:
        raise ZeroNormPoint("cannot project the zero vector")
    u, v, ok = spherical_cells(p, grid)
    if not ok[0]:
        return None
    return int(u[0]), int(v[0])


def image_coords(points: np.ndarray, calib, image_size=DEFAULT_IMAGE_SIZE):
    """Vectorized perspective projection of an (N, 3) array.

    ``calib`` may be a CalibrationSet or a raw 3x4 composed matrix.
    Returns (uv, ok): an (N, 2) float64 pixel array (zeros where rejected)
    and a validity mask.  A point is rejected when its camera depth is
    non-positive or the pixel falls outside [0, width) x [0, height).
    """
    matrix = calib.composed if isinstance(calib, CalibrationSet) else np.asarray(calib, dtype=np.float64)
    if matrix.shape != (3, 4):
        raise ValueError(f"composed matrix must be 3x4, got {matrix.shape}")
    p = np.asarray(points, dtype=np.float64)
    hom = matrix[:, :3] @ p.T + matrix[:, 3:4]
    depth = hom[2]
    ok = depth > 0.0
    safe = np.where(ok, depth, 1.0)
    u = hom[0] / safe
    v = hom[1] / safe
    width, height = image_size
    ok &= np.isfinite(u) & np.isfinite(v)
    ok &= (u >= 0.0) & (u < width) & (v >= 0.0) & (v < height)
    uv = np.stack([np.where(ok, u, 0.0), np.where(ok, v, 0.0)], axis=1)
    return uv, ok


def project_to_image(point, calib, image_size=DEFAULT_IMAGE_SIZE):
    """Project one 3D LiDAR point into pixel space.

    Returns (u, v) as floats or None when the point is behind the camera
    or lands outside the padded image bounds.
    """
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    uv, ok = image_coords(p, calib, image_size)
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])

"""Synchronized projection maps.

``build_synced_maps`` turns an unordered cropped cloud into a pair of
ordered maps on one spherical grid: an (H, W, 3) coordinate map and an
(H, W, 2) pixel-coordinate map sharing a single validity mask.  For every
valid cell, re-projecting the stored point through the composed
calibration reproduces the stored pixel coordinates; that equality is the
synchronization contract the fusion stages rely on, and it survives
stride decimation because both maps are cut by the same mask.

When several points land in one cell the smallest-range return wins, ties
going to the earliest point in input order.  A cell whose winning point
does not project into the image is invalid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import EmptyCloud
from .geometry import (
    DEFAULT_IMAGE_SIZE,
    CalibrationSet,
    SphericalGrid,
    image_coords,
    spherical_cells,
)

__all__ = [
    "SyncedMaps",
    "build_synced_maps",
    "occupancy",
    "subsample",
    "dump_maps",
    "load_maps",
    "MAPS_MAGIC",
]

MAPS_MAGIC = b"FFPM"
MAPS_VERSION = 1


@dataclass(frozen=True)
class SyncedMaps:
    """Paired point / pixel maps with a shared validity mask.

    Invalid cells hold zeros in every channel.  Arrays are read-only;
    derived maps (subsampling) are new objects.
    """

    xyz: np.ndarray
    uv: np.ndarray
    valid: np.ndarray
    grid: SphericalGrid
    refl: np.ndarray = None

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64)
        uv = np.ascontiguousarray(self.uv, dtype=np.float64)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        h, w = valid.shape
        if xyz.shape != (h, w, 3) or uv.shape != (h, w, 2):
            raise ValueError(
                f"map shapes disagree: xyz {xyz.shape}, uv {uv.shape}, mask {valid.shape}"
            )
        if (h, w) != (self.grid.height, self.grid.width):
            raise ValueError("mask extents do not match the grid descriptor")
        refl = self.refl
        if refl is None:
            refl = np.zeros((h, w), dtype=np.float64)
        refl = np.ascontiguousarray(refl, dtype=np.float64)
        if refl.shape != (h, w):
            raise ValueError(f"reflectance map has shape {refl.shape}")
        for arr in (xyz, uv, valid, refl):
            arr.flags.writeable = False
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "refl", refl)

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    @cached_property
    def valid_cells(self) -> np.ndarray:
        """(N, 2) array of valid (row, col) cells in row-major order."""
        cells = np.argwhere(self.valid).astype(np.int32)
        cells.flags.writeable = False
        return cells

    @cached_property
    def row_index(self) -> np.ndarray:
        """(H, W) map from cell to its rank among valid cells, -1 elsewhere."""
        idx = np.full((self.height, self.width), -1, dtype=np.int32)
        idx[self.valid] = np.arange(int(self.valid.sum()), dtype=np.int32)
        idx.flags.writeable = False
        return idx

    def occupancy(self) -> float:
        return occupancy(self)


def build_synced_maps(
    points: np.ndarray,
    calib: CalibrationSet,
    grid: SphericalGrid,
    image_size=DEFAULT_IMAGE_SIZE,
) -> SyncedMaps:
    """Project a cropped (N, 3) or (N, 4) cloud into synchronized maps.

    The input is expected to be cropped already; points outside the grid
    window are dropped silently.  Raises EmptyCloud for an empty input.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError(f"expected an (N, 3) or (N, 4) array, got {pts.shape}")
    if pts.shape[0] == 0:
        raise EmptyCloud("no points to project")
    xyz = pts[:, :3]
    refl = pts[:, 3] if pts.shape[1] == 4 else np.zeros(len(pts))

    u, v, ok = spherical_cells(xyz, grid)
    hit = np.flatnonzero(ok)
    h, w = grid.height, grid.width
    xyz_map = np.zeros((h, w, 3))
    uv_map = np.zeros((h, w, 2))
    refl_map = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    if hit.size:
        cell = v[hit] * w + u[hit]
        px, py, pz = xyz[hit, 0], xyz[hit, 1], xyz[hit, 2]
        rng = np.sqrt(px * px + py * py + pz * pz)
        # Smallest range wins each cell; ties resolve to input order.
        order = np.lexsort((hit, rng, cell))
        cells_sorted = cell[order]
        unique_cells, first = np.unique(cells_sorted, return_index=True)
        winners = hit[order][first]
        uv_win, img_ok = image_coords(xyz[winners], calib, image_size)
        rows = unique_cells[img_ok] // w
        cols = unique_cells[img_ok] % w
        keep = winners[img_ok]
        xyz_map[rows, cols] = xyz[keep]
        uv_map[rows, cols] = uv_win[img_ok]
        refl_map[rows, cols] = refl[keep]
        valid[rows, cols] = True
    return SyncedMaps(xyz_map, uv_map, valid, grid, refl_map)


def occupancy(maps: SyncedMaps) -> float:
    """Fraction of grid cells holding a synchronized point."""
    return float(maps.valid.mean())


def subsample(maps: SyncedMaps, row_stride: int, col_stride: int) -> SyncedMaps:
    """Decimate every map and the mask by (row_stride, col_stride).

    Offsets are zero: cell (r, c) of the result is cell
    (r * row_stride, c * col_stride) of the input.  The grid descriptor is
    rescaled so angle-to-cell lookups stay consistent.
    """
    if row_stride < 1 or col_stride < 1:
        raise ValueError("strides must be at least 1")
    g = maps.grid
    new_grid = SphericalGrid(
        height=-(-g.height // row_stride),
        width=-(-g.width // col_stride),
        delta_theta=g.delta_theta * col_stride,
        delta_phi=g.delta_phi * row_stride,
        theta_origin=g.theta_origin,
        phi_origin=g.phi_origin,
    )
    return SyncedMaps(
        maps.xyz[::row_stride, ::col_stride].copy(),
        maps.uv[::row_stride, ::col_stride].copy(),
        maps.valid[::row_stride, ::col_stride].copy(),
        new_grid,
        maps.refl[::row_stride, ::col_stride].copy(),
    )


def _write_grid_sidecar(path: Path, maps: SyncedMaps) -> None:
    g = maps.grid
    lines = [
        f"height = {g.height}",
        f"width = {g.width}",
        f"delta_theta = {g.delta_theta!r}",
        f"delta_phi = {g.delta_phi!r}",
        f"theta_origin = {g.theta_origin!r}",
        f"phi_origin = {g.phi_origin!r}",
        f"occupancy = {occupancy(maps)!r}",
    ]
    path.write_text("\n".join(lines) + "\n")


def _read_grid_sidecar(path: Path) -> SphericalGrid:
    fields = {}
    for line in path.read_text().splitlines():
        if "=" not in line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return SphericalGrid(
        height=int(fields["height"]),
        width=int(fields["width"]),
        delta_theta=float(fields["delta_theta"]),
        delta_phi=float(fields["delta_phi"]),
        theta_origin=float(fields["theta_origin"]),
        phi_origin=float(fields["phi_origin"]),
    )


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".txt")


def dump_maps(maps: SyncedMaps, path) -> None:
    """Write maps to the flat binary container plus a text side-car.

    Layout: magic ``FFPM``, u32 version, u32 height, u32 width, xyz as
    row-major little-endian float32, uv likewise, then the mask as bytes.
    The side-car (same name with ``.txt`` appended) records the grid.
    """
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAPS_MAGIC)
        f.write(struct.pack("<III", MAPS_VERSION, maps.height, maps.width))
        f.write(np.ascontiguousarray(maps.xyz, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(maps.uv, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(maps.valid, dtype=np.uint8).tobytes())
    _write_grid_sidecar(sidecar_path(path), maps)


def load_maps(path) -> SyncedMaps:
    """Read a container written by dump_maps.  Reflectance is not stored
    in the container and comes back as zeros."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAPS_MAGIC:
        raise ValueError(f"{path}: not a maps container")
    version, h, w = struct.unpack_from("<III", blob, 4)
    if version != MAPS_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    offset = 16
    def take(count):
        nonlocal offset
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        return arr
    xyz = take(h * w * 3).reshape(h, w, 3).astype(np.float64)
    uv = take(h * w * 2).reshape(h, w, 2).astype(np.float64)
    valid = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=offset)
    offset += h * w
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    grid = _read_grid_sidecar(sidecar_path(path))
    return SyncedMaps(xyz, uv, valid.reshape(h, w).astype(bool), grid)

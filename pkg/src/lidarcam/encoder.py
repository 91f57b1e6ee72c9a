"""Stride-based point encoder over synchronized maps.

Sampling picks the valid cells at stride-aligned grid positions, so the
set of centers is exactly the set of cells that survive the level's map
decimation.  Grouping is a windowed k-nearest-neighbor search: candidates
are the valid cells inside a kh x kw window around the center, filtered
by a 3D range cutoff, ordered by Euclidean distance with ties broken by
row-major cell order, truncated to K and padded by repeating the nearest
survivor.  The center itself is always a candidate at distance zero, so
the survivor set is never empty.

Per-level aggregation lifts each neighbor offset through a small dense
layer, concatenates it with the neighbor and center features, applies the
level's shared dense layer plus ReLU and max-pools over the K neighbors.
The decoder walks the pyramid back up: features are interpolated at the
finer level's points from the 3 nearest coarse points with normalized
inverse-distance weights, concatenated with the finer level's own
features and mixed by a dense layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch
from .maps import SyncedMaps, _read_grid_sidecar, _write_grid_sidecar, sidecar_path, subsample
from .params import Dense, dense_shapes
from .util import relu, run_chunked

__all__ = [
    "KernelSpec",
    "LevelState",
    "LevelParams",
    "DEFAULT_KERNELS",
    "POINT_WIDTHS",
    "OFFSET_WIDTH",
    "sample_centers",
    "knn_in_kernel",
    "neighbor_table",
    "bootstrap_state",
    "aggregate_neighbors",
    "encode_level",
    "three_nn_weights",
    "interpolate_features",
    "decode_to_full",
    "dump_level",
    "load_level",
]

# Feature widths produced by levels 1..4; level 0 is the bootstrap lift.
POINT_WIDTHS = (128, 256, 512, 1024)
BOOTSTRAP_WIDTH = 128
OFFSET_WIDTH = 32

LEVEL_MAGIC = b"FFPL"
LEVEL_VERSION = 1

ENCODE_CHUNK = 512
INTERP_CHUNK = 2048


@dataclass(frozen=True)
class KernelSpec:
    """Search window, strides, neighbor count and range cutoff for a level."""

    kh: int
    kw: int
    stride_h: int = 2
    stride_w: int = 2
    k: int = 16
    range_r: float = 1.0

    def __post_init__(self):
        if self.kh < 1 or self.kw < 1 or self.kh % 2 == 0 or self.kw % 2 == 0:
            raise ValueError(f"kernel extents must be odd and positive, got {self.kh}x{self.kw}")
        if self.stride_h < 1 or self.stride_w < 1:
            raise ValueError("strides must be at least 1")
        if self.k < 1:
            raise ValueError("neighbor count must be at least 1")
        if not self.range_r > 0.0:
            raise ValueError("range cutoff must be positive")


DEFAULT_KERNELS = (
    KernelSpec(9, 13, 2, 2, 16, 0.5),
    KernelSpec(9, 13, 2, 2, 16, 1.0),
    KernelSpec(9, 5, 2, 2, 16, 2.0),
    KernelSpec(9, 5, 2, 2, 16, 4.0),
)


@dataclass(frozen=True)
class LevelState:
    """Maps at one pyramid level plus per-valid-cell features.

    Feature rows follow row-major order over the valid cells, and
    ``center_index`` records each row's (row, col) cell in these maps.
    """

    maps: SyncedMaps
    features: np.ndarray
    center_index: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        cells = np.ascontiguousarray(self.center_index, dtype=np.int32)
        n_valid = int(self.maps.valid.sum())
        if feats.ndim != 2 or feats.shape[0] != n_valid:
            raise DimensionMismatch(
                f"feature rows ({feats.shape}) must match valid cells ({n_valid})"
            )
        if cells.shape != (n_valid, 2):
            raise DimensionMismatch(f"center index has shape {cells.shape}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "center_index", cells)

    @property
    def width(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class LevelParams:
    """Dense layers of one encoder level: the offset lift and the shared mix."""

    offset_fc: Dense
    mix: Dense

    def __post_init__(self):
        if self.offset_fc.in_width != 3:
            raise DimensionMismatch("offset layer must take 3D offsets")

    @classmethod
    def from_bank(cls, bank: Mapping[str, np.ndarray], prefix: str) -> "LevelParams":
        return cls(Dense.from_bank(bank, f"{prefix}.off"), Dense.from_bank(bank, f"{prefix}.mix"))

    @staticmethod
    def shapes(prefix: str, in_width: int, out_width: int, offset_width: int = OFFSET_WIDTH):
        shapes = dense_shapes(f"{prefix}.off", 3, offset_width)
        shapes.update(dense_shapes(f"{prefix}.mix", offset_width + 2 * in_width, out_width))
        return shapes


def sample_centers(maps: SyncedMaps, spec: KernelSpec) -> np.ndarray:
    """Valid cells at stride-aligned positions, row-major, as (N, 2) int32."""
    rows = np.arange(0, maps.height, spec.stride_h)
    cols = np.arange(0, maps.width, spec.stride_w)
    rr, cc = np.nonzero(maps.valid[np.ix_(rows, cols)])
    return np.stack([rows[rr], cols[cc]], axis=1).astype(np.int32)


def neighbor_table(
    maps: SyncedMaps,
    centers: np.ndarray,
    count: int,
    window: tuple[int, int],
    metric: str = "xyz",
    max_range: float = None,
    chunk: int = 1024,
) -> np.ndarray:
    """Windowed KNN for a batch of valid center cells.

    Returns an (N, count) int32 array of indices into the row-major valid
    cell ordering (``maps.valid_cells``).  ``metric`` selects 3D point
    distance ("xyz") or 2D pixel distance ("uv"); ``max_range`` applies a
    cutoff on that distance.  Rows with fewer than ``count`` survivors are
    padded by repeating the nearest survivor.
    """
    if metric not in ("xyz", "uv"):
        raise ValueError(f"unknown metric {metric!r}")
    kh, kw = window
    h, w = maps.height, maps.width
    offs_r = np.repeat(np.arange(kh) - kh // 2, kw)
    offs_c = np.tile(np.arange(kw) - kw // 2, kh)
    coords = maps.xyz if metric == "xyz" else maps.uv
    row_index = maps.row_index
    centers = np.asarray(centers, dtype=np.int64)
    n = len(centers)
    out = np.empty((n, count), dtype=np.int32)
    slots = np.arange(count)
    for beg in range(0, n, chunk):
        cen = centers[beg:beg + chunk]
        rr = cen[:, 0:1] + offs_r[None, :]
        cc = cen[:, 1:2] + offs_c[None, :]
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rrc = np.clip(rr, 0, h - 1)
        ccc = np.clip(cc, 0, w - 1)
        cand = inside & maps.valid[rrc, ccc]
        gathered = coords[rrc, ccc]
        center_coords = coords[cen[:, 0], cen[:, 1]][:, None, :]
        delta = gathered - center_coords
        d2 = delta[..., 0] * delta[..., 0] + delta[..., 1] * delta[..., 1]
        if delta.shape[-1] == 3:
            d2 = d2 + delta[..., 2] * delta[..., 2]
        dist = np.sqrt(d2)
        if max_range is not None:
            cand &= dist <= max_range
        dist = np.where(cand, dist, np.inf)
        # Stable sort on distance; the window slots enumerate cells in
        # row-major order, which is exactly the tie-break rule.
        order = np.argsort(dist, axis=1, kind="stable")[:, :count]
        survivors = cand.sum(axis=1)
        pad = slots[None, :] >= survivors[:, None]
        order = np.where(pad, order[:, 0:1], order)
        sel_r = np.take_along_axis(rrc, order, axis=1)
        sel_c = np.take_along_axis(ccc, order, axis=1)
        out[beg:beg + chunk] = row_index[sel_r, sel_c]
    return out


def knn_in_kernel(maps: SyncedMaps, center: tuple[int, int], spec: KernelSpec) -> list[tuple[int, int]]:
    """Neighbor cells of one valid center under the kernel's window rules.

    Returns exactly ``spec.k`` (row, col) tuples, with the nearest
    survivor repeated when fewer survive the cutoff.
    """
    r, c = int(center[0]), int(center[1])
    if not maps.valid[r, c]:
        raise ValueError(f"center cell ({r}, {c}) is not valid")
    rows = neighbor_table(
        maps, np.array([[r, c]]), spec.k, (spec.kh, spec.kw),
        metric="xyz", max_range=spec.range_r,
    )[0]
    cells = maps.valid_cells[rows]
    return [(int(a), int(b)) for a, b in cells]


def bootstrap_state(maps: SyncedMaps, lift: Dense) -> LevelState:
    """Full-resolution level state with (x, y, z, reflectance) lifted by a
    dense layer to the bootstrap width."""
    cells = maps.valid_cells
    xyz = maps.xyz[cells[:, 0], cells[:, 1]]
    refl = maps.refl[cells[:, 0], cells[:, 1]]
    raw = np.concatenate([xyz, refl[:, None]], axis=1)
    return LevelState(maps, lift(raw), cells)


def aggregate_neighbors(
    offsets: np.ndarray,
    neighbor_feats: np.ndarray,
    center_feat: np.ndarray,
    level: LevelParams,
) -> np.ndarray:
    """Aggregate one center: lift offsets, concatenate neighbor and center
    features, apply the shared dense layer + ReLU, max-pool over neighbors.

    The result is invariant to the ordering of the neighbor rows.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    neighbor_feats = np.asarray(neighbor_feats, dtype=np.float64)
    center_feat = np.asarray(center_feat, dtype=np.float64)
    k = offsets.shape[0]
    if neighbor_feats.shape[0] != k:
        raise DimensionMismatch("offsets and neighbor features disagree on K")
    lifted = relu(level.offset_fc(offsets))
    stacked = np.concatenate(
        [lifted, neighbor_feats, np.broadcast_to(center_feat, (k, center_feat.shape[-1]))],
        axis=1,
    )
    return relu(level.mix(stacked)).max(axis=0)


def encode_level(
    state: LevelState,
    spec: KernelSpec,
    level: LevelParams,
    workers: int = 0,
) -> LevelState:
    """Run one encoder level and return the state at the next resolution.

    Output feature rows are the stride-aligned valid centers of the input
    maps; the output maps are the input maps decimated by the level's
    strides, so both views stay aligned cell for cell.
    """
    maps_in = state.maps
    if level.mix.in_width != level.offset_fc.out_width + 2 * state.width:
        raise DimensionMismatch(
            f"mix layer takes {level.mix.in_width}, level provides "
            f"{level.offset_fc.out_width + 2 * state.width}"
        )
    centers = sample_centers(maps_in, spec)
    table = neighbor_table(
        maps_in, centers, spec.k, (spec.kh, spec.kw),
        metric="xyz", max_range=spec.range_r,
    )
    cells = maps_in.valid_cells
    xyz = maps_in.xyz[cells[:, 0], cells[:, 1]]
    feats = state.features
    center_rows = maps_in.row_index[centers[:, 0], centers[:, 1]]
    n = len(centers)
    out = np.empty((n, level.mix.out_width))

    def work(beg: int) -> None:
        end = min(beg + ENCODE_CHUNK, n)
        nb = table[beg:end]
        cr = center_rows[beg:end]
        offs = xyz[nb] - xyz[cr][:, None, :]
        lifted = relu(offs @ level.offset_fc.w + level.offset_fc.b)
        span = nb.shape[0], nb.shape[1], feats.shape[1]
        stacked = np.concatenate(
            [lifted, feats[nb], np.broadcast_to(feats[cr][:, None, :], span)],
            axis=2,
        )
        out[beg:end] = relu(stacked @ level.mix.w + level.mix.b).max(axis=1)

    run_chunked(work, n, ENCODE_CHUNK, workers)
    new_maps = subsample(maps_in, spec.stride_h, spec.stride_w)
    new_cells = np.stack(
        [centers[:, 0] // spec.stride_h, centers[:, 1] // spec.stride_w], axis=1
    ).astype(np.int32)
    return LevelState(new_maps, out, new_cells)


def three_nn_weights(
    coarse_xyz: np.ndarray,
    query_xyz: np.ndarray,
    k: int = 3,
    eps: float = 1e-8,
):
    """Indices and normalized inverse-distance weights of the k nearest
    coarse points for every query point.

    Returns (idx, weights) with shapes (Q, k).  When fewer than k coarse
    points exist, all of them are used.
    """
    coarse = np.asarray(coarse_xyz, dtype=np.float64)
    query = np.asarray(query_xyz, dtype=np.float64)
    k = min(k, len(coarse))
    if k < 1:
        raise ValueError("need at least one coarse point")
    idx = np.empty((len(query), k), dtype=np.int64)
    weights = np.empty((len(query), k))
    for beg in range(0, len(query), INTERP_CHUNK):
        q = query[beg:beg + INTERP_CHUNK]
        delta = q[:, None, :] - coarse[None, :, :]
        dist = np.sqrt((delta * delta).sum(axis=2))
        if dist.shape[1] > k:
            part = np.argpartition(dist, k - 1, axis=1)[:, :k]
        else:
            part = np.broadcast_to(np.arange(k), (len(q), k)).copy()
        dsel = np.take_along_axis(dist, part, axis=1)
        order = np.lexsort((part, dsel))
        sel = np.take_along_axis(part, order, axis=1)
        dsel = np.take_along_axis(dsel, order, axis=1)
        w = 1.0 / (dsel + eps)
        weights[beg:beg + INTERP_CHUNK] = w / w.sum(axis=1, keepdims=True)
        idx[beg:beg + INTERP_CHUNK] = sel
    return idx, weights


def interpolate_features(
    coarse_xyz: np.ndarray,
    coarse_feats: np.ndarray,
    query_xyz: np.ndarray,
    k: int = 3,
    eps: float = 1e-8,
) -> np.ndarray:
    """Inverse-distance interpolation of coarse features at query points."""
    idx, w = three_nn_weights(coarse_xyz, query_xyz, k, eps)
    feats = np.asarray(coarse_feats, dtype=np.float64)
    return (feats[idx] * w[..., None]).sum(axis=1)


def decode_to_full(
    levels: Sequence[LevelState],
    target: SyncedMaps,
    step_mixes: Sequence[Dense],
) -> np.ndarray:
    """Propagate coarse features back to full resolution.

    ``levels`` runs coarse to fine and ends with the full-resolution
    state whose maps equal ``target``.  Each step interpolates the carried
    features at the next finer level's points, concatenates them with that
    level's own features and mixes through a dense layer + ReLU.  Returns
    the (N0, C) matrix over the target's valid cells.
    """
    if len(levels) < 2:
        raise DimensionMismatch("need at least a coarse and a fine level")
    if len(step_mixes) != len(levels) - 1:
        raise DimensionMismatch(
            f"{len(levels) - 1} decode steps need {len(levels) - 1} mix layers, "
            f"got {len(step_mixes)}"
        )
    finest = levels[-1].maps
    if (finest.height, finest.width) != (target.height, target.width) or not np.array_equal(
        finest.valid, target.valid
    ):
        raise DimensionMismatch("finest level does not match the target maps")
    carried = levels[0].features
    cells = levels[0].maps.valid_cells
    src_xyz = levels[0].maps.xyz[cells[:, 0], cells[:, 1]]
    for state, mix in zip(levels[1:], step_mixes):
        cells = state.maps.valid_cells
        q_xyz = state.maps.xyz[cells[:, 0], cells[:, 1]]
        interp = interpolate_features(src_xyz, carried, q_xyz)
        carried = relu(mix(np.concatenate([interp, state.features], axis=1)))
        src_xyz = q_xyz
    return carried


def dump_level(state: LevelState, path) -> None:
    """Write a level to the maps container layout with a feature block.

    Layout: magic ``FFPL``, u32 version, u32 height, u32 width, u32
    feature width C, xyz/uv float32 maps, the mask bytes, then the
    (N_valid, C) features row-major as float32.
    """
    path = Path(path)
    m = state.maps
    with open(path, "wb") as f:
        f.write(LEVEL_MAGIC)
        f.write(struct.pack("<IIII", LEVEL_VERSION, m.height, m.width, state.width))
        f.write(np.ascontiguousarray(m.xyz, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(m.uv, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(m.valid, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(state.features, dtype="<f4").tobytes())
    _write_grid_sidecar(sidecar_path(path), m)


def load_level(path) -> LevelState:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != LEVEL_MAGIC:
        raise ValueError(f"{path}: not a level container")
    version, h, w, c = struct.unpack_from("<IIII", blob, 4)
    if version != LEVEL_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    offset = 20

    def take(count):
        nonlocal offset
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        return arr

    xyz = take(h * w * 3).reshape(h, w, 3).astype(np.float64)
    uv = take(h * w * 2).reshape(h, w, 2).astype(np.float64)
    valid = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=offset).reshape(h, w).astype(bool)
    offset += h * w
    n = int(valid.sum())
    feats = take(n * c).reshape(n, c).astype(np.float64)
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    grid = _read_grid_sidecar(sidecar_path(path))
    m = SyncedMaps(xyz, uv, valid, grid)
    return LevelState(m, feats, m.valid_cells)

"""Cross-modal feature fusion at matched point / pixel resolution.

Both modules consume per-point features, per-pixel features sampled at
the synchronized pixel coordinates, and a 7-wide Euclidean descriptor
(u, v, u', v', u - u', v - v', distance) built from the two 2D positions.

The gated variant projects the three inputs to a shared width, squashes
their sum through tanh, derives a sigmoid gate and blends image and point
features elementwise.  The bidirectional variant runs two attention
stages per direction: per cross-domain neighbor embeddings are softmax
weighted over the M cross neighbors, then the per-neighbor aggregates are
softmax weighted over the K same-domain neighbors.  Direction A treats
LiDAR points as queriers of pixels; direction B swaps the roles using the
sampled pixels as image points.  A final dense mix + normalization + ReLU
merges the two directions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .encoder import KernelSpec, LevelState, neighbor_table
from .errors import DimensionMismatch
from .params import Dense, Norm, dense_shapes, norm_shapes
from .util import relu, run_chunked, sigmoid, softmax

__all__ = [
    "EUCLID_WIDTH",
    "PixelSet",
    "LiCamFuseParams",
    "BiDirectionParams",
    "BiLiCamFuseParams",
    "euclidean_info",
    "licamfuse",
    "bilicamfuse_stage1",
    "bilicamfuse_stage2",
    "bilicamfuse",
]

EUCLID_WIDTH = 7
FUSION_CHUNK = 128


def euclidean_info(x, y) -> np.ndarray:
    """Pairwise 2D descriptor (x, y, x - y, ||x - y||), broadcastable.

    ``x`` carries the querier's 2D coordinates and ``y`` the queried
    pixel's.  Inputs of shape (..., 2) produce output of shape (..., 7).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-1] != 2 or y.shape[-1] != 2:
        raise DimensionMismatch("euclidean info expects 2D coordinates")
    x, y = np.broadcast_arrays(x, y)
    d = x - y
    n = np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1])[..., None]
    return np.concatenate([x, y, d, n], axis=-1)


@dataclass(frozen=True)
class PixelSet:
    """Sampled image points aligned with a level's valid cells."""

    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise DimensionMismatch(f"pixel coords must be (N, 2), got {coords.shape}")
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise DimensionMismatch("pixel coords and features disagree on N")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)


@dataclass(frozen=True)
class LiCamFuseParams:
    """Dense layers of the gated fusion: three input projections plus the
    gate head."""

    point: Dense
    image: Dense
    euclid: Dense
    gate: Dense

    def __post_init__(self):
        c = self.point.out_width
        if self.image.out_width != c or self.euclid.out_width != c:
            raise DimensionMismatch("fusion projections must share one width")
        if self.euclid.in_width != EUCLID_WIDTH:
            raise DimensionMismatch("euclid projection must take 7-wide descriptors")
        if self.gate.in_width != c:
            raise DimensionMismatch("gate head width must match the shared width")

    @classmethod
    def from_bank(cls, bank: Mapping[str, np.ndarray], prefix: str) -> "LiCamFuseParams":
        return cls(
            Dense.from_bank(bank, f"{prefix}.point"),
            Dense.from_bank(bank, f"{prefix}.image"),
            Dense.from_bank(bank, f"{prefix}.euclid"),
            Dense.from_bank(bank, f"{prefix}.gate"),
        )

    @staticmethod
    def shapes(prefix: str, width: int):
        shapes = dense_shapes(f"{prefix}.point", width, width)
        shapes.update(dense_shapes(f"{prefix}.image", width, width))
        shapes.update(dense_shapes(f"{prefix}.euclid", EUCLID_WIDTH, width))
        shapes.update(dense_shapes(f"{prefix}.gate", width, width))
        return shapes


def licamfuse(point_feat, image_feat, euclid, prm: LiCamFuseParams, return_gate: bool = False):
    """Gated elementwise blend of point and image features.

    Accepts single vectors or (N, C) batches.  The gate is a sigmoid, so
    every output lies strictly between the two inputs channelwise.
    """
    fl = np.asarray(point_feat, dtype=np.float64)
    fi = np.asarray(image_feat, dtype=np.float64)
    fe = np.asarray(euclid, dtype=np.float64)
    single = fl.ndim == 1
    fl = np.atleast_2d(fl)
    fi = np.atleast_2d(fi)
    fe = np.atleast_2d(fe)
    if fl.shape != fi.shape:
        raise DimensionMismatch(
            f"point {fl.shape} and image {fi.shape} features must share a shape"
        )
    fused = prm.point(fl) + prm.image(fi) + prm.euclid(fe)
    gate = sigmoid(prm.gate(np.tanh(fused)))
    out = gate * fi + (1.0 - gate) * fl
    if single:
        out = out[0]
        gate = gate[0]
    return (out, gate) if return_gate else out


@dataclass(frozen=True)
class BiDirectionParams:
    """Layers of one direction: the neighbor embedding MLP, the inner
    (cross-neighbor) weight head and the outer (same-domain) weight head."""

    emb1: Dense
    emb2: Dense
    att1a: Dense
    att1b: Dense
    att2a: Dense
    att2b: Dense

    def __post_init__(self):
        if self.att1b.out_width != 1 or self.att2b.out_width != 1:
            raise DimensionMismatch("attention heads must end in a scalar logit")

    @classmethod
    def from_bank(cls, bank: Mapping[str, np.ndarray], prefix: str) -> "BiDirectionParams":
        return cls(*(Dense.from_bank(bank, f"{prefix}.{name}")
                     for name in ("emb1", "emb2", "att1a", "att1b", "att2a", "att2b")))

    @staticmethod
    def shapes(prefix: str, width: int):
        shapes = dense_shapes(f"{prefix}.emb1", EUCLID_WIDTH + 2 * width, width)
        shapes.update(dense_shapes(f"{prefix}.emb2", width, width))
        shapes.update(dense_shapes(f"{prefix}.att1a", EUCLID_WIDTH + width, width))
        shapes.update(dense_shapes(f"{prefix}.att1b", width, 1))
        shapes.update(dense_shapes(f"{prefix}.att2a", 2 * width + EUCLID_WIDTH, width))
        shapes.update(dense_shapes(f"{prefix}.att2b", width, 1))
        return shapes


@dataclass(frozen=True)
class BiLiCamFuseParams:
    """Both direction parameter sets plus the final mix and normalization."""

    a: BiDirectionParams
    b: BiDirectionParams
    mix: Dense
    norm: Norm

    @classmethod
    def from_bank(cls, bank: Mapping[str, np.ndarray], prefix: str) -> "BiLiCamFuseParams":
        return cls(
            BiDirectionParams.from_bank(bank, f"{prefix}.a"),
            BiDirectionParams.from_bank(bank, f"{prefix}.b"),
            Dense.from_bank(bank, f"{prefix}.mix"),
            Norm.from_bank(bank, f"{prefix}.norm"),
        )

    @staticmethod
    def shapes(prefix: str, width: int):
        shapes = BiDirectionParams.shapes(f"{prefix}.a", width)
        shapes.update(BiDirectionParams.shapes(f"{prefix}.b", width))
        shapes.update(dense_shapes(f"{prefix}.mix", 2 * width, width))
        shapes.update(norm_shapes(f"{prefix}.norm", width))
        return shapes


def _embed(euclid, cross_feats, center_feats, prm: BiDirectionParams):
    """Per cross-neighbor embedding: MLP over descriptor, cross feature
    and the querier's own feature, two dense + ReLU layers."""
    stacked = np.concatenate([euclid, cross_feats, center_feats], axis=-1)
    return relu(prm.emb2(relu(prm.emb1(stacked))))


def _inner_logits(euclid, emb, prm: BiDirectionParams):
    stacked = np.concatenate([euclid, emb], axis=-1)
    return prm.att1b(relu(prm.att1a(stacked)))[..., 0]


def _outer_logits(agg, euclid, center_feats, prm: BiDirectionParams):
    stacked = np.concatenate([agg, euclid, center_feats], axis=-1)
    return prm.att2b(relu(prm.att2a(stacked)))[..., 0]


def bilicamfuse_stage1(
    center_feat: np.ndarray,
    cross_feats: np.ndarray,
    cross_euclid: np.ndarray,
    prm: BiDirectionParams,
    return_weights: bool = False,
):
    """First attention stage for one querier.

    ``center_feat`` is the querier's own (C,) feature, ``cross_feats`` the
    (M, C) cross-domain neighbor features and ``cross_euclid`` the (M, 7)
    descriptors.  Neighbor embeddings are softmax weighted over M and
    summed; the result is invariant to neighbor order.
    """
    center = np.asarray(center_feat, dtype=np.float64)
    cross = np.asarray(cross_feats, dtype=np.float64)
    eu = np.asarray(cross_euclid, dtype=np.float64)
    m = cross.shape[0]
    if eu.shape != (m, EUCLID_WIDTH):
        raise DimensionMismatch(f"descriptors must be ({m}, {EUCLID_WIDTH}), got {eu.shape}")
    emb = _embed(eu, cross, np.broadcast_to(center, (m, center.shape[-1])), prm)
    weights = softmax(_inner_logits(eu, emb, prm))
    out = weights @ emb
    return (out, weights) if return_weights else out


def bilicamfuse_stage2(
    center_feat: np.ndarray,
    stage1_feats: np.ndarray,
    point_euclid: np.ndarray,
    prm: BiDirectionParams,
    return_weights: bool = False,
):
    """Second attention stage: softmax over the K same-domain neighbors'
    stage-1 aggregates, weighted sum."""
    center = np.asarray(center_feat, dtype=np.float64)
    agg = np.asarray(stage1_feats, dtype=np.float64)
    eu = np.asarray(point_euclid, dtype=np.float64)
    k = agg.shape[0]
    if eu.shape != (k, EUCLID_WIDTH):
        raise DimensionMismatch(f"descriptors must be ({k}, {EUCLID_WIDTH}), got {eu.shape}")
    logits = _outer_logits(agg, eu, np.broadcast_to(center, (k, center.shape[-1])), prm)
    weights = softmax(logits)
    out = weights @ agg
    return (out, weights) if return_weights else out


def _direction(
    sl: slice,
    own_coords: np.ndarray,
    cross_coords: np.ndarray,
    outer: np.ndarray,
    inner: np.ndarray,
    own_feats: np.ndarray,
    cross_feats: np.ndarray,
    prm: BiDirectionParams,
) -> np.ndarray:
    """Both attention stages for one chunk of queriers in one direction."""
    ko = outer[sl]
    km = inner[ko]
    eu1 = euclidean_info(own_coords[ko][:, :, None, :], cross_coords[km])
    n, k, m = km.shape
    width = own_feats.shape[1]
    centers1 = np.broadcast_to(own_feats[ko][:, :, None, :], (n, k, m, width))
    emb = _embed(eu1, cross_feats[km], centers1, prm)
    w1 = softmax(_inner_logits(eu1, emb, prm), axis=2)
    agg = (w1[..., None] * emb).sum(axis=2)
    eu2 = euclidean_info(own_coords[sl][:, None, :], own_coords[ko])
    centers2 = np.broadcast_to(own_feats[sl][:, None, :], (n, k, width))
    w2 = softmax(_outer_logits(agg, eu2, centers2, prm), axis=1)
    return (w2[..., None] * agg).sum(axis=1)


def bilicamfuse(
    state: LevelState,
    pixels: PixelSet,
    spec: KernelSpec,
    m_neighbors: int,
    prm: BiLiCamFuseParams,
    workers: int = 0,
) -> np.ndarray:
    """Bidirectional fusion over a level's valid cells.

    Direction A gathers K point-neighbors per LiDAR point with the 3D
    windowed KNN, each of which gathers M pixel-neighbors by 2D pixel
    distance inside the same window.  Direction B mirrors the flow with
    the sampled pixels as queriers: K pixel-neighbors by 2D distance,
    each collecting M LiDAR points by 2D distance.  Outputs of the two
    directions are mixed, normalized and rectified into an (N, C) matrix
    aligned with the level's feature rows.
    """
    maps_ = state.maps
    cells = maps_.valid_cells
    n = len(cells)
    if pixels.coords.shape[0] != n:
        raise DimensionMismatch("pixel set does not cover the level's valid cells")
    if pixels.features.shape[1] != state.width:
        raise DimensionMismatch(
            f"pixel width {pixels.features.shape[1]} != point width {state.width}"
        )
    if m_neighbors < 1:
        raise ValueError("m_neighbors must be at least 1")
    uv = maps_.uv[cells[:, 0], cells[:, 1]]
    fl = state.features
    fi = pixels.features
    k = spec.k
    window = (spec.kh, spec.kw)
    nn_point = neighbor_table(maps_, cells, k, window, metric="xyz", max_range=spec.range_r)
    nn_pixel = neighbor_table(maps_, cells, max(k, m_neighbors), window, metric="uv")
    nn_pixel_k = np.ascontiguousarray(nn_pixel[:, :k])
    nn_pixel_m = np.ascontiguousarray(nn_pixel[:, :m_neighbors])
    out_a = np.empty((n, state.width))
    out_b = np.empty((n, state.width))

    # Both inner searches walk the same synchronized set in pixel space:
    # the M pixel-neighbors of a point and the M point-neighbors of a
    # pixel coincide because points shifted to 2D sit at their uv entries.
    def work(beg: int) -> None:
        sl = slice(beg, min(beg + FUSION_CHUNK, n))
        out_a[sl] = _direction(sl, uv, pixels.coords, nn_point, nn_pixel_m, fl, fi, prm.a)
        out_b[sl] = _direction(sl, pixels.coords, uv, nn_pixel_k, nn_pixel_m, fi, fl, prm.b)

    run_chunked(work, n, FUSION_CHUNK, workers)
    merged = np.concatenate([out_a, out_b], axis=1)
    return relu(prm.norm(prm.mix(merged)))

"""Image feature extraction and sampling.

Images are padded to a fixed (width, height) target with zeros at the
bottom and right, then pushed through two same-padded 3x3 convolutions,
both stride 2, with per-channel normalization and ReLU between them.  The
resulting grid sits at a fixed downscale of 4.  Three further stride-1
conv + norm + ReLU stages widen the channels, one grid per encoder level.
Point-side consumers read the grids with bilinear interpolation indexed
by pixel coordinates from the synchronized maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, OversizeImage
from .geometry import DEFAULT_IMAGE_SIZE
from .params import Norm, norm_shapes
from .util import relu

__all__ = [
    "IMAGE_WIDTHS",
    "ImageFeatureGrid",
    "ImageBlockParams",
    "PyramidStageParams",
    "pad_image",
    "conv3x3",
    "extract_image_features",
    "feature_pyramid",
    "bilinear_sample",
    "bilinear_sample_many",
]

# Channel widths of the image grids paired with encoder levels 1..4.
IMAGE_WIDTHS = (64, 128, 256, 512)
BLOCK_INNER_WIDTH = 32
DOWNSCALE = 4

_CONV_ROW_CHUNK = 16


@dataclass(frozen=True)
class ImageFeatureGrid:
    """Feature grid at a fixed downscale of the padded image."""

    data: np.ndarray
    downscale: int = DOWNSCALE

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"feature grid must be (h, w, c), got {data.shape}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ImageBlockParams:
    """Two 3x3 stride-2 convolutions with normalization + ReLU between."""

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    norm1: Norm
    conv2_w: np.ndarray
    conv2_b: np.ndarray

    @classmethod
    def from_bank(cls, bank: Mapping[str, np.ndarray], prefix: str) -> "ImageBlockParams":
        return cls(
            bank[f"{prefix}.conv1.w"], bank[f"{prefix}.conv1.b"],
            Norm.from_bank(bank, f"{prefix}.norm1"),
            bank[f"{prefix}.conv2.w"], bank[f"{prefix}.conv2.b"],
        )

    @staticmethod
    def shapes(prefix: str, in_ch: int = 3, inner: int = BLOCK_INNER_WIDTH, out_ch: int = IMAGE_WIDTHS[0]):
        shapes = {
            f"{prefix}.conv1.w": (3, 3, in_ch, inner),
            f"{prefix}.conv1.b": (inner,),
            f"{prefix}.conv2.w": (3, 3, inner, out_ch),
            f"{prefix}.conv2.b": (out_ch,),
        }
        shapes.update(norm_shapes(f"{prefix}.norm1", inner))
        return shapes


@dataclass(frozen=True)
class PyramidStageParams:
    """One stride-1 conv + norm stage widening the pyramid."""

    conv_w: np.ndarray
    conv_b: np.ndarray
    norm: Norm

    @classmethod
    def from_bank(cls, bank: Mapping[str, np.ndarray], prefix: str) -> "PyramidStageParams":
        return cls(
            bank[f"{prefix}.conv.w"], bank[f"{prefix}.conv.b"],
            Norm.from_bank(bank, f"{prefix}.norm"),
        )

    @staticmethod
    def shapes(prefix: str, in_ch: int, out_ch: int):
        shapes = {
            f"{prefix}.conv.w": (3, 3, in_ch, out_ch),
            f"{prefix}.conv.b": (out_ch,),
        }
        shapes.update(norm_shapes(f"{prefix}.norm", out_ch))
        return shapes


def pad_image(image: np.ndarray, size=DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Zero-pad an (h, w, 3) image at the bottom and right to ``size``.

    ``size`` is (width, height).  Raises OversizeImage when the input
    exceeds the target in either dimension.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got {img.shape}")
    width, height = size
    ih, iw = img.shape[:2]
    if iw > width or ih > height:
        raise OversizeImage(f"image {iw}x{ih} exceeds padding target {width}x{height}")
    out = np.zeros((height, width, 3), dtype=img.dtype)
    out[:ih, :iw] = img
    return out


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Same-padded 3x3 convolution, float32, weight layout (3, 3, cin, cout)."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    weight = np.asarray(weight, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    if weight.ndim != 4 or weight.shape[:2] != (3, 3) or weight.shape[2] != x.shape[2]:
        raise DimensionMismatch(
            f"conv weight {weight.shape} does not fit input {x.shape}"
        )
    cin, cout = weight.shape[2], weight.shape[3]
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))[::stride, ::stride]
    ho, wo = windows.shape[:2]
    kernel = weight.reshape(9 * cin, cout)
    out = np.empty((ho, wo, cout), dtype=np.float32)
    for beg in range(0, ho, _CONV_ROW_CHUNK):
        end = min(beg + _CONV_ROW_CHUNK, ho)
        cols = windows[beg:end].transpose(0, 1, 3, 4, 2).reshape((end - beg) * wo, 9 * cin)
        out[beg:end] = (cols @ kernel + bias).reshape(end - beg, wo, cout)
    return out


def extract_image_features(image: np.ndarray, block: ImageBlockParams) -> ImageFeatureGrid:
    """Run the two-convolution block on a padded image.

    Output extents are the input extents divided by 4 (rounding up for
    odd sizes), channels ``IMAGE_WIDTHS[0]``-wide for seeded parameters.
    """
    x = np.asarray(image, dtype=np.float32)
    h1 = conv3x3(x, block.conv1_w, block.conv1_b, stride=2)
    h1 = relu(block.norm1(h1))
    out = conv3x3(h1, block.conv2_w, block.conv2_b, stride=2)
    return ImageFeatureGrid(out, downscale=DOWNSCALE)


def feature_pyramid(
    image: np.ndarray,
    block: ImageBlockParams,
    stages: Sequence[PyramidStageParams],
) -> list[ImageFeatureGrid]:
    """Image grids paired with the encoder levels: the block output, then
    one stride-1 conv + norm + ReLU stage per further level."""
    grids = [extract_image_features(image, block)]
    current = grids[0].data
    for stage in stages:
        current = relu(stage.norm(conv3x3(current, stage.conv_w, stage.conv_b, stride=1)))
        current = np.asarray(current, dtype=np.float32)
        grids.append(ImageFeatureGrid(current, downscale=DOWNSCALE))
    return grids


def bilinear_sample_many(grid: ImageFeatureGrid, uv: np.ndarray) -> np.ndarray:
    """Bilinear reads of the grid at (N, 2) pixel coordinates.

    Pixel coordinates are divided by the grid's downscale and clamped to
    the grid interior, so samples at padded-image borders stay defined.
    Returns (N, C) float64.
    """
    pts = np.asarray(uv, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (N, 2) pixel coordinates, got {pts.shape}")
    data = grid.data
    h, w = data.shape[:2]
    gx = np.clip(pts[:, 0] / grid.downscale, 0.0, w - 1.0)
    gy = np.clip(pts[:, 1] / grid.downscale, 0.0, h - 1.0)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    f00 = data[y0, x0].astype(np.float64)
    f10 = data[y0, x1].astype(np.float64)
    f01 = data[y1, x0].astype(np.float64)
    f11 = data[y1, x1].astype(np.float64)
    return (
        f00 * (1.0 - fx) * (1.0 - fy)
        + f10 * fx * (1.0 - fy)
        + f01 * (1.0 - fx) * fy
        + f11 * fx * fy
    )


def bilinear_sample(grid: ImageFeatureGrid, uv) -> np.ndarray:
    """Bilinear read at a single (u, v) pixel coordinate, returning (C,)."""
    return bilinear_sample_many(grid, np.asarray(uv, dtype=np.float64).reshape(1, 2))[0]

import numpy as np
import pytest

from lidarcam.errors import DimensionMismatch, OversizeImage
from lidarcam.imagefeat import (
    IMAGE_WIDTHS,
    ImageBlockParams,
    ImageFeatureGrid,
    PyramidStageParams,
    bilinear_sample,
    bilinear_sample_many,
    conv3x3,
    extract_image_features,
    feature_pyramid,
    pad_image,
)
from lidarcam.params import seeded_params


def oracle_conv(x, weight, bias, stride):
    """Same-padded 3x3 convolution with explicit loops, float64 math."""
    h, w, cin = x.shape
    cout = weight.shape[3]
    padded = np.zeros((h + 2, w + 2, cin))
    padded[1:-1, 1:-1] = x
    ho = len(range(0, h, stride))
    wo = len(range(0, w, stride))
    out = np.zeros((ho, wo, cout))
    for oi, i in enumerate(range(0, h, stride)):
        for oj, j in enumerate(range(0, w, stride)):
            for co in range(cout):
                acc = 0.0
                for di in range(3):
                    for dj in range(3):
                        for ci in range(cin):
                            acc += padded[i + di, j + dj, ci] * weight[di, dj, ci, co]
                out[oi, oj, co] = acc + bias[co]
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv3x3_matches_loop_oracle(stride):
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(10, 12, 2)).astype(np.float32)
    w = rng.normal(size=(3, 3, 2, 3)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    got = conv3x3(x, w, b, stride=stride)
    want = oracle_conv(x.astype(np.float64), w.astype(np.float64),
                       b.astype(np.float64), stride)
    assert got.shape == want.shape
    assert got.dtype == np.float32
    assert np.abs(got - want).max() < 1e-4


def test_conv3x3_rejects_wrong_channels():
    with pytest.raises(DimensionMismatch):
        conv3x3(np.zeros((4, 4, 3), dtype=np.float32),
                np.zeros((3, 3, 2, 4)), np.zeros(4))


def test_pad_image_places_content_top_left():
    img = np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3)
    out = pad_image(img, size=(5, 4))
    assert out.shape == (4, 5, 3)
    assert np.array_equal(out[:2, :3], img)
    assert np.all(out[2:] == 0.0)
    assert np.all(out[:, 3:] == 0.0)


def test_pad_image_oversize_raises():
    with pytest.raises(OversizeImage):
        pad_image(np.zeros((100, 100, 3)), size=(64, 64))


def test_pad_image_default_target():
    out = pad_image(np.zeros((375, 1242, 3), dtype=np.float32))
    assert out.shape == (384, 1280, 3)


def block_params(seed=0):
    return ImageBlockParams.from_bank(
        seeded_params(seed, ImageBlockParams.shapes("blk")), "blk")


def test_block_downscale_extents():
    blk = block_params()
    grid = extract_image_features(np.zeros((384, 1280, 3), dtype=np.float32), blk)
    assert grid.data.shape == (96, 320, IMAGE_WIDTHS[0])
    assert grid.downscale == 4
    odd = extract_image_features(np.zeros((17, 9, 3), dtype=np.float32), blk)
    assert odd.data.shape == (5, 3, IMAGE_WIDTHS[0])


def test_feature_pyramid_widths():
    blk = block_params()
    stages = [
        PyramidStageParams.from_bank(
            seeded_params(0, PyramidStageParams.shapes(f"s{i}", cin, cout)), f"s{i}")
        for i, (cin, cout) in enumerate(zip(IMAGE_WIDTHS[:-1], IMAGE_WIDTHS[1:]))
    ]
    grids = feature_pyramid(np.zeros((32, 48, 3), dtype=np.float32), blk, stages)
    assert [g.data.shape[2] for g in grids] == list(IMAGE_WIDTHS)
    extents = {g.data.shape[:2] for g in grids}
    assert extents == {(8, 12)}
    assert all(g.data.dtype == np.float32 for g in grids)


# -------------------------------------------------------------- sampling

def test_bilinear_sample_exact_at_grid_nodes():
    data = np.arange(12, dtype=np.float32).reshape(3, 4, 1)
    grid = ImageFeatureGrid(data, downscale=2)
    # node (row 1, col 2) sits at pixel coordinates (4, 2)
    got = bilinear_sample(grid, (4.0, 2.0))
    assert got[0] == pytest.approx(data[1, 2, 0])


def test_bilinear_sample_matches_hand_blend():
    data = np.zeros((2, 2, 1), dtype=np.float32)
    data[0, 0, 0] = 1.0
    data[0, 1, 0] = 2.0
    data[1, 0, 0] = 3.0
    data[1, 1, 0] = 4.0
    grid = ImageFeatureGrid(data, downscale=1)
    got = bilinear_sample(grid, (0.25, 0.5))
    want = (1.0 * 0.75 * 0.5 + 2.0 * 0.25 * 0.5 + 3.0 * 0.75 * 0.5 + 4.0 * 0.25 * 0.5)
    assert got[0] == pytest.approx(want)


def test_bilinear_sample_clamps_outside():
    data = np.arange(4, dtype=np.float32).reshape(2, 2, 1)
    grid = ImageFeatureGrid(data, downscale=1)
    assert bilinear_sample(grid, (-3.0, -3.0))[0] == pytest.approx(data[0, 0, 0])
    assert bilinear_sample(grid, (99.0, 99.0))[0] == pytest.approx(data[1, 1, 0])


def test_bilinear_sample_many_matches_scalar():
    rng = np.random.default_rng(5)
    data = rng.normal(size=(6, 7, 3)).astype(np.float32)
    grid = ImageFeatureGrid(data, downscale=4)
    pts = np.stack([rng.uniform(0, 28, 50), rng.uniform(0, 24, 50)], axis=1)
    many = bilinear_sample_many(grid, pts)
    for i in range(50):
        one = bilinear_sample(grid, pts[i])
        assert np.abs(many[i] - one).max() < 1e-12


def test_bilinear_sample_many_validates_shape():
    grid = ImageFeatureGrid(np.zeros((2, 2, 1), dtype=np.float32))
    with pytest.raises(ValueError):
        bilinear_sample_many(grid, np.zeros((5, 3)))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarcam.encoder import KernelSpec, LevelState, neighbor_table
from lidarcam.errors import DimensionMismatch
from lidarcam.fusion import (
    BiDirectionParams,
    BiLiCamFuseParams,
    LiCamFuseParams,
    PixelSet,
    bilicamfuse,
    bilicamfuse_stage1,
    bilicamfuse_stage2,
    euclidean_info,
    licamfuse,
)
from lidarcam.params import seeded_params

from conftest import tiny_maps


# ------------------------------------------------------- pure python ops

def py_dense(x, layer):
    w, b = layer.w, layer.b
    return [sum(x[i] * w[i, j] for i in range(len(x))) + b[j] for j in range(w.shape[1])]


def py_sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def py_softmax(vals):
    m = max(vals)
    e = [math.exp(v - m) for v in vals]
    s = sum(e)
    return [v / s for v in e]


# --------------------------------------------------------- euclidean info

def test_euclidean_info_values():
    out = euclidean_info(np.array([3.0, 4.0]), np.array([0.0, 0.0]))
    assert out.tolist() == [3.0, 4.0, 0.0, 0.0, 3.0, 4.0, 5.0]


def test_euclidean_info_broadcasts():
    x = np.zeros((4, 1, 2))
    y = np.zeros((1, 6, 2))
    assert euclidean_info(x, y).shape == (4, 6, 7)


def test_euclidean_info_rejects_3d_coords():
    with pytest.raises(DimensionMismatch):
        euclidean_info(np.zeros(3), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(
    ux=st.floats(-500, 500), uy=st.floats(-500, 500),
    vx=st.floats(-500, 500), vy=st.floats(-500, 500),
)
def test_euclidean_distance_matches_hypot(ux, uy, vx, vy):
    out = euclidean_info(np.array([ux, uy]), np.array([vx, vy]))
    dx, dy = ux - vx, uy - vy
    assert out[6] == pytest.approx(math.sqrt(dx * dx + dy * dy), rel=1e-12, abs=1e-12)


# ------------------------------------------------------------- licamfuse

def licam_params(width, seed=0):
    return LiCamFuseParams.from_bank(
        seeded_params(seed, LiCamFuseParams.shapes("f", width)), "f")


def test_licamfuse_scalar_oracle():
    """Gated blend recomputed with python lists at width 4."""
    prm = licam_params(4, seed=3)
    rng = np.random.default_rng(1)
    for _ in range(20):
        fl = rng.normal(size=4)
        fi = rng.normal(size=4)
        eu = rng.normal(size=7)
        got, gate = licamfuse(fl, fi, eu, prm, return_gate=True)
        mixed = [a + b + c for a, b, c in zip(
            py_dense(fl, prm.point), py_dense(fi, prm.image), py_dense(eu, prm.euclid))]
        squashed = [math.tanh(v) for v in mixed]
        want_gate = [py_sigmoid(v) for v in py_dense(squashed, prm.gate)]
        want = [g * i + (1 - g) * l for g, i, l in zip(want_gate, fi, fl)]
        assert np.abs(gate - np.array(want_gate)).max() < 1e-10
        assert np.abs(got - np.array(want)).max() < 1e-10


def test_licamfuse_gates_strictly_open():
    prm = licam_params(16)
    rng = np.random.default_rng(2)
    fl = rng.normal(size=(200, 16)) * 50
    fi = rng.normal(size=(200, 16)) * 50
    eu = rng.normal(size=(200, 7)) * 50
    _, gate = licamfuse(fl, fi, eu, prm, return_gate=True)
    assert np.all(gate > 0.0)
    assert np.all(gate < 1.0)


def test_licamfuse_output_between_inputs():
    prm = licam_params(8)
    rng = np.random.default_rng(3)
    fl = rng.normal(size=(50, 8))
    fi = rng.normal(size=(50, 8))
    eu = rng.normal(size=(50, 7))
    out = licamfuse(fl, fi, eu, prm)
    lo = np.minimum(fl, fi)
    hi = np.maximum(fl, fi)
    assert np.all(out >= lo - 1e-12)
    assert np.all(out <= hi + 1e-12)


def test_licamfuse_width_mismatch_raises():
    prm = licam_params(8)
    with pytest.raises(DimensionMismatch):
        licamfuse(np.zeros(8), np.zeros(6), np.zeros(7), prm)


# ------------------------------------------------- bidirectional stages

def direction_params(width, seed=0):
    return BiDirectionParams.from_bank(
        seeded_params(seed, BiDirectionParams.shapes("d", width)), "d")


def test_stage1_scalar_oracle():
    width, m = 3, 4
    prm = direction_params(width, seed=5)
    rng = np.random.default_rng(4)
    center = rng.normal(size=width)
    cross = rng.normal(size=(m, width))
    eu = rng.normal(size=(m, 7))
    got, weights = bilicamfuse_stage1(center, cross, eu, prm, return_weights=True)
    embs, logits = [], []
    for j in range(m):
        stacked = list(eu[j]) + list(cross[j]) + list(center)
        h1 = [max(v, 0.0) for v in py_dense(stacked, prm.emb1)]
        emb = [max(v, 0.0) for v in py_dense(h1, prm.emb2)]
        embs.append(emb)
        att_in = list(eu[j]) + emb
        h2 = [max(v, 0.0) for v in py_dense(att_in, prm.att1a)]
        logits.append(py_dense(h2, prm.att1b)[0])
    want_w = py_softmax(logits)
    want = [sum(want_w[j] * embs[j][c] for j in range(m)) for c in range(width)]
    assert abs(sum(weights) - 1.0) < 1e-6
    assert np.abs(weights - np.array(want_w)).max() < 1e-10
    assert np.abs(got - np.array(want)).max() < 1e-10


def test_stage2_scalar_oracle():
    width, k = 3, 5
    prm = direction_params(width, seed=6)
    rng = np.random.default_rng(7)
    center = rng.normal(size=width)
    agg = rng.normal(size=(k, width))
    eu = rng.normal(size=(k, 7))
    got, weights = bilicamfuse_stage2(center, agg, eu, prm, return_weights=True)
    logits = []
    for j in range(k):
        stacked = list(agg[j]) + list(eu[j]) + list(center)
        h = [max(v, 0.0) for v in py_dense(stacked, prm.att2a)]
        logits.append(py_dense(h, prm.att2b)[0])
    want_w = py_softmax(logits)
    want = [sum(want_w[j] * agg[j][c] for j in range(k)) for c in range(width)]
    assert abs(sum(weights) - 1.0) < 1e-6
    assert np.abs(weights - np.array(want_w)).max() < 1e-10
    assert np.abs(got - np.array(want)).max() < 1e-10


def test_stage1_permutation_invariant():
    prm = direction_params(6, seed=8)
    rng = np.random.default_rng(9)
    center = rng.normal(size=6)
    cross = rng.normal(size=(8, 6))
    eu = rng.normal(size=(8, 7))
    base = bilicamfuse_stage1(center, cross, eu, prm)
    for _ in range(100):
        p = rng.permutation(8)
        again = bilicamfuse_stage1(center, cross[p], eu[p], prm)
        assert np.abs(again - base).max() <= 1e-6


def test_stage2_permutation_invariant():
    prm = direction_params(6, seed=8)
    rng = np.random.default_rng(10)
    center = rng.normal(size=6)
    agg = rng.normal(size=(7, 6))
    eu = rng.normal(size=(7, 7))
    base = bilicamfuse_stage2(center, agg, eu, prm)
    for _ in range(100):
        p = rng.permutation(7)
        again = bilicamfuse_stage2(center, agg[p], eu[p], prm)
        assert np.abs(again - base).max() <= 1e-6


# ----------------------------------------------------- full bidirectional

def bilicam_params(width, seed=0):
    return BiLiCamFuseParams.from_bank(
        seeded_params(seed, BiLiCamFuseParams.shapes("bf", width)), "bf")


def fused_setup(width=5, seed=11):
    maps = tiny_maps(seed=seed, height=8, width=10, fill=0.75)
    cells = maps.valid_cells
    n = len(cells)
    rng = np.random.default_rng(seed + 1)
    feats = rng.normal(size=(n, width))
    state = LevelState(maps, feats, cells)
    uv = maps.uv[cells[:, 0], cells[:, 1]]
    pixels = PixelSet(uv, rng.normal(size=(n, width)))
    return state, pixels


def test_bilicamfuse_shape_and_finite():
    state, pixels = fused_setup()
    prm = bilicam_params(5, seed=12)
    spec = KernelSpec(5, 5, 1, 1, 4, 8.0)
    out = bilicamfuse(state, pixels, spec, 3, prm)
    assert out.shape == state.features.shape
    assert np.isfinite(out).all()
    assert (out >= 0).all()


def test_bilicamfuse_matches_per_center_stages():
    """Cross-validate the batched path against the per-center stage
    functions, walking the same neighbor tables."""
    state, pixels = fused_setup(width=4, seed=13)
    prm = bilicam_params(4, seed=14)
    spec = KernelSpec(5, 5, 1, 1, 3, 8.0)
    m = 3
    out = bilicamfuse(state, pixels, spec, m, prm)

    maps = state.maps
    cells = maps.valid_cells
    uv = maps.uv[cells[:, 0], cells[:, 1]]
    nn_point = neighbor_table(maps, cells, spec.k, (5, 5), metric="xyz", max_range=spec.range_r)
    nn_pixel = neighbor_table(maps, cells, max(spec.k, m), (5, 5), metric="uv")
    fl, fi = state.features, pixels.features

    for i in (0, len(cells) // 2, len(cells) - 1):
        # direction A: each point-neighbor aggregates its pixel neighbors
        aggs_a = []
        for j in nn_point[i]:
            km = nn_pixel[j, :m]
            eu = euclidean_info(np.broadcast_to(uv[j], (m, 2)), pixels.coords[km])
            aggs_a.append(bilicamfuse_stage1(fl[j], fi[km], eu, prm.a))
        eu2 = euclidean_info(np.broadcast_to(uv[i], (spec.k, 2)), uv[nn_point[i]])
        out_a = bilicamfuse_stage2(fl[i], np.stack(aggs_a), eu2, prm.a)
        # direction B: pixel queriers walk pixel neighborhoods
        aggs_b = []
        for j in nn_pixel[i, :spec.k]:
            km = nn_pixel[j, :m]
            eu = euclidean_info(np.broadcast_to(pixels.coords[j], (m, 2)), uv[km])
            aggs_b.append(bilicamfuse_stage1(fi[j], fl[km], eu, prm.b))
        eu2 = euclidean_info(
            np.broadcast_to(pixels.coords[i], (spec.k, 2)),
            pixels.coords[nn_pixel[i, :spec.k]],
        )
        out_b = bilicamfuse_stage2(fi[i], np.stack(aggs_b), eu2, prm.b)
        merged = np.concatenate([out_a, out_b])
        want = np.maximum(prm.norm(prm.mix(merged)), 0.0)
        assert np.abs(out[i] - want).max() < 1e-10


def test_bilicamfuse_workers_identical():
    state, pixels = fused_setup(width=6, seed=15)
    prm = bilicam_params(6, seed=16)
    spec = KernelSpec(5, 5, 1, 1, 4, 8.0)
    a = bilicamfuse(state, pixels, spec, 3, prm, workers=0)
    b = bilicamfuse(state, pixels, spec, 3, prm, workers=3)
    assert np.array_equal(a, b)


def test_bilicamfuse_validates_widths():
    state, pixels = fused_setup(width=5, seed=17)
    prm = bilicam_params(5, seed=18)
    bad_pixels = PixelSet(pixels.coords, np.zeros((len(pixels.coords), 4)))
    with pytest.raises(DimensionMismatch):
        bilicamfuse(state, bad_pixels, KernelSpec(5, 5, 1, 1, 4, 8.0), 3, prm)
    short = PixelSet(pixels.coords[:-1], pixels.features[:-1])
    with pytest.raises(DimensionMismatch):
        bilicamfuse(state, short, KernelSpec(5, 5, 1, 1, 4, 8.0), 3, prm)

"""Deterministic KITTI-format test frames.

Ray-casts a simple scene (a ground plane plus a handful of boxes) from a
spinning-scanner model into a velodyne binary, renders a matching color
image, and writes a calibration file with realistic camera constants.
Everything is seeded, so a (root, frame_id, seed) triple always produces
byte-identical files.  Useful for exercising the pipeline where no real
recordings are available.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["make_cloud", "make_image", "make_calib_text", "write_frame"]

GROUND_Z = -0.95
MAX_RANGE = 78.0
MIN_RANGE = 0.5

# Left color camera constants from a common spinning-scanner setup; the
# per-frame jitter below only nudges translations, keeping projection
# matrices well conditioned.
_P2 = (
    "7.070493000000e+02 0.000000000000e+00 6.040814000000e+02 4.575831000000e+01 "
    "0.000000000000e+00 7.070493000000e+02 1.805066000000e+02 -3.454157000000e-01 "
    "0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 4.981016000000e-03"
)
_R0 = (
    "9.999128000000e-01 1.009263000000e-02 -8.511932000000e-03 "
    "-1.012729000000e-02 9.999406000000e-01 -4.037671000000e-03 "
    "8.470675000000e-03 4.123522000000e-03 9.999556000000e-01"
)
_TR = (
    "6.927964000000e-03 -9.999722000000e-01 -2.757829000000e-03 -2.457729000000e-02 "
    "-1.162982000000e-03 2.749836000000e-03 -9.999955000000e-01 -6.127237000000e-02 "
    "9.999753000000e-01 6.931141000000e-03 -1.143899000000e-03 -3.321029000000e-01"
)


def _scene_boxes(rng: np.random.Generator) -> np.ndarray:
    """Axis-aligned boxes as (N, 6) rows of x0 x1 y0 y1 z0 z1."""
    count = int(rng.integers(10, 17))
    boxes = np.empty((count, 6))
    for i in range(count):
        cx = rng.uniform(4.0, 65.0)
        cy = rng.uniform(-35.0, 35.0)
        sx = rng.uniform(0.8, 4.5)
        sy = rng.uniform(0.8, 4.5)
        height = rng.uniform(0.5, 3.5)
        boxes[i] = (cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2,
                    GROUND_Z, min(GROUND_Z + height, 3.0))
    return boxes


def _ray_hits(dirs: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """First positive hit distance per ray against ground and boxes."""
    t_best = np.full(len(dirs), np.inf)
    dz = dirs[:, 2]
    down = dz < -1e-9
    t_ground = np.where(down, GROUND_Z / np.where(down, dz, -1.0), np.inf)
    t_best = np.minimum(t_best, np.where(t_ground > MIN_RANGE, t_ground, np.inf))
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    for x0, x1, y0, y1, z0, z1 in boxes:
        lo = (np.stack([x0, y0, z0]) - 0.0) / safe
        hi = (np.stack([x1, y1, z1]) - 0.0) / safe
        t_near = np.minimum(lo, hi).max(axis=1)
        t_far = np.maximum(lo, hi).min(axis=1)
        hit = (t_near <= t_far) & (t_near > MIN_RANGE)
        t_best = np.where(hit, np.minimum(t_best, t_near), t_best)
    return t_best


def make_cloud(
    seed: int,
    n_azimuth: int = 500,
    n_beams: int = 64,
    noise: float = 0.02,
) -> np.ndarray:
    """Simulated scan as an (N, 4) float32 array of x, y, z, reflectance.

    Beams sweep elevations from -24.4 to 2.0 degrees and azimuths across
    the forward 190 degrees, so most returns land in the usual forward
    crop box.  Range noise and per-point reflectance come from the seeded
    generator.
    """
    rng = np.random.default_rng(seed)
    boxes = _scene_boxes(rng)
    elev = np.deg2rad(np.linspace(-24.4, 2.0, n_beams))
    azim = np.deg2rad(np.linspace(-95.0, 95.0, n_azimuth))
    ee, aa = np.meshgrid(elev, azim, indexing="ij")
    ce = np.cos(ee.ravel())
    dirs = np.stack([ce * np.cos(aa.ravel()), ce * np.sin(aa.ravel()), np.sin(ee.ravel())], axis=1)
    t = _ray_hits(dirs, boxes)
    good = np.isfinite(t) & (t <= MAX_RANGE)
    t = t[good] + rng.normal(0.0, noise, good.sum())
    pts = dirs[good] * t[:, None]
    refl = rng.uniform(0.05, 0.95, len(pts))
    return np.concatenate([pts, refl[:, None]], axis=1).astype(np.float32)


def make_image(seed: int, width: int = 1242, height: int = 375) -> np.ndarray:
    """Gradient-plus-noise uint8 RGB image with a few flat patches."""
    rng = np.random.default_rng(seed + 7919)
    yy, xx = np.mgrid[0:height, 0:width]
    base = np.stack([
        120 + 80 * xx / width,
        100 + 60 * yy / height,
        90 + 40 * (xx + yy) / (width + height),
    ], axis=2)
    img = base + rng.normal(0.0, 6.0, base.shape)
    for _ in range(6):
        x0 = int(rng.integers(0, width - 80))
        y0 = int(rng.integers(0, height - 60))
        w = int(rng.integers(40, 80))
        h = int(rng.integers(30, 60))
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(40, 220, 3)
    return np.clip(img, 0, 255).astype(np.uint8)


def _jitter(row: str, rng: np.random.Generator, slots: tuple[int, ...], scale: float) -> str:
    vals = [float(v) for v in row.split()]
    for s in slots:
        vals[s] += rng.uniform(-scale, scale)
    return " ".join(f"{v:.12e}" for v in vals)


def _scale_projection(row: str, factor: float) -> str:
    # Shrinking the image shrinks the first two projection rows with it.
    vals = [float(v) for v in row.split()]
    for s in range(8):
        vals[s] *= factor
    return " ".join(f"{v:.12e}" for v in vals)


def make_calib_text(seed: int, image_scale: float = 1.0) -> str:
    """Calibration file with the usual key set; translations jittered per
    seed so frames are not all identical.  ``image_scale`` shrinks the
    projections to match a downscaled image."""
    rng = np.random.default_rng(seed + 104729)
    p2 = _jitter(_P2, rng, (3, 7, 11), 0.01)
    tr = _jitter(_TR, rng, (3, 7, 11), 0.002)
    if image_scale != 1.0:
        p2 = _scale_projection(p2, image_scale)
    other = _scale_projection(_P2, image_scale) if image_scale != 1.0 else _P2
    zero12 = " ".join(["0.000000000000e+00"] * 12)
    lines = [
        f"P0: {other}",
        f"P1: {other}",
        f"P2: {p2}",
        f"P3: {other}",
        f"R0_rect: {_R0}",
        f"Tr_velo_to_cam: {tr}",
        f"Tr_imu_to_velo: {zero12}",
    ]
    return "\n".join(lines) + "\n"


def write_frame(
    root,
    frame_id: str,
    seed: int,
    image_scale: float = 1.0,
    **cloud_kw,
) -> None:
    """Write velodyne/<id>.bin, image_2/<id>.png and calib/<id>.txt.

    ``image_scale`` below 1 renders a proportionally smaller image and
    scales the calibration to it, for quick-running fixtures.
    """
    root = Path(root)
    for sub in ("velodyne", "image_2", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    cloud = make_cloud(seed, **cloud_kw)
    (root / "velodyne" / f"{frame_id}.bin").write_bytes(cloud.tobytes())
    width = max(16, round(1242 * image_scale))
    height = max(16, round(375 * image_scale))
    Image.fromarray(make_image(seed, width, height)).save(root / "image_2" / f"{frame_id}.png")
    (root / "calib" / f"{frame_id}.txt").write_text(make_calib_text(seed, image_scale))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="generate KITTI-format test frames")
    ap.add_argument("out", help="output directory")
    ap.add_argument("--frames", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--azimuth", type=int, default=500, help="rays per beam")
    ap.add_argument("--beams", type=int, default=64)
    args = ap.parse_args(argv)
    for i in range(args.frames):
        frame_id = f"{i:06d}"
        write_frame(args.out, frame_id, args.seed + i,
                    n_azimuth=args.azimuth, n_beams=args.beams)
        print(f"wrote frame {frame_id}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

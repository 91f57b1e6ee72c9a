"""Frame orchestration: load, project, encode, fuse, decode, benchmark.

``run_frame`` drives a KITTI-format frame through the full front-end and
returns a per-point feature matrix over the full-resolution valid cells
together with a stage-timed report.  ``bench_sampling`` times the
stride + windowed-KNN path against a textbook global farthest-point
sampling + brute-force KNN baseline on the same cropped cloud.

All learned tensors come from one named parameter bank, either generated
from a 64-bit seed or loaded from a parameter container, so repeated runs
are bit-identical.
"""

from __future__ import annotations

import struct
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import median
from typing import Mapping

import numpy as np
from PIL import Image

from .encoder import (
    BOOTSTRAP_WIDTH,
    DEFAULT_KERNELS,
    POINT_WIDTHS,
    KernelSpec,
    LevelParams,
    LevelState,
    bootstrap_state,
    decode_to_full,
    encode_level,
    neighbor_table,
    sample_centers,
)
from .errors import ConfigError
from .fusion import (
    BiLiCamFuseParams,
    LiCamFuseParams,
    PixelSet,
    bilicamfuse,
    euclidean_info,
    licamfuse,
)
from .geometry import (
    DEFAULT_CROP,
    DEFAULT_IMAGE_SIZE,
    CropBox,
    SphericalGrid,
    crop_points,
    parse_calibration,
    preset_grid,
    read_velodyne,
)
from .imagefeat import (
    IMAGE_WIDTHS,
    ImageBlockParams,
    PyramidStageParams,
    bilinear_sample_many,
    feature_pyramid,
    pad_image,
)
from .maps import build_synced_maps, occupancy
from .params import Dense, dense_shapes, load_params, seeded_params

__all__ = [
    "FUSION_MODES",
    "DEFAULT_SEED",
    "PipelineConfig",
    "FrameBundle",
    "BenchReport",
    "param_shapes",
    "build_parameters",
    "load_image",
    "run_frame",
    "bench_sampling",
    "farthest_point_sample",
    "global_knn",
    "dump_features",
    "load_features",
    "FEATURE_MAGIC",
]

FUSION_MODES = ("none", "licamfuse", "bilicamfuse")
DEFAULT_SEED = 1318

FEATURE_MAGIC = b"FFPA"
FEATURE_VERSION = 1

_CONFIG_KEYS = {
    "preset", "fusion", "seed", "params", "k_neighbors", "m_neighbors",
    "workers", "image_width", "image_height",
    "crop_x_min", "crop_x_max", "crop_y_min", "crop_y_max",
    "crop_z_min", "crop_z_max", "range_r",
}


@dataclass(frozen=True)
class PipelineConfig:
    """Complete run configuration; validated on construction."""

    preset: str = "40x275"
    fusion: str = "licamfuse"
    seed: int = DEFAULT_SEED
    params_path: str = None
    k_neighbors: int = 16
    m_neighbors: int = 8
    workers: int = 0
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    crop: CropBox = DEFAULT_CROP
    kernels: tuple[KernelSpec, ...] = DEFAULT_KERNELS
    grid: SphericalGrid = None

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if len(self.kernels) != len(POINT_WIDTHS):
            raise ConfigError(f"expected {len(POINT_WIDTHS)} kernel specs")
        if self.k_neighbors < 1 or self.m_neighbors < 1:
            raise ConfigError("neighbor counts must be at least 1")
        if self.workers < 0:
            raise ConfigError("workers must be non-negative")
        if self.image_size[0] < 4 or self.image_size[1] < 4:
            raise ConfigError(f"image size {self.image_size} is too small")
        if self.grid is None:
            try:
                object.__setattr__(self, "grid", preset_grid(self.preset))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        """Read ``key = value`` lines; '#' starts a comment.  Keyword
        overrides win over file values."""
        fields = {}
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            fields[key] = value.strip()
        merged = {k: v for k, v in fields.items()}
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls._from_strings(merged)

    @classmethod
    def _from_strings(cls, fields: Mapping[str, object]) -> "PipelineConfig":
        def number(key, kind, default):
            if key not in fields:
                return default
            try:
                return kind(fields[key])
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key}: {fields[key]!r}") from None

        crop = CropBox(
            x=(number("crop_x_min", float, DEFAULT_CROP.x[0]),
               number("crop_x_max", float, DEFAULT_CROP.x[1])),
            y=(number("crop_y_min", float, DEFAULT_CROP.y[0]),
               number("crop_y_max", float, DEFAULT_CROP.y[1])),
            z=(number("crop_z_min", float, DEFAULT_CROP.z[0]),
               number("crop_z_max", float, DEFAULT_CROP.z[1])),
        )
        kernels = DEFAULT_KERNELS
        if "range_r" in fields:
            try:
                radii = [float(v) for v in str(fields["range_r"]).split(",")]
            except ValueError:
                raise ConfigError(f"bad range_r list: {fields['range_r']!r}") from None
            if len(radii) != len(DEFAULT_KERNELS):
                raise ConfigError(f"range_r needs {len(DEFAULT_KERNELS)} values")
            kernels = tuple(replace(k, range_r=r) for k, r in zip(DEFAULT_KERNELS, radii))
        return cls(
            preset=str(fields.get("preset", "40x275")),
            fusion=str(fields.get("fusion", "licamfuse")),
            seed=number("seed", int, DEFAULT_SEED),
            params_path=str(fields["params"]) if fields.get("params") else None,
            k_neighbors=number("k_neighbors", int, 16),
            m_neighbors=number("m_neighbors", int, 8),
            workers=number("workers", int, 0),
            image_size=(
                number("image_width", int, DEFAULT_IMAGE_SIZE[0]),
                number("image_height", int, DEFAULT_IMAGE_SIZE[1]),
            ),
            crop=crop,
            kernels=kernels,
        )


@dataclass(frozen=True)
class FrameBundle:
    """Paths of one KITTI-format frame."""

    velodyne: Path
    image: Path
    calib: Path
    frame_id: str = ""

    @classmethod
    def from_dir(cls, root, frame_id: str) -> "FrameBundle":
        root = Path(root)
        bundle = cls(
            velodyne=root / "velodyne" / f"{frame_id}.bin",
            image=root / "image_2" / f"{frame_id}.png",
            calib=root / "calib" / f"{frame_id}.txt",
            frame_id=frame_id,
        )
        for path in (bundle.velodyne, bundle.image, bundle.calib):
            if not path.is_file():
                raise FileNotFoundError(f"frame file missing: {path}")
        return bundle


@dataclass
class BenchReport:
    """Per-stage wall times and summary counters for one run."""

    preset: str
    fusion: str
    occupancy: float
    points_per_level: list[int]
    stage_ms: dict[str, float] = field(default_factory=dict)
    total_ms: float = 0.0
    baseline: dict[str, float] = None

    def summary(self) -> str:
        lines = [
            f"preset {self.preset}  fusion {self.fusion}",
            f"occupancy {self.occupancy:.4f}",
            "points per level " + " -> ".join(str(n) for n in self.points_per_level),
        ]
        for name, ms in self.stage_ms.items():
            lines.append(f"  {name:<18} {ms:9.2f} ms")
        lines.append(f"  {'total':<18} {self.total_ms:9.2f} ms")
        if self.baseline:
            for name, value in self.baseline.items():
                tag = " ms" if name.endswith("_ms") else ""
                lines.append(f"  baseline {name:<16} {value:9.2f}{tag}")
        return "\n".join(lines)


class _StageClock:
    def __init__(self):
        self.ms: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = (time.perf_counter() - start) * 1e3
            self.ms[name] = self.ms.get(name, 0.0) + elapsed


def param_shapes(cfg: PipelineConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of every tensor the configured pipeline needs."""
    shapes: dict[str, tuple[int, ...]] = {}
    shapes.update(dense_shapes("lift", 4, BOOTSTRAP_WIDTH))
    in_widths = (BOOTSTRAP_WIDTH,) + POINT_WIDTHS[:-1]
    for lvl, (cin, cout) in enumerate(zip(in_widths, POINT_WIDTHS), start=1):
        shapes.update(LevelParams.shapes(f"enc{lvl}", cin, cout))
    # Decoder steps walk coarse to fine and finish at the bootstrap width.
    carried = POINT_WIDTHS[-1]
    for step, skip in enumerate((POINT_WIDTHS[2], POINT_WIDTHS[1], POINT_WIDTHS[0], BOOTSTRAP_WIDTH)):
        shapes.update(dense_shapes(f"dec{step}.mix", carried + skip, skip))
        carried = skip
    if cfg.fusion != "none":
        shapes.update(ImageBlockParams.shapes("img.block"))
        for stage, (cin, cout) in enumerate(zip(IMAGE_WIDTHS[:-1], IMAGE_WIDTHS[1:]), start=2):
            shapes.update(PyramidStageParams.shapes(f"img.stage{stage}", cin, cout))
        for lvl, (img_c, pt_c) in enumerate(zip(IMAGE_WIDTHS, POINT_WIDTHS), start=1):
            shapes.update(dense_shapes(f"imglift{lvl}", img_c, pt_c))
        shapes.update(dense_shapes("imglift0", IMAGE_WIDTHS[0], BOOTSTRAP_WIDTH))
        shapes.update(LiCamFuseParams.shapes("licam0", BOOTSTRAP_WIDTH))
        if cfg.fusion == "licamfuse":
            for lvl, width in enumerate(POINT_WIDTHS, start=1):
                shapes.update(LiCamFuseParams.shapes(f"licam{lvl}", width))
        else:
            for lvl, width in enumerate(POINT_WIDTHS, start=1):
                shapes.update(BiLiCamFuseParams.shapes(f"bilicam{lvl}", width))
    return shapes


def build_parameters(cfg: PipelineConfig) -> dict[str, np.ndarray]:
    """Seeded or file-loaded bank matching ``param_shapes(cfg)``."""
    shapes = param_shapes(cfg)
    if cfg.params_path is None:
        return seeded_params(cfg.seed, shapes)
    bank = load_params(cfg.params_path)
    for name, shape in shapes.items():
        if name not in bank:
            raise ConfigError(f"parameter file lacks tensor {name!r}")
        if tuple(bank[name].shape) != tuple(shape):
            raise ConfigError(
                f"tensor {name!r} has shape {bank[name].shape}, expected {shape}"
            )
    return bank


def load_image(path) -> np.ndarray:
    """Decode a PNG/JPEG into float32 RGB scaled to [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def _fusion_spec(cfg: PipelineConfig, level: int) -> KernelSpec:
    base = cfg.kernels[level - 1]
    return KernelSpec(base.kh, base.kw, 1, 1, cfg.k_neighbors, base.range_r)


def _sample_pixels(grid, state: LevelState, lift: Dense) -> PixelSet:
    cells = state.maps.valid_cells
    uv = state.maps.uv[cells[:, 0], cells[:, 1]]
    sampled = bilinear_sample_many(grid, uv)
    return PixelSet(uv, lift(sampled))


def run_frame(cfg: PipelineConfig, frame: FrameBundle):
    """Run the full front-end on one frame.

    Returns (features, report): the (N0, C) float64 matrix over the
    full-resolution valid cells and the stage-timed BenchReport.
    """
    clock = _StageClock()
    t_start = time.perf_counter()
    with clock.stage("load"):
        calib = parse_calibration(Path(frame.calib).read_text())
        points = read_velodyne(frame.velodyne)
        image = load_image(frame.image) if cfg.fusion != "none" else None
    with clock.stage("crop"):
        cropped = crop_points(points, cfg.crop)
    with clock.stage("maps"):
        maps0 = build_synced_maps(cropped, calib, cfg.grid, cfg.image_size)
    with clock.stage("parameters"):
        bank = build_parameters(cfg)
        lift = Dense.from_bank(bank, "lift")
        enc = [LevelParams.from_bank(bank, f"enc{lvl}") for lvl in range(1, 5)]
        dec = [Dense.from_bank(bank, f"dec{step}.mix") for step in range(4)]
    grids = None
    if cfg.fusion != "none":
        with clock.stage("image_features"):
            block = ImageBlockParams.from_bank(bank, "img.block")
            stages = [PyramidStageParams.from_bank(bank, f"img.stage{s}") for s in (2, 3, 4)]
            grids = feature_pyramid(pad_image(image, cfg.image_size), block, stages)
    state = bootstrap_state(maps0, lift)
    states = [state]
    for lvl in range(1, 5):
        with clock.stage(f"encode_level{lvl}"):
            state = encode_level(state, cfg.kernels[lvl - 1], enc[lvl - 1], cfg.workers)
        if cfg.fusion != "none":
            with clock.stage(f"fuse_level{lvl}"):
                img_lift = Dense.from_bank(bank, f"imglift{lvl}")
                pixels = _sample_pixels(grids[lvl - 1], state, img_lift)
                if cfg.fusion == "licamfuse":
                    prm = LiCamFuseParams.from_bank(bank, f"licam{lvl}")
                    cells = state.maps.valid_cells
                    uv = state.maps.uv[cells[:, 0], cells[:, 1]]
                    fused = licamfuse(
                        state.features, pixels.features,
                        euclidean_info(uv, pixels.coords), prm,
                    )
                else:
                    prm = BiLiCamFuseParams.from_bank(bank, f"bilicam{lvl}")
                    fused = bilicamfuse(
                        state, pixels, _fusion_spec(cfg, lvl),
                        cfg.m_neighbors, prm, cfg.workers,
                    )
                state = LevelState(state.maps, fused, state.center_index)
        states.append(state)
    with clock.stage("decode"):
        features = decode_to_full(states[::-1], maps0, dec)
    if cfg.fusion != "none":
        with clock.stage("fuse_full"):
            full_state = LevelState(maps0, features, maps0.valid_cells)
            pixels = _sample_pixels(grids[0], full_state, Dense.from_bank(bank, "imglift0"))
            prm = LiCamFuseParams.from_bank(bank, "licam0")
            cells = maps0.valid_cells
            uv = maps0.uv[cells[:, 0], cells[:, 1]]
            features = licamfuse(features, pixels.features, euclidean_info(uv, pixels.coords), prm)
    total_ms = (time.perf_counter() - t_start) * 1e3
    report = BenchReport(
        preset=cfg.preset,
        fusion=cfg.fusion,
        occupancy=occupancy(maps0),
        points_per_level=[len(s.features) for s in states],
        stage_ms=clock.ms,
        total_ms=total_ms,
    )
    return features, report


def farthest_point_sample(xyz: np.ndarray, count: int) -> np.ndarray:
    """Textbook O(N * S) farthest point sampling starting at index 0."""
    xyz = np.asarray(xyz, dtype=np.float64)
    n = len(xyz)
    count = min(count, n)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = 0
    best = ((xyz - xyz[0]) ** 2).sum(axis=1)
    for i in range(1, count):
        idx = int(np.argmax(best))
        chosen[i] = idx
        delta = xyz - xyz[idx]
        best = np.minimum(best, (delta * delta).sum(axis=1))
    return chosen


def global_knn(xyz: np.ndarray, centers: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Brute-force K nearest points for each center index, whole cloud."""
    xyz = np.asarray(xyz, dtype=np.float64)
    k = min(k, len(xyz))
    out = np.empty((len(centers), k), dtype=np.int64)
    for beg in range(0, len(centers), chunk):
        sel = centers[beg:beg + chunk]
        delta = xyz[sel][:, None, :] - xyz[None, :, :]
        dist = (delta * delta).sum(axis=2)
        part = np.argpartition(dist, k - 1, axis=1)[:, :k]
        dsel = np.take_along_axis(dist, part, axis=1)
        order = np.lexsort((part, dsel))
        out[beg:beg + chunk] = np.take_along_axis(part, order, axis=1)
    return out


def bench_sampling(cfg: PipelineConfig, frame: FrameBundle, repeats: int = 5) -> BenchReport:
    """Median timing of the windowed sampling path against the global
    farthest-point + brute-force KNN baseline.

    Each repeat times sample_centers + the full windowed neighbor table,
    then farthest point sampling to the same center count plus global
    KNN.  A warm-up round runs first and is excluded from the medians.
    """
    if repeats < 3:
        raise ValueError("need at least 3 repeats for a stable median")
    calib = parse_calibration(Path(frame.calib).read_text())
    points = read_velodyne(frame.velodyne)
    cropped = crop_points(points, cfg.crop)
    maps0 = build_synced_maps(cropped, calib, cfg.grid, cfg.image_size)
    spec = cfg.kernels[0]
    xyz = cropped[:, :3]

    def windowed():
        centers = sample_centers(maps0, spec)
        neighbor_table(maps0, centers, spec.k, (spec.kh, spec.kw),
                       metric="xyz", max_range=spec.range_r)
        return len(centers)

    def global_path(count):
        chosen = farthest_point_sample(xyz, count)
        global_knn(xyz, chosen, spec.k)

    n_centers = windowed()
    global_path(n_centers)
    windowed_times = []
    global_times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        windowed()
        windowed_times.append((time.perf_counter() - t0) * 1e3)
        t0 = time.perf_counter()
        global_path(n_centers)
        global_times.append((time.perf_counter() - t0) * 1e3)
    report = BenchReport(
        preset=cfg.preset,
        fusion=cfg.fusion,
        occupancy=occupancy(maps0),
        points_per_level=[int(maps0.valid.sum())],
        stage_ms={
            "windowed_median": median(windowed_times),
            "global_median": median(global_times),
        },
        total_ms=sum(windowed_times) + sum(global_times),
        baseline={
            "windowed_ms": median(windowed_times),
            "global_fps_knn_ms": median(global_times),
            "centers": float(n_centers),
            "points": float(len(xyz)),
            "repeats": float(repeats),
        },
    )
    return report


def dump_features(matrix: np.ndarray, path) -> None:
    """Write a feature matrix to the flat container.

    Layout: magic ``FFPA``, u32 version, u32 rows, u32 cols, then the
    row-major float32 payload, everything little-endian.
    """
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"feature dump expects a 2D matrix, got shape {arr.shape}")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def load_features(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature container")
    version, rows, cols = struct.unpack_from("<III", blob, 4)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    want = rows * cols
    data = np.frombuffer(blob, dtype="<f4", count=want, offset=16)
    if 16 + 4 * want != len(blob):
        raise ValueError(f"{path}: payload size mismatch")
    return data.reshape(rows, cols).copy()

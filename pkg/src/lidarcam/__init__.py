"""LiDAR-camera fusion front-end over ordered spherical maps.

The package turns a KITTI-format frame (velodyne scan, left color image,
calibration file) into per-point features: points are cropped, projected
into an ordered spherical map synchronized with their image coordinates,
encoded through a strided point pyramid with windowed neighbor search,
fused with image features per level, and decoded back to full
resolution.
"""

from .errors import (
    CalibrationError,
    ConfigError,
    DimensionMismatch,
    EmptyCloud,
    MalformedNumber,
    MissingKey,
    OversizeImage,
    VelodyneFormatError,
    ZeroNormPoint,
)
from .geometry import (
    AZIMUTH_WINDOW,
    DEFAULT_CROP,
    DEFAULT_IMAGE_SIZE,
    ELEVATION_WINDOW,
    PRESET_NAMES,
    CalibrationSet,
    CropBox,
    SphericalGrid,
    crop_points,
    image_coords,
    parse_calibration,
    preset_grid,
    project_spherical,
    project_to_image,
    read_velodyne,
    serialize_calibration,
    spherical_cells,
)
from .maps import SyncedMaps, build_synced_maps, dump_maps, load_maps, occupancy, subsample
from .params import Dense, Norm, load_params, save_params, seeded_params, seeded_tensor
from .encoder import (
    DEFAULT_KERNELS,
    KernelSpec,
    LevelParams,
    LevelState,
    bootstrap_state,
    decode_to_full,
    dump_level,
    encode_level,
    interpolate_features,
    knn_in_kernel,
    load_level,
    neighbor_table,
    sample_centers,
)
from .imagefeat import (
    ImageBlockParams,
    ImageFeatureGrid,
    PyramidStageParams,
    bilinear_sample,
    extract_image_features,
    feature_pyramid,
    pad_image,
)
from .fusion import (
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
from .pipeline import (
    BenchReport,
    FrameBundle,
    PipelineConfig,
    bench_sampling,
    build_parameters,
    dump_features,
    load_features,
    load_image,
    param_shapes,
    run_frame,
)

__version__ = "0.1.0"

"""Named parameter tensors: file container, seeded generation, layer types.

Tensors live in a flat dict keyed by dotted names ("enc1.mix.w").  The
name suffix picks the initializer in seeded mode: ".w" draws scaled
normals, ".b"/".beta"/".mean" start at zero, ".gamma"/".var" at one.
Each tensor derives its stream from (seed, crc32(name)), so values do not
depend on generation order or on which other tensors exist.

On disk a bank is a little-endian container: magic ``FFPW``, u32 version,
u32 tensor count, then per tensor a u32 name length, the UTF-8 name, u32
rank, u32 dims and a float32 payload.  Entries are written name-sorted so
equal banks serialize to equal bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DimensionMismatch

PARAMS_MAGIC = b"FFPW"
PARAMS_VERSION = 1

NORM_EPS = 1e-5

_ZERO_SUFFIXES = (".b", ".beta", ".mean")
_ONE_SUFFIXES = (".gamma", ".var")


def seeded_tensor(seed: int, name: str, shape: tuple[int, ...]) -> np.ndarray:
    """Deterministically generate one named tensor as float32."""
    key = zlib.crc32(name.encode("utf-8"))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(key,))))
    if name.endswith(".w"):
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        data = rng.standard_normal(shape) / np.sqrt(fan_in)
    elif name.endswith(_ZERO_SUFFIXES):
        data = np.zeros(shape)
    elif name.endswith(_ONE_SUFFIXES):
        data = np.ones(shape)
    else:
        raise ValueError(f"no initializer rule for tensor name {name!r}")
    return data.astype(np.float32)


def seeded_params(seed: int, shapes: Mapping[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    return {name: seeded_tensor(seed, name, tuple(shape)) for name, shape in shapes.items()}


def save_params(tensors: Mapping[str, np.ndarray], path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<II", PARAMS_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter container")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    tensors: dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
        tensors[name] = arr.copy()
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return tensors


@dataclass(frozen=True)
class Dense:
    """Affine layer y = x @ w + b, computed in float64."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise DimensionMismatch(f"dense layer shapes {w.shape} / {b.shape}")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)

    @property
    def in_width(self) -> int:
        return self.w.shape[0]

    @property
    def out_width(self) -> int:
        return self.w.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_width:
            raise DimensionMismatch(
                f"dense layer expects width {self.in_width}, got {x.shape[-1]}"
            )
        return x @ self.w + self.b

    @classmethod
    def from_bank(cls, bank: Mapping[str, np.ndarray], prefix: str) -> "Dense":
        try:
            return cls(bank[f"{prefix}.w"], bank[f"{prefix}.b"])
        except KeyError as exc:
            raise KeyError(f"parameter bank is missing {prefix}.w/.b") from exc


@dataclass(frozen=True)
class Norm:
    """Per-channel normalization with stored statistics (inference form)."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = NORM_EPS

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        for field_name in ("gamma", "beta", "mean", "var"):
            arr = np.asarray(getattr(self, field_name), dtype=np.float64)
            if arr.shape != g.shape:
                raise DimensionMismatch("normalization parameter shapes differ")
            object.__setattr__(self, field_name, arr)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        scale = self.gamma / np.sqrt(self.var + self.eps)
        shift = self.beta - self.mean * scale
        return x * scale.astype(x.dtype) + shift.astype(x.dtype)

    @classmethod
    def from_bank(cls, bank: Mapping[str, np.ndarray], prefix: str) -> "Norm":
        try:
            return cls(
                bank[f"{prefix}.gamma"],
                bank[f"{prefix}.beta"],
                bank[f"{prefix}.mean"],
                bank[f"{prefix}.var"],
            )
        except KeyError as exc:
            raise KeyError(f"parameter bank is missing {prefix} norm tensors") from exc


def norm_shapes(prefix: str, width: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.gamma": (width,),
        f"{prefix}.beta": (width,),
        f"{prefix}.mean": (width,),
        f"{prefix}.var": (width,),
    }


def dense_shapes(prefix: str, in_width: int, out_width: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w": (in_width, out_width), f"{prefix}.b": (out_width,)}

"""Synthetic voxel datasets and the two binary file formats.

Voxel grid file (little-endian)::

    b"VOX3" | u8 version (1) | u8 dtype tag | u16 resolution | payload

dtype tag 0 is a binary grid bit-packed in C order (``np.packbits`` with
little bit order, ``ceil(R^3 / 8)`` bytes); tag 1 is ``R^3`` float32 values.

Checkpoint file (little-endian)::

    b"VWT1" | u32 tensor count | per tensor:
        u32 name length | UTF-8 name | u8 rank | rank x u32 extents |
        u8 dtype tag | payload

with dtype tags 0 = float32, 1 = float64, 2 = int64.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import child_seed, rng

VOX_MAGIC = b"VOX3"
VOX_VERSION = 1
CKPT_MAGIC = b"VWT1"
RESOLUTIONS = (8, 16, 32, 64)
LATENT_DIM = 2048

_VOX_BINARY, _VOX_FLOAT = 0, 1
_CKPT_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CKPT_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class FormatError(ValueError):
    """Base class for every malformed-file error."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class VersionError(FormatError):
    pass


class CorruptError(FormatError):
    pass


class CheckpointShapeError(ValueError):
    def __init__(self, name: str, message: str):
        super().__init__(message)
        self.name = name


# ---------------------------------------------------------------- voxel grid

@dataclass
class VoxelGrid:
    occupancy: np.ndarray
    label: int | None = None

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 3 or len(set(occ.shape)) != 1:
            raise ValueError(f"voxel grid must be cubic, got shape {occ.shape}")
        if occ.dtype != np.bool_:
            occ = occ.astype(np.float32)
            if occ.size and (occ.min() < 0 or occ.max() > 1):
                raise ValueError("occupancy values must lie in [0, 1]")
        self.occupancy = occ

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def is_binary(self) -> bool:
        return self.occupancy.dtype == np.bool_


def _check_magic(data: bytes, magic: bytes, what: str) -> None:
    if data[:4] != magic:
        if len(data) < 4 and magic.startswith(data):
            raise TruncatedError(f"{what} truncated inside the magic bytes")
        raise BadMagicError(f"not a {what} (bad magic)")


def encode_voxels(grid: VoxelGrid) -> bytes:
    R = grid.resolution
    if grid.is_binary:
        payload = np.packbits(grid.occupancy.reshape(-1), bitorder="little").tobytes()
        tag = _VOX_BINARY
    else:
        payload = grid.occupancy.astype("<f4").tobytes()
        tag = _VOX_FLOAT
    return VOX_MAGIC + struct.pack("<BBH", VOX_VERSION, tag, R) + payload


def decode_voxels(data: bytes) -> VoxelGrid:
    _check_magic(data, VOX_MAGIC, "voxel grid file")
    if len(data) < 8:
        raise TruncatedError("voxel header truncated")
    version, tag, R = struct.unpack_from("<BBH", data, 4)
    if version != VOX_VERSION:
        raise VersionError(f"unsupported voxel file version {version}")
    if R == 0:
        raise CorruptError("zero resolution")
    n = R**3
    body = data[8:]
    if tag == _VOX_BINARY:
        need = (n + 7) // 8
        if len(body) < need:
            raise TruncatedError(f"payload has {len(body)} bytes, expected {need}")
        if len(body) > need:
            raise CorruptError("trailing bytes after payload")
        bits = np.unpackbits(np.frombuffer(body, np.uint8), count=n, bitorder="little")
        return VoxelGrid(bits.astype(bool).reshape(R, R, R))
    if tag == _VOX_FLOAT:
        need = 4 * n
        if len(body) < need:
            raise TruncatedError(f"payload has {len(body)} bytes, expected {need}")
        if len(body) > need:
            raise CorruptError("trailing bytes after payload")
        vals = np.frombuffer(body, "<f4").astype(np.float32).reshape(R, R, R)
        if not np.all(np.isfinite(vals)) or vals.min() < 0 or vals.max() > 1:
            raise CorruptError("occupancy values outside [0, 1]")
        return VoxelGrid(vals)
    raise CorruptError(f"unknown voxel dtype tag {tag}")


def write_voxels(grid: VoxelGrid, path) -> None:
    Path(path).write_bytes(encode_voxels(grid))


def read_voxels(path) -> VoxelGrid:
    return decode_voxels(Path(path).read_bytes())


# ---------------------------------------------------------------- checkpoints

def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _CKPT_TAGS.get(arr.dtype)
        if tag is None:
            raise TypeError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<B", tag))
        out.append(np.ascontiguousarray(arr, dtype=_CKPT_DTYPES[tag]).tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    _check_magic(data, CKPT_MAGIC, "checkpoint file")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"checkpoint truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptError("tensor name is not valid UTF-8") from None
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _CKPT_DTYPES:
            raise CorruptError(f"tensor {name!r}: unknown dtype tag {tag}")
        dt = _CKPT_DTYPES[tag]
        n = math.prod(shape)
        arr = np.frombuffer(take(n * dt.itemsize), dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(data):
        raise CorruptError("trailing bytes after last tensor")
    return tensors


def save_checkpoint(tensors: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path, network=None) -> dict[str, np.ndarray]:
    """Read a checkpoint; with ``network`` given, validate and load it in place."""
    tensors = decode_checkpoint(Path(path).read_bytes())
    if network is not None:
        check_against(tensors, network)
        network.load_state(tensors)
    return tensors


def check_against(tensors: dict[str, np.ndarray], network) -> None:
    for name, arr in network.state().items():
        if name not in tensors:
            raise CheckpointShapeError(name, f"tensor {name!r} missing from checkpoint")
        if tensors[name].shape != arr.shape:
            raise CheckpointShapeError(
                name, f"tensor {name!r}: checkpoint shape {tensors[name].shape} != model shape {arr.shape}")


def trainable_count(tensors: dict[str, np.ndarray]) -> int:
    return sum(a.size for name, a in tensors.items() if not name.endswith(("running_mean", "running_var")))


# ------------------------------------------------------------ synthetic data

FAMILIES = ("sphere", "box", "cross", "shell", "cylinder", "torus", "cone", "slab",
            "ring", "capsule", "pyramid", "dumbbell", "tube")

# shape parameter vector: class one-hot, center offset (3), size (3), axis one-hot (3)
_PARAM_DIM = len(FAMILIES) + 9
_PROJECTION_SEED = 0x5EED_0F_F1E1D


@dataclass
class SynthSample:
    index: int
    label: int
    family: str
    params: np.ndarray
    latent: np.ndarray
    voxels: VoxelGrid


def _grid(res: int):
    c = (np.arange(res) + 0.5) / res * 2 - 1  # voxel centers in [-1, 1]
    return np.meshgrid(c, c, c, indexing="ij")


def sphere(res: int, center, radius: float) -> np.ndarray:
    """Binary ball of ``radius`` voxels around ``center`` given in voxel coordinates."""
    idx = np.arange(res) + 0.5
    z, y, x = np.meshgrid(idx, idx, idx, indexing="ij")
    cz, cy, cx = center
    return (z - cz) ** 2 + (y - cy) ** 2 + (x - cx) ** 2 <= radius**2


def rasterize(family: str, res: int, center, size, axis: int) -> np.ndarray:
    """Binary occupancy of a parametric solid; coordinates are in [-1, 1]."""
    Z, Y, X = _grid(res)
    coords = [Z - center[0], Y - center[1], X - center[2]]
    # the solid's main axis is rotated onto tensor axis ``axis``
    a = coords[axis]
    b, c = [coords[i] for i in range(3) if i != axis]
    s0, s1, s2 = size
    r_bc = np.sqrt(b * b + c * c)
    if family == "sphere":
        return (a / s0) ** 2 + (b / s0) ** 2 + (c / s0) ** 2 <= 1
    if family == "box":
        return (np.abs(a) <= s0) & (np.abs(b) <= s1) & (np.abs(c) <= s2)
    if family == "cross":
        t = 0.3 * s1
        return (((np.abs(a) <= s0) & (np.abs(b) <= t) & (np.abs(c) <= t))
                | ((np.abs(b) <= s0) & (np.abs(a) <= t) & (np.abs(c) <= t))
                | ((np.abs(c) <= s0) & (np.abs(a) <= t) & (np.abs(b) <= t)))
    if family == "shell":
        r = np.sqrt(a * a + b * b + c * c)
        return (r <= s0) & (r >= 0.6 * s0)
    if family == "cylinder":
        return (np.abs(a) <= s0) & (r_bc <= s1)
    if family == "torus":
        R, r = s0, 0.4 * s1
        return (r_bc - R) ** 2 + a * a <= r * r
    if family == "cone":
        h = (a + s0) / (2 * s0)
        return (np.abs(a) <= s0) & (r_bc <= s1 * (1 - h))
    if family == "slab":
        return (np.abs(a) <= 0.25 * s0) & (np.abs(b) <= s1) & (np.abs(c) <= s2)
    if family == "ring":
        return (np.abs(a) <= 0.3 * s0) & (r_bc <= s1) & (r_bc >= 0.6 * s1)
    if family == "capsule":
        ac = np.clip(a, -s0 * 0.6, s0 * 0.6)
        return (a - ac) ** 2 + b * b + c * c <= (0.5 * s1) ** 2
    if family == "pyramid":
        h = (a + s0) / (2 * s0)
        half = s1 * (1 - h)
        return (np.abs(a) <= s0) & (np.abs(b) <= half) & (np.abs(c) <= half)
    if family == "dumbbell":
        r = 0.45 * s1
        ends = ((a - s0 * 0.6) ** 2 + b * b + c * c <= r * r) | ((a + s0 * 0.6) ** 2 + b * b + c * c <= r * r)
        return ends | ((np.abs(a) <= s0 * 0.6) & (r_bc <= 0.35 * r))
    if family == "tube":
        return (np.abs(a) <= s0) & (r_bc <= s1) & (r_bc >= 0.55 * s1)
    raise ValueError(f"unknown shape family {family!r}")


def _projection() -> np.ndarray:
    return rng(_PROJECTION_SEED).standard_normal((_PARAM_DIM, LATENT_DIM)) / math.sqrt(_PARAM_DIM)


def make_sample(index: int, seed: int, resolution: int, n_classes: int,
                noise: float = 0.01, projection: np.ndarray | None = None) -> SynthSample:
    """Sample ``index`` of the dataset; a pure function of ``(seed, index)``."""
    g = rng(child_seed(seed, index))
    label = index % n_classes
    family = FAMILIES[label]
    center = g.uniform(-0.15, 0.15, size=3)
    size = g.uniform(0.45, 0.75, size=3)
    axis = int(g.integers(0, 3))
    occ = rasterize(family, resolution, center, size, axis)
    if not occ.any():  # degenerate draw at tiny resolutions; keep the sample nonempty
        occ[tuple(np.array(occ.shape) // 2)] = True
    params = np.zeros(_PARAM_DIM)
    params[label] = 1.0
    params[len(FAMILIES):len(FAMILIES) + 3] = center / 0.15
    params[len(FAMILIES) + 3:len(FAMILIES) + 6] = (size - 0.6) / 0.15
    params[len(FAMILIES) + 6 + axis] = 1.0
    proj = _projection() if projection is None else projection
    latent = params @ proj + noise * g.standard_normal(LATENT_DIM)
    return SynthSample(index, label, family, params, latent.astype(np.float32),
                       VoxelGrid(occ, label))


def gen_dataset(n_samples: int, resolution: int = 32, n_classes: int = 13, seed: int = 0,
                noise: float = 0.01) -> list[SynthSample]:
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    if not 2 <= n_classes <= len(FAMILIES):
        raise ValueError(f"n_classes must be in [2, {len(FAMILIES)}], got {n_classes}")
    if n_samples < 0:
        raise ValueError("n_samples must be nonnegative")
    proj = _projection()
    return [make_sample(i, seed, resolution, n_classes, noise, proj) for i in range(n_samples)]


def stack_voxels(samples: list[SynthSample]) -> np.ndarray:
    """``(N, 1, R, R, R)`` float32 occupancy array."""
    return np.stack([s.voxels.occupancy.astype(np.float32) for s in samples])[:, None]


def stack_latents(samples: list[SynthSample]) -> np.ndarray:
    return np.stack([s.latent for s in samples])


def stack_labels(samples: list[SynthSample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


# ------------------------------------------------------------ dataset folders

MANIFEST = "samples.csv"
LATENTS = "latents.vwt"


def write_dataset(samples: list[SynthSample], directory) -> Path:
    """Write ``samples.csv``, one ``.vox`` file per sample and ``latents.vwt``."""
    d = Path(directory)
    (d / "voxels").mkdir(parents=True, exist_ok=True)
    with open(d / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "family", "voxels"])
        for s in samples:
            rel = f"voxels/{s.index:05d}.vox"
            write_voxels(s.voxels, d / rel)
            w.writerow([s.index, s.label, s.family, rel])
    save_checkpoint({"latents": stack_latents(samples) if samples else np.zeros((0, LATENT_DIM), np.float32),
                     "labels": stack_labels(samples)}, d / LATENTS)
    return d


def read_dataset(directory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(voxels (N,1,R,R,R), labels (N,), latents (N, 2048))``."""
    d = Path(directory)
    if not (d / MANIFEST).exists():
        raise FileNotFoundError(f"no {MANIFEST} in {d}")
    with open(d / MANIFEST, newline="") as fh:
        rows = list(csv.DictReader(fh))
    grids = [read_voxels(d / r["voxels"]).occupancy.astype(np.float32) for r in rows]
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    lat = decode_checkpoint((d / LATENTS).read_bytes())["latents"]
    return np.stack(grids)[:, None], labels, lat

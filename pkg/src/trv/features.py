"""Frozen-encoder feature maps: file formats, dataset manifests, synthetic encoder.

A feature map is an (H_f, W_f, D) float grid at `stride` pixels per cell;
image pixel (r, c) maps to cell (r // stride, c // stride).  Values are
stored f32 little-endian on disk and promoted to f64 in memory so training
reductions accumulate at full precision.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.typing import NDArray

from .errors import DataError
from .geometry import DepthMap

FEATURE_MAGIC = b"TRVF"
FEATURE_VERSION = 1
DEPTH_MAGIC = b"TRVD"

_MANIFEST_KEYS = {"image", "depth", "features", "masks", "poses", "calibration",
                  "time_s", "gt_bev"}


@dataclass(frozen=True)
class FeatureMap:
    """Dense per-cell features from a frozen encoder (or a decoder head)."""

    values: NDArray[np.float64]  # (H_f, W_f, D)
    stride: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise DataError("feature map must be (H_f, W_f, D)")
        if self.stride < 1:
            raise DataError("feature stride must be >= 1")
        object.__setattr__(self, "values", v)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def cell_of(self, row: int, col: int) -> tuple[int, int]:
        """Feature cell containing image pixel (row, col)."""
        return (row // self.stride, col // self.stride)


def _atomic_write(path, blob: bytes) -> None:
    """Write via a temp file + rename so partial files never appear."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_feature_map(path, fmap: FeatureMap) -> None:
    h, w, d = fmap.values.shape
    header = FEATURE_MAGIC + struct.pack("<IIIII", FEATURE_VERSION, h, w, d, fmap.stride)
    body = np.ascontiguousarray(fmap.values, dtype="<f4").tobytes()
    _atomic_write(path, header + body)


def load_feature_map(path) -> FeatureMap:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read feature file {path}: {e}") from e
    if blob[:4] != FEATURE_MAGIC:
        raise DataError(f"feature file {path}: bad magic {blob[:4]!r}")
    if len(blob) < 24:
        raise DataError(f"feature file {path}: truncated header")
    version, h, w, d, stride = struct.unpack_from("<IIIII", blob, 4)
    if version != FEATURE_VERSION:
        raise DataError(f"feature file {path}: unsupported version {version}")
    if h == 0 or w == 0 or d == 0:
        raise DataError(f"feature file {path}: zero-sized dimension (H={h}, W={w}, D={d})")
    if stride < 1:
        raise DataError(f"feature file {path}: bad stride {stride}")
    expect = 24 + 4 * h * w * d
    if len(blob) != expect:
        raise DataError(
            f"feature file {path}: payload is {len(blob) - 24} bytes, "
            f"expected {expect - 24} for {h}x{w}x{d} values"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=24).reshape(h, w, d)
    return FeatureMap(values=values.astype(np.float64), stride=int(stride))


def write_depth(path, depth: DepthMap) -> None:
    h, w = depth.values.shape
    header = DEPTH_MAGIC + struct.pack("<II", h, w)
    _atomic_write(path, header + np.ascontiguousarray(depth.values, dtype="<f4").tobytes())


def load_depth(path) -> DepthMap:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read depth file {path}: {e}") from e
    if blob[:4] != DEPTH_MAGIC:
        raise DataError(f"depth file {path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise DataError(f"depth file {path}: truncated header")
    h, w = struct.unpack_from("<II", blob, 4)
    if len(blob) != 12 + 4 * h * w:
        raise DataError(f"depth file {path}: payload size mismatch for {h}x{w}")
    values = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w)
    return DepthMap(values=values.copy())


# ---------------------------------------------------------------------------
# Dataset manifest: a JSON array of frames; paths resolve relative to the
# manifest's directory.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    """One dataset frame with absolute paths."""

    image: Path
    depth: Path
    features: Path
    masks: Path
    poses: Path
    calibration: Path
    time_s: float
    gt_bev: Path | None = None


def load_manifest(path) -> list[Frame]:
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from e
    if not isinstance(data, list):
        raise DataError(f"manifest {path} must be a JSON array of frames")
    base = path.parent
    frames: list[Frame] = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise DataError(f"manifest {path}: frame {i} is not an object")
        unknown = set(entry) - _MANIFEST_KEYS
        if unknown:
            raise DataError(f"manifest {path}: frame {i} has unknown keys {sorted(unknown)}")
        missing = (_MANIFEST_KEYS - {"gt_bev"}) - set(entry)
        if missing:
            raise DataError(f"manifest {path}: frame {i} missing keys {sorted(missing)}")
        frames.append(
            Frame(
                image=base / entry["image"],
                depth=base / entry["depth"],
                features=base / entry["features"],
                masks=base / entry["masks"],
                poses=base / entry["poses"],
                calibration=base / entry["calibration"],
                time_s=float(entry["time_s"]),
                gt_bev=(base / entry["gt_bev"]) if "gt_bev" in entry else None,
            )
        )
    if not frames:
        raise DataError(f"manifest {path} lists no frames")
    return frames


def write_manifest(path, entries: list[dict]) -> None:
    """Write frame entries (relative paths) as a JSON array."""
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")


class EncoderHandle(Protocol):
    """Anything that can produce a FeatureMap for a dataset frame."""

    def encode(self, frame: Frame) -> FeatureMap: ...


class FileEncoder:
    """Default encoder: features were exported offline, just load them."""

    def encode(self, frame: Frame) -> FeatureMap:
        return load_feature_map(frame.features)


# ---------------------------------------------------------------------------
# Synthetic encoder: class prototypes + noise, standing in for a frozen
# vision backbone when rendering synthetic frames.
# ---------------------------------------------------------------------------


def prototypes_at_angle(n_classes: int, dim: int, angle_deg: float, seed: int | None = None
                        ) -> NDArray[np.float64]:
    """Unit vectors with equal pairwise angles.

    Built from an orthonormal basis as v_i = a*e_i + b*sum(e_j) with a, b
    chosen so every pair meets at `angle_deg`.  When a seed is given the
    whole set is rotated by a random orthogonal matrix, which preserves the
    pairwise geometry but decorrelates coordinates across seeds.
    """
    if dim < n_classes:
        raise DataError(f"need dim >= n_classes, got dim={dim} n_classes={n_classes}")
    c = float(np.cos(np.deg2rad(angle_deg)))
    if c >= 1.0 or c < -1.0 / max(n_classes - 1, 1):
        raise DataError(f"pairwise angle {angle_deg} deg is infeasible for {n_classes} classes")
    a = np.sqrt(1.0 - c)
    b = (np.sqrt((1.0 - c) + n_classes * c) - np.sqrt(1.0 - c)) / n_classes
    protos = np.zeros((n_classes, dim), dtype=np.float64)
    protos[:, :n_classes] = a * np.eye(n_classes) + b
    if seed is not None:
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        protos = protos @ q.T
    # Normalize away rounding; vectors are unit by construction.
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return protos


def rotate_directions(vectors: NDArray[np.float64], angle_deg: float, seed: int
                      ) -> NDArray[np.float64]:
    """Apply one rigid rotation of `angle_deg` to every vector (domain shift).

    The rotation acts in a random 2-D plane, so pairwise angles within the
    set are preserved exactly while every direction moves.
    """
    vecs = np.asarray(vectors, dtype=np.float64)
    dim = vecs.shape[1]
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    u, v = basis[:, 0], basis[:, 1]
    phi = np.deg2rad(angle_deg)
    # Rodrigues-style planar rotation: I + sin(phi) (v u^T - u v^T) + (cos(phi)-1)(u u^T + v v^T)
    R = (
        np.eye(dim)
        + np.sin(phi) * (np.outer(v, u) - np.outer(u, v))
        + (np.cos(phi) - 1.0) * (np.outer(u, u) + np.outer(v, v))
    )
    return vecs @ R.T


def _box_blur(values: NDArray[np.float64], radius: int) -> NDArray[np.float64]:
    """Mean filter over a (2r+1)^2 window, clipped at the raster borders."""
    if radius <= 0:
        return values
    h, w, d = values.shape
    # Summed-area table with a zero border.
    sat = np.zeros((h + 1, w + 1, d), dtype=np.float64)
    sat[1:, 1:] = np.cumsum(np.cumsum(values, axis=0), axis=1)
    r = radius
    i0 = np.clip(np.arange(h) - r, 0, h)
    i1 = np.clip(np.arange(h) + r + 1, 0, h)
    j0 = np.clip(np.arange(w) - r, 0, w)
    j1 = np.clip(np.arange(w) + r + 1, 0, w)
    total = sat[i1][:, j1] - sat[i0][:, j1] - sat[i1][:, j0] + sat[i0][:, j0]
    counts = (i1 - i0)[:, None] * (j1 - j0)[None, :]
    return total / counts[:, :, None]


def synth_encode(
    semantic: NDArray[np.integer],
    prototypes: dict[int, NDArray[np.float64]] | NDArray[np.float64],
    stride: int,
    noise_sigma: float = 0.0,
    blur_radius: int = 0,
    seed: int = 0,
) -> FeatureMap:
    """Stand-in encoder: majority-class prototype per cell + noise + box blur.

    Each stride x stride block of the class raster votes for its majority
    class (ties go to the smaller id); the cell takes that class's
    prototype, gets iid Gaussian noise of `noise_sigma`, and the grid is
    box-blurred.  Output is intentionally NOT normalized.
    """
    sem = np.asarray(semantic)
    if sem.ndim != 2:
        raise DataError("semantic raster must be 2-D")
    h, w = sem.shape
    if h % stride or w % stride:
        raise DataError(f"image {h}x{w} not divisible by stride {stride}")
    if isinstance(prototypes, dict):
        ids = sorted(prototypes)
        proto_arr = np.stack([prototypes[i] for i in ids]).astype(np.float64)
        id_index = {cid: k for k, cid in enumerate(ids)}
    else:
        proto_arr = np.asarray(prototypes, dtype=np.float64)
        ids = list(range(len(proto_arr)))
        id_index = {cid: cid for cid in ids}
    present = np.unique(sem)
    missing = [int(c) for c in present if int(c) not in id_index]
    if missing:
        raise DataError(f"no prototype for class ids {missing}")

    hf, wf = h // stride, w // stride
    blocks = sem.reshape(hf, stride, wf, stride).transpose(0, 2, 1, 3).reshape(hf, wf, -1)
    # Majority vote per block; counting per class keeps it vectorized, and
    # iterating ids ascending with a strict ">" makes ties pick the smaller id.
    best_count = np.full((hf, wf), -1, dtype=np.int64)
    majority = np.zeros((hf, wf), dtype=np.int64)
    for cid in sorted(id_index):
        cnt = (blocks == cid).sum(axis=2)
        better = cnt > best_count
        majority[better] = id_index[cid]
        best_count[better] = cnt[better]

    values = proto_arr[majority]
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        values = values + rng.normal(0.0, noise_sigma, size=values.shape)
    values = _box_blur(values, blur_radius)
    return FeatureMap(values=values, stride=stride)

"""Positive/negative pixel sampling and mask-proposal selection.

Positives come from a source region (driven footprint or a selected mask
proposal), negatives from its complement; the ego-vehicle mask is excluded
from both.  Sampling is uniform without replacement when the region is
large enough, with replacement otherwise, and fully determined by the seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import DataError, EmptyRegionError

MASK_MAGIC = b"TRVM"
MASK_VERSION = 1


@dataclass(frozen=True)
class EgoMask:
    """Pixels covered by the vehicle's own body; fixed per camera rig."""

    bitmap: NDArray[np.bool_]

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "EgoMask":
        return cls(np.zeros(shape, dtype=bool))


@dataclass(frozen=True)
class MaskProposal:
    """One segmentation proposal: confidence in [0, 1] plus a binary bitmap."""

    confidence: float
    bitmap: NDArray[np.bool_]

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())


@dataclass(frozen=True)
class SampleSet:
    """Pixel coordinates (row, col) of positives and negatives, plus their source."""

    positives: NDArray[np.int64]  # (n_pos, 2)
    negatives: NDArray[np.int64]  # (n_neg, 2)
    source: str                   # "trajectory" | "mask"


def _draw(region_rc: NDArray[np.int64], count: int, rng: np.random.Generator) -> NDArray[np.int64]:
    """Uniform draw of `count` pixels; with replacement only when the region is smaller."""
    n = len(region_rc)
    replace = n < count
    idx = rng.choice(n, size=count, replace=replace)
    return region_rc[idx]


def _region_coords(mask: NDArray[np.bool_]) -> NDArray[np.int64]:
    rows, cols = np.nonzero(mask)
    return np.stack([rows, cols], axis=1).astype(np.int64)


def sample_region(
    source: NDArray[np.bool_],
    ego: EgoMask,
    n_pos: int,
    n_neg: int,
    seed: int,
    label: str,
) -> SampleSet:
    """Sample positives from source\\ego and negatives from its complement\\ego."""
    if source.shape != ego.bitmap.shape:
        raise DataError("source region and ego mask shapes differ")
    pos_mask = source & ~ego.bitmap
    neg_mask = ~source & ~ego.bitmap
    if not pos_mask.any():
        raise EmptyRegionError(f"{label} positive region is empty; skip frame")
    if not neg_mask.any():
        raise EmptyRegionError(f"{label} negative region is empty; skip frame")
    rng = np.random.default_rng(seed)
    positives = _draw(_region_coords(pos_mask), n_pos, rng)
    negatives = _draw(_region_coords(neg_mask), n_neg, rng)
    return SampleSet(positives=positives, negatives=negatives, source=label)


def sample_trajectory(
    footprint: NDArray[np.bool_], ego: EgoMask, n_pos: int, n_neg: int, seed: int
) -> SampleSet:
    """Sample around the driven footprint (positives inside, negatives outside)."""
    return sample_region(footprint, ego, n_pos, n_neg, seed, "trajectory")


def sample_mask(
    mask: MaskProposal, ego: EgoMask, n_pos: int, n_neg: int, seed: int
) -> SampleSet:
    """Sample around a selected mask proposal."""
    return sample_region(mask.bitmap, ego, n_pos, n_neg, seed, "mask")


def select_mask(proposals: list[MaskProposal], min_area: int) -> MaskProposal | None:
    """Pick the highest-confidence proposal above the area floor.

    Ties on confidence fall back to larger area, then to the earlier index.
    Returns None when nothing qualifies.
    """
    best: MaskProposal | None = None
    best_key = None
    for i, p in enumerate(proposals):
        if p.area <= min_area:
            continue
        key = (-p.confidence, -p.area, i)
        if best_key is None or key < best_key:
            best, best_key = p, key
    return best


def load_ego_mask(path) -> EgoMask:
    """Read an ego-vehicle mask PNG; nonzero pixels are ego."""
    from PIL import Image

    try:
        with Image.open(path) as img:
            arr = np.array(img.convert("L"))
    except OSError as e:
        raise DataError(f"cannot read ego mask {path}: {e}") from e
    return EgoMask(bitmap=arr > 0)


def write_ego_mask(path, ego: EgoMask) -> None:
    from PIL import Image

    Image.fromarray(np.where(ego.bitmap, 255, 0).astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# Mask proposal file ("TRVM"): little-endian header, then per proposal a
# confidence f32, area u32, height u32, width u32 and a row-major bitmap
# packed 8 pixels per byte, MSB first.
# ---------------------------------------------------------------------------


def write_masks(path, proposals: list[MaskProposal]) -> None:
    chunks = [MASK_MAGIC, struct.pack("<II", MASK_VERSION, len(proposals))]
    for p in proposals:
        h, w = p.bitmap.shape
        chunks.append(struct.pack("<fIII", float(p.confidence), p.area, h, w))
        chunks.append(np.packbits(p.bitmap.reshape(-1)).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_masks(path) -> list[MaskProposal]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read mask file {path}: {e}") from e
    if blob[:4] != MASK_MAGIC:
        raise DataError(f"mask file {path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise DataError(f"mask file {path}: truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != MASK_VERSION:
        raise DataError(f"mask file {path}: unsupported version {version}")
    out: list[MaskProposal] = []
    off = 12
    for k in range(count):
        if off + 16 > len(blob):
            raise DataError(f"mask file {path}: truncated proposal header {k}")
        conf, area, h, w = struct.unpack_from("<fIII", blob, off)
        off += 16
        nbytes = (h * w + 7) // 8
        if off + nbytes > len(blob):
            raise DataError(f"mask file {path}: truncated bitmap {k}")
        bits = np.unpackbits(
            np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=off)
        )[: h * w]
        off += nbytes
        bitmap = bits.astype(bool).reshape(h, w)
        if int(bitmap.sum()) != area:
            raise DataError(f"mask file {path}: proposal {k} area field mismatch")
        out.append(MaskProposal(confidence=float(conf), bitmap=bitmap))
    if off != len(blob):
        raise DataError(f"mask file {path}: {len(blob) - off} trailing bytes")
    return out

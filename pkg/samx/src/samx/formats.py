"""Writers for the binary interchange files consumed by the training stack.

Feature file ("TRVF"): magic, then u32 version, H, W, D, stride, then
H*W*D float32 values, row-major with the feature dimension fastest.
Mask file ("TRVM"): magic, u32 version, u32 count, then per proposal a
float32 confidence, u32 area, u32 H, u32 W and the row-major bit-packed
bitmap.  Everything little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ExportError

FEATURE_MAGIC = b"TRVF"
MASK_MAGIC = b"TRVM"
VERSION = 1


def write_features(path, values: np.ndarray, stride: int) -> None:
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 3:
        raise ExportError(f"feature grid must be HxWxD, got shape {values.shape}")
    if stride < 1:
        raise ExportError(f"stride must be positive, got {stride}")
    h, w, d = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIIII", VERSION, h, w, d, stride))
        fh.write(np.ascontiguousarray(values).tobytes())


def write_masks(path, proposals: list[tuple[float, np.ndarray]]) -> None:
    """`proposals` is a list of (confidence, bool bitmap), already ordered."""
    chunks = [MASK_MAGIC, struct.pack("<II", VERSION, len(proposals))]
    for conf, bitmap in proposals:
        bitmap = np.asarray(bitmap, dtype=bool)
        if bitmap.ndim != 2:
            raise ExportError(f"mask bitmap must be 2-D, got shape {bitmap.shape}")
        h, w = bitmap.shape
        chunks.append(struct.pack("<fIII", float(conf), int(bitmap.sum()), h, w))
        chunks.append(np.packbits(bitmap.reshape(-1)).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))

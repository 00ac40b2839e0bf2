"""Similarity maps, cost transforms, BEV projection and inpainting.

Similarity is the dot product of each decoded cell feature with the EMA
traversability vector (both unit norm, so values sit in [-1, 1]); cost is
(1 - similarity) / 2, mapping most-traversable to 0 and least to 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import DataError, NumericError
from .features import FeatureMap, _atomic_write
from .geometry import BevGridConfig, CameraExtrinsics, CameraIntrinsics, DepthMap
from .trainer import TraversabilityVector

BEV_MAGIC = b"TRVB"
BEV_VERSION = 1


@dataclass(frozen=True)
class SimilarityMap:
    """Per-feature-cell cosine similarity to the traversability vector."""

    values: NDArray[np.float64]  # (H_f, W_f)
    stride: int


@dataclass(frozen=True)
class BevCostmap:
    """Vehicle-frame grid of costs in [0, 1] plus a known-cell mask."""

    costs: NDArray[np.float64]   # (rows, cols)
    known: NDArray[np.bool_]
    grid: BevGridConfig

    def __post_init__(self):
        c = np.asarray(self.costs, dtype=np.float64)
        k = np.asarray(self.known, dtype=bool)
        if c.shape != k.shape:
            raise DataError("cost and known grids disagree on shape")
        if c.shape != (self.grid.rows, self.grid.cols):
            raise DataError(
                f"grid shape {c.shape} does not match config "
                f"({self.grid.rows}, {self.grid.cols})"
            )
        object.__setattr__(self, "costs", c)
        object.__setattr__(self, "known", k)


def similarity_map(decoded: FeatureMap, vector: TraversabilityVector) -> SimilarityMap:
    """Dot each cell feature with z; requires an initialized vector."""
    if not vector.initialized:
        raise NumericError("traversability vector is uninitialized; train first")
    vals = decoded.values @ vector.z
    # Unit vectors can drift a hair past the bound in floating point.
    vals = np.clip(vals, -1.0, 1.0)
    return SimilarityMap(values=vals, stride=decoded.stride)


def to_cost(sim: SimilarityMap) -> NDArray[np.float64]:
    """(1 - similarity) / 2: similarity 1 -> cost 0, similarity -1 -> cost 1."""
    return (1.0 - sim.values) / 2.0


def project_costs_to_bev(
    cost_cells: NDArray[np.float64],
    stride: int,
    depth: DepthMap,
    intrinsics: CameraIntrinsics,
    rig: CameraExtrinsics,
    grid: BevGridConfig,
) -> BevCostmap:
    """Splat per-pixel costs onto the vehicle-frame grid, max per cell.

    Every pixel with valid depth takes the cost of its feature cell, back-
    projects through the rig extrinsics (vehicle -> camera), and lands in a
    grid cell; overlapping pixels keep the maximum cost (pessimistic).
    Cells nobody hits stay unknown.
    """
    h, w = depth.values.shape
    hf, wf = cost_cells.shape
    if hf * stride != h or wf * stride != w:
        raise DataError(
            f"cost grid {hf}x{wf} at stride {stride} does not tile depth {h}x{w}"
        )
    d = depth.values.astype(np.float64)
    valid = d > 0

    vs, us = np.nonzero(valid)
    z = d[vs, us]
    xc = (us - intrinsics.cx) / intrinsics.fx * z
    yc = (vs - intrinsics.cy) / intrinsics.fy * z
    cam = np.stack([xc, yc, z], axis=1)
    pts = (cam - rig.translation) @ rig.rotation
    i = np.floor((pts[:, 0] - grid.origin[0]) / grid.resolution).astype(np.int64)
    j = np.floor((pts[:, 1] - grid.origin[1]) / grid.resolution).astype(np.int64)
    inside = (i >= 0) & (i < grid.rows) & (j >= 0) & (j < grid.cols)

    costs = np.full((grid.rows, grid.cols), -np.inf, dtype=np.float64)
    known = np.zeros((grid.rows, grid.cols), dtype=bool)
    pix_cost = cost_cells[vs // stride, us // stride]
    flat = i[inside] * grid.cols + j[inside]
    np.maximum.at(costs.reshape(-1), flat, pix_cost[inside])
    known.reshape(-1)[flat] = True
    costs[~known] = 0.0
    return BevCostmap(costs=costs, known=known, grid=grid)


def _known_boundary(known: NDArray[np.bool_]) -> NDArray[np.bool_]:
    """Known cells with at least one unknown 8-neighbor (or on the border of
    an all-known map, where it doesn't matter)."""
    padded = np.pad(known, 1, constant_values=False)
    has_unknown_neighbor = np.zeros_like(known)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            neigh = padded[1 + di : 1 + di + known.shape[0], 1 + dj : 1 + dj + known.shape[1]]
            has_unknown_neighbor |= ~neigh
    return known & has_unknown_neighbor


def inpaint_nearest(costmap: BevCostmap) -> BevCostmap:
    """Fill unknown cells from the Euclidean-nearest known cell.

    Distance ties break toward the smaller row, then smaller column.  Only
    known cells bordering the unknown region can be nearest to anything,
    which keeps the exact search small; distances compare as exact integer
    squares so the tie rule is airtight.
    """
    known = costmap.known
    if known.all():
        return BevCostmap(costs=costmap.costs.copy(), known=known.copy(), grid=costmap.grid)
    if not known.any():
        raise NumericError("cannot inpaint a costmap with no known cells")

    boundary = _known_boundary(known)
    brc = np.argwhere(boundary)  # already sorted lexicographically by argwhere
    urc = np.argwhere(~known)
    costs = costmap.costs.copy()

    chunk = max(1, int(5e6) // max(len(brc), 1))
    bvals = costmap.costs[brc[:, 0], brc[:, 1]]
    for s in range(0, len(urc), chunk):
        u = urc[s : s + chunk]
        d2 = (u[:, None, 0] - brc[None, :, 0]) ** 2 + (u[:, None, 1] - brc[None, :, 1]) ** 2
        # argmin returns the first minimum; brc is in (row, col) order, so
        # that IS the lexicographic tie-break.
        nearest = np.argmin(d2, axis=1)
        costs[u[:, 0], u[:, 1]] = bvals[nearest]
    return BevCostmap(
        costs=costs, known=np.ones_like(known), grid=costmap.grid
    )


# ---------------------------------------------------------------------------
# BEV grid file ("TRVB"): header echoes the grid config; f32 values
# row-major, then the known mask packed 8 cells per byte, MSB first.
# ---------------------------------------------------------------------------


def write_bev(path, costmap: BevCostmap) -> None:
    g = costmap.grid
    header = BEV_MAGIC + struct.pack(
        "<IIIddddd",
        BEV_VERSION,
        g.rows,
        g.cols,
        g.resolution,
        g.x_extent,
        g.y_extent,
        g.origin[0],
        g.origin[1],
    )
    body = np.ascontiguousarray(costmap.costs, dtype="<f4").tobytes()
    kbits = np.packbits(costmap.known.reshape(-1)).tobytes()
    _atomic_write(path, header + body + kbits)


def load_bev(path) -> BevCostmap:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read BEV file {path}: {e}") from e
    if blob[:4] != BEV_MAGIC:
        raise DataError(f"BEV file {path}: bad magic {blob[:4]!r}")
    head_fmt = "<IIIddddd"
    head_size = struct.calcsize(head_fmt)
    if len(blob) < 4 + head_size:
        raise DataError(f"BEV file {path}: truncated header")
    version, rows, cols, res, xe, ye, ox, oy = struct.unpack_from(head_fmt, blob, 4)
    if version != BEV_VERSION:
        raise DataError(f"BEV file {path}: unsupported version {version}")
    n = rows * cols
    expect = 4 + head_size + 4 * n + (n + 7) // 8
    if len(blob) != expect:
        raise DataError(f"BEV file {path}: size {len(blob)} != expected {expect}")
    off = 4 + head_size
    costs = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float64)
    off += 4 * n
    known = np.unpackbits(
        np.frombuffer(blob, dtype=np.uint8, count=(n + 7) // 8, offset=off)
    )[:n].astype(bool)
    grid = BevGridConfig(resolution=res, x_extent=xe, y_extent=ye, origin=(ox, oy))
    if (grid.rows, grid.cols) != (rows, cols):
        raise DataError(f"BEV file {path}: header dims inconsistent with extents")
    return BevCostmap(
        costs=costs.reshape(rows, cols), known=known.reshape(rows, cols), grid=grid
    )

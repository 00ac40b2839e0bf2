"""Camera geometry: projection, occlusion filtering, footprint rasterization, BEV binning.

Conventions
-----------
World frame: x forward, y left, z up (right-handed), meters.
Camera frame: x right, y down, z forward (standard pinhole).
Extrinsics map points FROM a reference frame INTO the camera frame:
``p_cam = R @ p_ref + t``.  Which reference frame that is depends on the
caller: per-frame world->camera for trajectory projection, the fixed
vehicle->camera rig for BEV work.

Pixels are indexed (row=v, col=u); a projected point with real-valued
(u, v) falls on pixel (round(v), round(u)).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import DataError

# A pixel center lying exactly on a polygon edge counts as inside.
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; fx, fy, cx, cy in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def matrix(self) -> NDArray[np.float64]:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class CameraExtrinsics:
    """Rigid transform into the camera frame: p_cam = rotation @ p + translation."""

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> NDArray[np.float64]:
        m = np.eye(4, dtype=np.float64)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def transform(self, points: NDArray) -> NDArray[np.float64]:
        """Apply to an (n, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse_transform(self, points: NDArray) -> NDArray[np.float64]:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation

    def camera_center(self) -> NDArray[np.float64]:
        """Camera origin expressed in the reference frame."""
        return -self.rotation.T @ self.translation

    def compose(self, other: "CameraExtrinsics") -> "CameraExtrinsics":
        """self after other: maps other's reference frame into self's camera frame."""
        return CameraExtrinsics(
            rotation=self.rotation @ other.rotation,
            translation=self.rotation @ other.translation + self.translation,
        )


@dataclass(frozen=True)
class WheelTrack:
    """Timestamped left/right wheel-contact positions in a common frame.

    horizon is the count of future pose pairs a consumer should use;
    the arrays may be longer.
    """

    times: NDArray[np.float64]
    left: NDArray[np.float64]   # (n, 3)
    right: NDArray[np.float64]  # (n, 3)
    horizon: int = 300

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        l = np.asarray(self.left, dtype=np.float64).reshape(-1, 3)
        r = np.asarray(self.right, dtype=np.float64).reshape(-1, 3)
        if not (len(t) == len(l) == len(r)):
            raise DataError("wheel track arrays disagree on length")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "left", l)
        object.__setattr__(self, "right", r)

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth along the camera z axis, meters; values <= 0 are invalid."""

    values: NDArray[np.float32]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise DataError("depth map must be 2-D")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ProjectedPoint:
    """Image-plane projection of one wheel pose."""

    u: float
    v: float
    z: float          # camera-frame depth of the source point
    index: int        # pose index within the track
    side: str         # "left" | "right"


@dataclass(frozen=True)
class FootprintMask:
    """Binary image mask of the driven footprint."""

    bitmap: NDArray[np.bool_]
    degenerate: bool = False

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())


@dataclass(frozen=True)
class BevGridConfig:
    """Bird's-eye-view grid in the vehicle frame (x forward, y left).

    origin is the vehicle-frame position of the (0, 0) cell corner; cell
    (i, j) covers x in [origin_x + i*res, +res), y likewise.  The default
    grid spans 40 m forward and 40 m laterally centered on the vehicle.
    """

    resolution: float = 0.25
    x_extent: float = 40.0
    y_extent: float = 40.0
    origin: tuple[float, float] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.origin is None:
            object.__setattr__(self, "origin", (0.0, -self.y_extent / 2.0))
        if self.resolution <= 0:
            raise DataError("grid resolution must be positive")

    @property
    def rows(self) -> int:
        return int(round(self.x_extent / self.resolution))

    @property
    def cols(self) -> int:
        return int(round(self.y_extent / self.resolution))

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return (
            self.origin[0] + (i + 0.5) * self.resolution,
            self.origin[1] + (j + 0.5) * self.resolution,
        )


def project_points(
    points: NDArray, intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics
) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Project (n, 3) reference-frame points to (u, v, z); valid = in front and on-image.

    A point is on-image when its rounded pixel lands inside the raster,
    i.e. -0.5 <= u < width - 0.5 and likewise for v.
    """
    cam = extrinsics.transform(points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    valid = (
        (z > 0)
        & (u >= -0.5)
        & (u < intrinsics.width - 0.5)
        & (v >= -0.5)
        & (v < intrinsics.height - 0.5)
    )
    uvz = np.stack([u, v, z], axis=1)
    return uvz, valid


def project_track(
    track: WheelTrack, intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics
) -> list[ProjectedPoint]:
    """Project the first `horizon` wheel-pose pairs into the image.

    Points behind the camera (z <= 0) or outside the raster are dropped.
    Output order: pose index ascending, left wheel before right.
    """
    n = min(track.horizon, len(track))
    out: list[ProjectedPoint] = []
    for side, poses in (("left", track.left[:n]), ("right", track.right[:n])):
        uvz, valid = project_points(poses, intrinsics, extrinsics)
        for idx in np.nonzero(valid)[0]:
            u, v, z = uvz[idx]
            out.append(ProjectedPoint(float(u), float(v), float(z), int(idx), side))
    out.sort(key=lambda p: (p.index, p.side != "left"))
    return out


def filter_occluded(
    points: list[ProjectedPoint], depth: DepthMap, tol: float = 0.1
) -> list[ProjectedPoint]:
    """Drop points hidden behind the stereo surface.

    A point survives when its depth does not exceed the depth-map value at
    its rounded pixel by more than `tol` meters.  Pixels with invalid
    (non-positive) depth retain their points.  tol=0 gives the strict test.
    """
    kept: list[ProjectedPoint] = []
    h, w = depth.values.shape
    for p in points:
        r = int(round(p.v))
        c = int(round(p.u))
        if not (0 <= r < h and 0 <= c < w):
            raise DataError(f"projected point ({p.u:.2f}, {p.v:.2f}) outside depth map")
        d = float(depth.values[r, c])
        if d <= 0 or p.z <= d + tol:
            kept.append(p)
    return kept


def _polygon_from_tracks(left_uv: NDArray, right_uv: NDArray) -> NDArray[np.float64]:
    """Closed footprint polygon: left polyline, far crossing, reversed right polyline."""
    return np.concatenate([left_uv, right_uv[::-1]], axis=0)


def _scanline_fill(polygon: NDArray[np.float64], shape: tuple[int, int]) -> NDArray[np.bool_]:
    """Even-odd scanline fill over pixel centers, boundary-inclusive.

    Interior pixels come from the classic half-open ([ymin, ymax)) crossing
    rule; pixel centers lying exactly on a polygon edge (within _EDGE_EPS)
    are added afterwards so axis-aligned footprints keep their border rows
    and columns.
    """
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    pts = np.asarray(polygon, dtype=np.float64)
    n = len(pts)
    if n < 3:
        return mask
    xs, ys = pts[:, 0], pts[:, 1]
    x2, y2 = np.roll(xs, -1), np.roll(ys, -1)

    ymin_row = max(0, int(math.ceil(ys.min())))
    ymax_row = min(h - 1, int(math.floor(ys.max())))
    for row in range(ymin_row, ymax_row + 1):
        y = float(row)
        crossings = []
        for e in range(n):
            ya, yb = ys[e], y2[e]
            if ya == yb:
                continue  # horizontal edges contribute no crossings
            lo, hi = (ya, yb) if ya < yb else (yb, ya)
            if lo <= y < hi:
                xcross = xs[e] + (y - ys[e]) * (x2[e] - xs[e]) / (y2[e] - ys[e])
                crossings.append(xcross)
        crossings.sort()
        for a, b in zip(crossings[0::2], crossings[1::2]):
            c0 = max(0, int(math.ceil(a + _EDGE_EPS)))
            c1 = min(w - 1, int(math.floor(b - _EDGE_EPS)))
            if c1 >= c0:
                mask[row, c0 : c1 + 1] = True

    # Boundary pass: pixel centers exactly on an edge segment.
    for e in range(n):
        xa, ya, xb, yb = xs[e], ys[e], x2[e], y2[e]
        if abs(xb - xa) >= abs(yb - ya):
            if xa == xb:
                continue  # zero-length edge
            for cu in range(int(math.ceil(min(xa, xb))), int(math.floor(max(xa, xb))) + 1):
                t = (cu - xa) / (xb - xa)
                yv = ya + t * (yb - ya)
                rv = round(yv)
                if abs(yv - rv) <= _EDGE_EPS and 0 <= rv < h and 0 <= cu < w:
                    mask[int(rv), cu] = True
        else:
            for rv in range(int(math.ceil(min(ya, yb))), int(math.floor(max(ya, yb))) + 1):
                t = (rv - ya) / (yb - ya)
                xv = xa + t * (xb - xa)
                cu = round(xv)
                if abs(xv - cu) <= _EDGE_EPS and 0 <= rv < h and 0 <= cu < w:
                    mask[rv, int(cu)] = True
    return mask


def rasterize_footprint(
    points: list[ProjectedPoint], shape: tuple[int, int]
) -> FootprintMask:
    """Fill the image polygon between the projected left and right wheel tracks.

    Needs at least two points per side; a collinear (zero-area) polygon
    yields an empty mask flagged degenerate.
    """
    left = np.array([[p.u, p.v] for p in points if p.side == "left"], dtype=np.float64)
    right = np.array([[p.u, p.v] for p in points if p.side == "right"], dtype=np.float64)
    if len(left) < 2 or len(right) < 2:
        return FootprintMask(np.zeros(shape, dtype=bool), degenerate=True)
    poly = _polygon_from_tracks(left, right)
    # Shoelace area; collinear tracks enclose nothing.
    x, y = poly[:, 0], poly[:, 1]
    area2 = float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    if abs(area2) < 1e-12:
        return FootprintMask(np.zeros(shape, dtype=bool), degenerate=True)
    return FootprintMask(_scanline_fill(poly, shape))


def backproject_pixel(
    u: float, v: float, depth: float, intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics
) -> NDArray[np.float64]:
    """Invert the pinhole model: pixel + camera-z depth -> reference-frame point."""
    xc = (u - intrinsics.cx) / intrinsics.fx * depth
    yc = (v - intrinsics.cy) / intrinsics.fy * depth
    cam = np.array([xc, yc, depth], dtype=np.float64)
    return extrinsics.rotation.T @ (cam - extrinsics.translation)


def pixel_to_bev(
    u: float,
    v: float,
    depth: float,
    intrinsics: CameraIntrinsics,
    extrinsics: CameraExtrinsics,
    grid: BevGridConfig,
) -> tuple[int, int] | None:
    """Bin a pixel's back-projected ground point into the BEV grid.

    `extrinsics` must map the grid's frame (vehicle) into the camera.
    Returns (row, col) or None when the point falls outside the grid or the
    depth is invalid.
    """
    if depth <= 0:
        return None
    p = backproject_pixel(u, v, depth, intrinsics, extrinsics)
    i = math.floor((p[0] - grid.origin[0]) / grid.resolution)
    j = math.floor((p[1] - grid.origin[1]) / grid.resolution)
    if 0 <= i < grid.rows and 0 <= j < grid.cols:
        return (i, j)
    return None


def vehicle_pose_from_wheels(
    left: NDArray, right: NDArray
) -> tuple[float, float, float]:
    """(x, y, heading) of the vehicle frame from one wheel-contact pair.

    The vehicle origin is the wheel midpoint; +y points from the right
    wheel to the left one, so heading (the +x direction) is that offset
    rotated -90 degrees.
    """
    l = np.asarray(left, dtype=np.float64).reshape(3)
    r = np.asarray(right, dtype=np.float64).reshape(3)
    mid = (l + r) / 2.0
    d = l - r
    heading = math.atan2(-d[0], d[1])
    return (float(mid[0]), float(mid[1]), heading)


def world_to_vehicle(x: float, y: float, heading: float) -> CameraExtrinsics:
    """Rigid transform taking world points into the vehicle frame at (x, y, heading)."""
    c, s = math.cos(heading), math.sin(heading)
    R = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]], dtype=np.float64)
    t = -R @ np.array([x, y, 0.0], dtype=np.float64)
    return CameraExtrinsics(rotation=R, translation=t)


def load_pose_csv(path) -> WheelTrack:
    """Read a `time_s,lx,ly,lz,rx,ry,rz` CSV into a WheelTrack."""
    times, left, right = [], [], []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["time_s", "lx", "ly", "lz", "rx", "ry", "rz"]:
                raise DataError(f"bad pose CSV header in {path}: {header}")
            for row in reader:
                if len(row) != 7:
                    raise DataError(f"bad pose CSV row in {path}: {row}")
                vals = [float(x) for x in row]
                times.append(vals[0])
                left.append(vals[1:4])
                right.append(vals[4:7])
    except OSError as e:
        raise DataError(f"cannot read pose CSV {path}: {e}") from e
    except ValueError as e:
        raise DataError(f"non-numeric pose CSV value in {path}: {e}") from e
    if not times:
        raise DataError(f"pose CSV {path} has no rows")
    return WheelTrack(
        times=np.array(times), left=np.array(left), right=np.array(right)
    )


def write_pose_csv(path, track: WheelTrack) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "lx", "ly", "lz", "rx", "ry", "rz"])
        for t, l, r in zip(track.times, track.left, track.right):
            writer.writerow([repr(float(t))] + [repr(float(x)) for x in l] + [repr(float(x)) for x in r])


def load_calibration(path) -> tuple[CameraIntrinsics, CameraExtrinsics, str | None]:
    """Read a calibration JSON: intrinsics, rig extrinsics, optional ego-mask path."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read calibration {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"calibration {path} is not valid JSON: {e}") from e
    try:
        ik = data["intrinsics"]
        intr = CameraIntrinsics(
            fx=float(ik["fx"]), fy=float(ik["fy"]),
            cx=float(ik["cx"]), cy=float(ik["cy"]),
            width=int(ik["width"]), height=int(ik["height"]),
        )
        ek = data["extrinsics"]
        extr = CameraExtrinsics(
            rotation=np.array(ek["rotation"], dtype=np.float64),
            translation=np.array(ek["translation"], dtype=np.float64),
        )
    except KeyError as e:
        raise DataError(f"calibration {path} missing field {e}") from e
    return intr, extr, data.get("ego_mask")


def write_calibration(path, intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics,
                      ego_mask: str | None = None) -> None:
    data = {
        "intrinsics": {
            "fx": intrinsics.fx, "fy": intrinsics.fy,
            "cx": intrinsics.cx, "cy": intrinsics.cy,
            "width": intrinsics.width, "height": intrinsics.height,
        },
        "extrinsics": {
            "rotation": extrinsics.rotation.tolist(),
            "translation": extrinsics.translation.tolist(),
        },
    }
    if ego_mask is not None:
        data["ego_mask"] = ego_mask
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")

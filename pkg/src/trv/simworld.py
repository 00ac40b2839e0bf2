"""Synthetic off-road world: terrain raster, renderer, expert driver, datasets.

The world is a 2-D class raster (meters at `cell` resolution) holding a
meandering trail band through grass, scattered with extruded obstacles
(bush, rock, tree, barrier) of per-class height.  A pinhole camera renders
semantic + depth images by per-pixel ray casting against the ground plane
and the obstacle columns; depth is the hit range along the camera z axis.

Everything is seeded and deterministic; dataset emission writes the full
on-disk layout (manifest, calibration, ego mask, per-frame files).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .costmap import BevCostmap, write_bev
from .errors import DataError, NumericError
from .features import (
    prototypes_at_angle,
    rotate_directions,
    synth_encode,
    write_depth,
    write_feature_map,
    write_manifest,
)
from .geometry import (
    BevGridConfig,
    CameraExtrinsics,
    CameraIntrinsics,
    DepthMap,
    WheelTrack,
    filter_occluded,
    project_track,
    rasterize_footprint,
    vehicle_pose_from_wheels,
    world_to_vehicle,
    write_calibration,
    write_pose_csv,
)
from .sampling import EgoMask, MaskProposal, write_ego_mask, write_masks
from .trainer import derive_seed

GRASS, TRAIL, BUSH, ROCK, TREE, BARRIER, SKY = range(7)

# Appearance ids for lateral trail sub-bands (encoder input only; class
# labels, masks and ground truth always use the ids above).
TRAIL_BAND_BASE = 7


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    height: float
    traversable: bool
    lethal: bool
    cost: float
    labeled: bool = True


DEFAULT_CLASSES: tuple[ClassDef, ...] = (
    ClassDef(GRASS, "grass", 0.0, False, False, 0.4),
    ClassDef(TRAIL, "trail", 0.0, True, False, 0.0),
    ClassDef(BUSH, "bush", 0.7, False, False, 0.7),
    ClassDef(ROCK, "rock", 0.9, False, True, 1.0),
    ClassDef(TREE, "tree", 4.0, False, True, 1.0),
    ClassDef(BARRIER, "barrier", 1.4, False, True, 1.0),
    ClassDef(SKY, "sky", 0.0, False, False, 1.0, labeled=False),
)


@dataclass(frozen=True)
class WorldConfig:
    size_x: float = 200.0
    size_y: float = 60.0
    cell: float = 0.5
    trail_halfwidth: float = 1.2
    meander_amplitude: float = 8.0
    max_slope: float = 0.3            # bound on |d centerline / dx|
    bush_density: float = 0.010       # obstacles per square meter
    rock_density: float = 0.006
    tree_density: float = 0.008
    barrier_density: float = 0.0015
    obstacle_margin: float = 0.75     # clearance beyond the trail edge


@dataclass(frozen=True)
class SimConfig:
    n_frames: int = 50
    frame_start: int = 0
    frame_spacing: int = 5
    image_width: int = 256
    image_height: int = 256
    focal: float = 256.0
    stride: int = 4
    feature_dim: int = 32
    prototype_angle_deg: float = 60.0
    noise_sigma: float = 0.1
    blur_radius: int = 1
    domain_shift_deg: float = 0.0
    camera_height: float = 1.6
    camera_pitch_deg: float = 30.0
    camera_forward: float = 0.5
    track_width: float = 1.6
    pose_step: float = 0.25
    pose_dt: float = 0.1
    horizon: int = 300
    occlusion_tol: float = 0.1
    mask_jitter: float = 1.5
    mask_false_rate: float = 0.02
    mask_query_points: int = 64
    ego_frac: float = 0.08
    max_range: float = 120.0
    trail_bands: int = 1              # lateral appearance sub-bands on the trail
    trail_band_angle_deg: float = 12.0
    world: WorldConfig = field(default_factory=WorldConfig)


@dataclass
class World:
    """Class raster indexed [ix, iy] (x bin first), plus derived lookups."""

    classes: NDArray[np.int8]
    cell: float
    centerline_x: NDArray[np.float64]
    centerline_y: NDArray[np.float64]
    table: tuple[ClassDef, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        self.heights = np.zeros(len(self.table), dtype=np.float64)
        self.costs = np.zeros(len(self.table), dtype=np.float64)
        self.traversable = np.zeros(len(self.table), dtype=bool)
        self.lethal = np.zeros(len(self.table), dtype=bool)
        for c in self.table:
            self.heights[c.id] = c.height
            self.costs[c.id] = c.cost
            self.traversable[c.id] = c.traversable
            self.lethal[c.id] = c.lethal

    @property
    def size_x(self) -> float:
        return self.classes.shape[0] * self.cell

    @property
    def size_y(self) -> float:
        return self.classes.shape[1] * self.cell

    def class_at(self, x: float, y: float) -> int:
        ix = math.floor(x / self.cell)
        iy = math.floor(y / self.cell)
        if 0 <= ix < self.classes.shape[0] and 0 <= iy < self.classes.shape[1]:
            return int(self.classes[ix, iy])
        return GRASS

    def center_y(self, x: float) -> float:
        return float(np.interp(x, self.centerline_x, self.centerline_y))


def generate_world(cfg: WorldConfig, seed: int) -> World:
    """Grass plane + meandering trail band + scattered obstacle blobs."""
    rng = np.random.default_rng(seed)
    nx = int(round(cfg.size_x / cfg.cell))
    ny = int(round(cfg.size_y / cfg.cell))
    classes = np.full((nx, ny), GRASS, dtype=np.int8)

    xs = (np.arange(nx) + 0.5) * cfg.cell
    wavelengths = np.array([83.0, 47.0, 29.0])
    # Scale amplitudes so both total amplitude and slope stay in bounds.
    raw = rng.uniform(0.4, 1.0, size=3)
    amp_scale = cfg.meander_amplitude / raw.sum()
    slope = float(np.sum(2.0 * np.pi * raw * amp_scale / wavelengths))
    if slope > cfg.max_slope:
        amp_scale *= cfg.max_slope / slope
    amps = raw * amp_scale
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    yc = cfg.size_y / 2.0 + sum(
        a * np.sin(2.0 * np.pi * xs / w + p) for a, w, p in zip(amps, wavelengths, phases)
    )

    ys = (np.arange(ny) + 0.5) * cfg.cell
    band = np.abs(ys[None, :] - yc[:, None]) <= cfg.trail_halfwidth
    classes[band] = TRAIL

    area = cfg.size_x * cfg.size_y
    blobs = (
        (BUSH, cfg.bush_density, 1),
        (ROCK, cfg.rock_density, 1),
        (TREE, cfg.tree_density, 1),
        (BARRIER, cfg.barrier_density, 4),
    )
    for cid, density, blob_len in blobs:
        count = int(round(density * area))
        if count == 0:
            continue
        px = rng.uniform(0.0, cfg.size_x, size=count)
        py = rng.uniform(0.0, cfg.size_y, size=count)
        angles = rng.uniform(0.0, np.pi, size=count)
        for x, y, ang in zip(px, py, angles):
            clearance = cfg.trail_halfwidth + cfg.obstacle_margin
            if abs(y - float(np.interp(x, xs, yc))) < clearance:
                continue
            for step in range(blob_len):
                bx = x + step * cfg.cell * math.cos(ang)
                by = y + step * cfg.cell * math.sin(ang)
                ix, iy = int(bx / cfg.cell), int(by / cfg.cell)
                if 0 <= ix < nx and 0 <= iy < ny and classes[ix, iy] != TRAIL:
                    if abs(by - float(np.interp(bx, xs, yc))) >= clearance:
                        classes[ix, iy] = cid
    return World(classes=classes, cell=cfg.cell, centerline_x=xs, centerline_y=yc)


# ---------------------------------------------------------------------------
# Renderer: per-pixel DDA through the class raster.
# ---------------------------------------------------------------------------


def _raycast_kernel(classes, heights, cell, origin, rot_t, fx, fy, cx, cy,
                    t_max, sky_id, grass_id, sem, depth):
    nx, ny = classes.shape
    size_x = nx * cell
    size_y = ny * cell
    h, w = sem.shape
    ox, oy, oz = origin[0], origin[1], origin[2]
    for v in range(h):
        for u in range(w):
            dcx = (u - cx) / fx
            dcy = (v - cy) / fy
            dwx = rot_t[0, 0] * dcx + rot_t[0, 1] * dcy + rot_t[0, 2]
            dwy = rot_t[1, 0] * dcx + rot_t[1, 1] * dcy + rot_t[1, 2]
            dwz = rot_t[2, 0] * dcx + rot_t[2, 1] * dcy + rot_t[2, 2]

            if dwz < -1e-15:
                t_ground = -oz / dwz
            else:
                t_ground = np.inf
            t_end = min(t_ground, t_max)

            # Clip the ray to the world bounding box for the obstacle march.
            t_enter = 0.0
            t_exit = t_end
            for axis in range(2):
                o = ox if axis == 0 else oy
                d = dwx if axis == 0 else dwy
                hi = size_x if axis == 0 else size_y
                if abs(d) < 1e-15:
                    if o < 0.0 or o > hi:
                        t_enter = np.inf
                else:
                    t0 = (0.0 - o) / d
                    t1 = (hi - o) / d
                    if t0 > t1:
                        t0, t1 = t1, t0
                    if t0 > t_enter:
                        t_enter = t0
                    if t1 < t_exit:
                        t_exit = t1

            hit = False
            if t_enter <= t_exit:
                px = ox + t_enter * dwx
                py = oy + t_enter * dwy
                ix = int(math.floor(px / cell))
                iy = int(math.floor(py / cell))
                if ix < 0:
                    ix = 0
                if ix > nx - 1:
                    ix = nx - 1
                if iy < 0:
                    iy = 0
                if iy > ny - 1:
                    iy = ny - 1
                step_x = 1 if dwx > 0 else -1
                step_y = 1 if dwy > 0 else -1
                if dwx > 1e-15:
                    t_next_x = ((ix + 1) * cell - ox) / dwx
                    dt_x = cell / dwx
                elif dwx < -1e-15:
                    t_next_x = (ix * cell - ox) / dwx
                    dt_x = -cell / dwx
                else:
                    t_next_x = np.inf
                    dt_x = np.inf
                if dwy > 1e-15:
                    t_next_y = ((iy + 1) * cell - oy) / dwy
                    dt_y = cell / dwy
                elif dwy < -1e-15:
                    t_next_y = (iy * cell - oy) / dwy
                    dt_y = -cell / dwy
                else:
                    t_next_y = np.inf
                    dt_y = np.inf

                t_curr = t_enter
                while t_curr <= t_exit and not hit:
                    t_seg_end = min(t_next_x, t_next_y, t_exit)
                    cls = classes[ix, iy]
                    ch = heights[cls]
                    if ch > 0.0:
                        z0 = oz + t_curr * dwz
                        z1 = oz + t_seg_end * dwz
                        zmin = z0 if z0 < z1 else z1
                        if zmin <= ch:
                            if z0 <= ch:
                                t_hit = t_curr
                            else:
                                t_hit = (ch - oz) / dwz
                            if t_hit <= t_seg_end + 1e-12 and t_hit <= t_end and t_hit > 0.0:
                                sem[v, u] = cls
                                depth[v, u] = t_hit
                                hit = True
                    if hit:
                        break
                    if t_next_x <= t_next_y:
                        ix += step_x
                        t_curr = t_next_x
                        t_next_x += dt_x
                        if ix < 0 or ix >= nx:
                            break
                    else:
                        iy += step_y
                        t_curr = t_next_y
                        t_next_y += dt_y
                        if iy < 0 or iy >= ny:
                            break

            if not hit:
                if t_ground < np.inf:
                    gx = ox + t_ground * dwx
                    gy = oy + t_ground * dwy
                    gix = int(math.floor(gx / cell))
                    giy = int(math.floor(gy / cell))
                    if 0 <= gix < nx and 0 <= giy < ny:
                        sem[v, u] = classes[gix, giy]
                    else:
                        sem[v, u] = grass_id
                    depth[v, u] = t_ground
                else:
                    sem[v, u] = sky_id
                    depth[v, u] = 0.0


try:  # pragma: no cover - exercised implicitly everywhere
    from numba import njit

    _raycast = njit(cache=True)(_raycast_kernel)
except ImportError:  # pragma: no cover
    _raycast = _raycast_kernel


def render(
    world: World, extrinsics: CameraExtrinsics, intrinsics: CameraIntrinsics,
    max_range: float = 120.0,
) -> tuple[NDArray[np.uint8], DepthMap]:
    """Semantic + depth images from a camera posed in the world frame.

    Rays that leave the world hit flat grass; rays that never descend
    within range are sky with invalid (zero) depth.
    """
    origin = extrinsics.camera_center()
    if origin[2] <= 0:
        raise DataError("camera must sit above the ground plane")
    sem = np.empty((intrinsics.height, intrinsics.width), dtype=np.uint8)
    depth = np.empty((intrinsics.height, intrinsics.width), dtype=np.float64)
    _raycast(
        world.classes,
        world.heights,
        float(world.cell),
        origin.astype(np.float64),
        np.ascontiguousarray(extrinsics.rotation.T),
        float(intrinsics.fx),
        float(intrinsics.fy),
        float(intrinsics.cx),
        float(intrinsics.cy),
        float(max_range),
        SKY,
        GRASS,
        sem,
        depth,
    )
    return sem, DepthMap(values=depth.astype(np.float32))


# ---------------------------------------------------------------------------
# Expert driver.
# ---------------------------------------------------------------------------


def drive_expert(
    world: World,
    n_steps: int,
    seed: int,
    track_width: float = 1.6,
    pose_step: float = 0.25,
    pose_dt: float = 0.1,
    start: tuple[float, float, float] | None = None,
    max_turn: float = 0.12,
    center_bias: float = 0.8,
    steer_noise: float = 0.05,
) -> WheelTrack:
    """Greedy low-cost driving along the trail.

    Each step scores candidate headings by probed manual cost ahead plus a
    centerline bias and seeded noise, refusing any candidate that would put
    the vehicle center or either wheel on a non-traversable cell.  Raises
    when every candidate is blocked ("expert trapped").
    """
    rng = np.random.default_rng(seed)
    if start is None:
        x0 = 4.0
        y0 = world.center_y(x0)
        dy = world.center_y(x0 + 1.0) - world.center_y(x0 - 1.0)
        theta = math.atan2(dy, 2.0)
    else:
        x0, y0, theta = start
    x, y = x0, y0
    half = track_width / 2.0

    def wheels(px: float, py: float, th: float):
        ox, oy = -math.sin(th) * half, math.cos(th) * half
        return (px + ox, py + oy), (px - ox, py - oy)

    times = np.arange(n_steps, dtype=np.float64) * pose_dt
    left = np.zeros((n_steps, 3))
    right = np.zeros((n_steps, 3))
    candidates = np.linspace(-max_turn, max_turn, 11)
    probe_dists = (1.0, 2.0, 3.0)

    for i in range(n_steps):
        (lx, ly), (rx, ry) = wheels(x, y, theta)
        left[i, :2] = (lx, ly)
        right[i, :2] = (rx, ry)
        if i == n_steps - 1:
            break
        noise = rng.normal(0.0, steer_noise, size=len(candidates))
        best_score = np.inf
        best_heading = None
        for k, dth in enumerate(candidates):
            th = theta + dth
            nx_ = x + pose_step * math.cos(th)
            ny_ = y + pose_step * math.sin(th)
            (nlx, nly), (nrx, nry) = wheels(nx_, ny_, th)
            feasible = all(
                world.traversable[world.class_at(px, py)]
                for px, py in ((nx_, ny_), (nlx, nly), (nrx, nry))
            )
            if not feasible:
                continue
            score = noise[k]
            for d in probe_dists:
                qx = x + d * math.cos(th)
                qy = y + d * math.sin(th)
                cid = world.class_at(qx, qy)
                score += world.costs[cid] + (0.0 if world.traversable[cid] else 3.0)
                score += center_bias * abs(qy - world.center_y(qx)) / d
            if score < best_score:
                best_score = score
                best_heading = th
        if best_heading is None:
            raise NumericError(f"expert trapped at step {i} ({x:.1f}, {y:.1f})")
        theta = best_heading
        x += pose_step * math.cos(theta)
        y += pose_step * math.sin(theta)
    return WheelTrack(times=times, left=left, right=right)


# ---------------------------------------------------------------------------
# Mask proposals: connected components with jittered boundaries.
# ---------------------------------------------------------------------------


def propose_masks(
    semantic: NDArray[np.integer],
    query_points: NDArray[np.int64],
    jitter: float = 0.0,
    false_rate: float = 0.0,
    seed: int = 0,
) -> list[MaskProposal]:
    """Component-of-the-query-class proposals, one per distinct component.

    Components use 4-connectivity.  jitter > 0 displaces the boundary by a
    smooth random field (pixels); confidence is the IoU against the clean
    component.  With probability false_rate one spurious ellipse proposal
    is injected.  Output is sorted by confidence descending.
    """
    sem = np.asarray(semantic)
    rng = np.random.default_rng(seed)
    labels_by_class: dict[int, NDArray] = {}
    seen: set[tuple[int, int]] = set()
    proposals: list[MaskProposal] = []
    for r, c in np.asarray(query_points, dtype=np.int64).reshape(-1, 2):
        cid = int(sem[r, c])
        if cid not in labels_by_class:
            labels_by_class[cid], _ = ndimage.label(sem == cid)
        comp = int(labels_by_class[cid][r, c])
        if comp == 0 or (cid, comp) in seen:
            continue
        seen.add((cid, comp))
        clean = labels_by_class[cid] == comp
        if jitter > 0:
            inside = ndimage.distance_transform_edt(clean)
            outside = ndimage.distance_transform_edt(~clean)
            signed = inside - outside
            noise = ndimage.gaussian_filter(rng.standard_normal(sem.shape), sigma=4.0)
            std = noise.std()
            if std > 0:
                noise = noise / std
            bitmap = (signed + jitter * noise) > 0
        else:
            bitmap = clean
        inter = np.logical_and(bitmap, clean).sum()
        union = np.logical_or(bitmap, clean).sum()
        if union == 0 or inter == 0:
            continue
        proposals.append(MaskProposal(confidence=float(inter / union), bitmap=bitmap))
    if false_rate > 0 and rng.uniform() < false_rate:
        h, w = sem.shape
        cy_, cx_ = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        ay, ax = rng.uniform(0.08, 0.25) * h, rng.uniform(0.08, 0.25) * w
        yy, xx = np.mgrid[0:h, 0:w]
        blob = ((yy - cy_) / ay) ** 2 + ((xx - cx_) / ax) ** 2 <= 1.0
        proposals.append(
            MaskProposal(confidence=float(rng.uniform(0.6, 0.95)), bitmap=blob)
        )
    proposals.sort(key=lambda p: -p.confidence)
    return proposals


# ---------------------------------------------------------------------------
# Dataset emission.
# ---------------------------------------------------------------------------


def camera_rig(cfg: SimConfig) -> CameraExtrinsics:
    """Vehicle -> camera transform: camera above and ahead, pitched down."""
    phi = math.radians(cfg.camera_pitch_deg)
    rot = np.array(
        [
            [0.0, -1.0, 0.0],
            [-math.sin(phi), 0.0, -math.cos(phi)],
            [math.cos(phi), 0.0, -math.sin(phi)],
        ]
    )
    center = np.array([cfg.camera_forward, 0.0, cfg.camera_height])
    return CameraExtrinsics(rotation=rot, translation=-rot @ center)


def intrinsics_for(cfg: SimConfig) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=cfg.focal, fy=cfg.focal,
        cx=cfg.image_width / 2.0, cy=cfg.image_height / 2.0,
        width=cfg.image_width, height=cfg.image_height,
    )


def default_ego_mask(cfg: SimConfig) -> EgoMask:
    bitmap = np.zeros((cfg.image_height, cfg.image_width), dtype=bool)
    rows = int(round(cfg.ego_frac * cfg.image_height))
    if rows > 0:
        bitmap[-rows:, :] = True
    return EgoMask(bitmap=bitmap)


def gt_bev_classes(world: World, vehicle_pose: tuple[float, float, float],
                   grid: BevGridConfig) -> NDArray[np.int64]:
    """World classes sampled at the vehicle-frame grid cell centers."""
    x0, y0, heading = vehicle_pose
    ii, jj = np.mgrid[0 : grid.rows, 0 : grid.cols]
    vx = grid.origin[0] + (ii + 0.5) * grid.resolution
    vy = grid.origin[1] + (jj + 0.5) * grid.resolution
    c, s = math.cos(heading), math.sin(heading)
    wx = x0 + c * vx - s * vy
    wy = y0 + s * vx + c * vy
    ix = np.floor(wx / world.cell).astype(np.int64)
    iy = np.floor(wy / world.cell).astype(np.int64)
    inside = (
        (ix >= 0) & (ix < world.classes.shape[0]) & (iy >= 0) & (iy < world.classes.shape[1])
    )
    out = np.full((grid.rows, grid.cols), GRASS, dtype=np.int64)
    out[inside] = world.classes[ix[inside], iy[inside]]
    return out


def class_table_json(table: tuple[ClassDef, ...] = DEFAULT_CLASSES) -> list[dict]:
    return [asdict(c) for c in table]


def load_class_table(world_json_path) -> tuple[dict[int, float], dict[int, bool], dict[int, bool], dict[int, bool]]:
    """Read (cost, lethal, traversable, labeled) tables from a world.json."""
    try:
        with open(world_json_path) as fh:
            data = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read world config {world_json_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"world config {world_json_path} is not valid JSON: {e}") from e
    if "classes" not in data:
        raise DataError(f"world config {world_json_path} has no class table")
    cost, lethal, traversable, labeled = {}, {}, {}, {}
    for c in data["classes"]:
        cid = int(c["id"])
        cost[cid] = float(c["cost"])
        lethal[cid] = bool(c["lethal"])
        traversable[cid] = bool(c["traversable"])
        labeled[cid] = bool(c.get("labeled", True))
    return cost, lethal, traversable, labeled


def band_prototypes(base: NDArray[np.float64], n_bands: int, angle_deg: float,
                    seed: int) -> NDArray[np.float64]:
    """Unit prototypes for trail sub-bands, fanned out from the trail one.

    Band k is the trail prototype rotated by k * angle_deg toward a seeded
    direction orthogonal to it, modelling gradual appearance change across
    the width of a traversable region.  Band 0 is the trail prototype.
    """
    if n_bands > base.size:
        raise DataError("more trail bands than feature dimensions")
    rng = np.random.default_rng(seed)
    p = base / np.linalg.norm(base)
    out = np.zeros((n_bands, p.size))
    out[0] = p
    fan_dirs: list[NDArray[np.float64]] = []
    for k in range(1, n_bands):
        q = rng.standard_normal(p.size)
        q -= (q @ p) * p
        for prev in fan_dirs:
            q -= (q @ prev) * prev
        q /= np.linalg.norm(q)
        fan_dirs.append(q)
        phi = math.radians(k * angle_deg)
        out[k] = math.cos(phi) * p + math.sin(phi) * q
    return out


def trail_appearance(
    semantic: NDArray[np.uint8],
    depth: DepthMap,
    world: World,
    extrinsics: CameraExtrinsics,
    intrinsics: CameraIntrinsics,
    n_bands: int,
    halfwidth: float,
) -> NDArray[np.uint8]:
    """Semantic raster with trail pixels re-labelled by lateral sub-band.

    Trail pixels back-project to the ground through their rendered depth;
    the distance from the trail centerline selects one of n_bands equal
    sub-bands (TRAIL_BAND_BASE + k, innermost first).  All other classes
    pass through unchanged.
    """
    appearance = semantic.copy()
    rows, cols = np.nonzero(semantic == TRAIL)
    if len(rows) == 0 or n_bands <= 1:
        return appearance
    t = depth.values[rows, cols].astype(np.float64)
    dirs_cam = np.stack(
        [
            (cols - intrinsics.cx) / intrinsics.fx,
            (rows - intrinsics.cy) / intrinsics.fy,
            np.ones(len(rows)),
        ],
        axis=1,
    )
    origin = extrinsics.camera_center()
    points = origin + t[:, None] * (dirs_cam @ extrinsics.rotation)
    offset = np.abs(
        points[:, 1] - np.interp(points[:, 0], world.centerline_x, world.centerline_y)
    )
    band = np.minimum((offset / (halfwidth / n_bands)).astype(np.int64), n_bands - 1)
    appearance[rows, cols] = TRAIL_BAND_BASE + band
    return appearance


def emit_dataset(out_dir, cfg: SimConfig, seed: int,
                 bev_grid: BevGridConfig | None = None) -> Path:
    """Generate a world, drive it, render frames and write the dataset.

    Layout: manifest.json, world.json, calibration.json, ego.png and one
    frames/NNN/ directory per frame with semantic.png, depth.trvd,
    features.trvf, masks.trvm, poses.csv and gt_bev.trvb.  Returns the
    manifest path.  Byte-identical for identical (cfg, seed).
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if bev_grid is None:
        bev_grid = BevGridConfig()

    world = generate_world(cfg.world, seed)
    n_poses = cfg.frame_start + max(cfg.n_frames - 1, 0) * cfg.frame_spacing + cfg.horizon + 1
    track = drive_expert(
        world, n_poses, derive_seed(seed, 1),
        track_width=cfg.track_width, pose_step=cfg.pose_step, pose_dt=cfg.pose_dt,
    )
    protos = prototypes_at_angle(
        len(DEFAULT_CLASSES), cfg.feature_dim, cfg.prototype_angle_deg,
        seed=derive_seed(seed, 2),
    )
    if cfg.trail_bands > 1:
        bands = band_prototypes(
            protos[TRAIL], cfg.trail_bands, cfg.trail_band_angle_deg,
            seed=derive_seed(seed, 7),
        )
        protos = np.vstack([protos, bands])
    if cfg.domain_shift_deg != 0.0:
        protos = rotate_directions(protos, cfg.domain_shift_deg, derive_seed(seed, 3))

    intr = intrinsics_for(cfg)
    rig = camera_rig(cfg)
    ego = default_ego_mask(cfg)
    write_calibration(out / "calibration.json", intr, rig, ego_mask="ego.png")
    write_ego_mask(out / "ego.png", ego)
    with open(out / "world.json", "w") as fh:
        json.dump(
            {
                "seed": seed,
                "classes": class_table_json(),
                "sim": asdict(cfg),
                "bev": {
                    "resolution": bev_grid.resolution,
                    "x_extent": bev_grid.x_extent,
                    "y_extent": bev_grid.y_extent,
                    "origin": list(bev_grid.origin),
                },
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")

    entries: list[dict] = []
    for f in range(cfg.n_frames):
        start = cfg.frame_start + f * cfg.frame_spacing
        window = WheelTrack(
            times=track.times[start : start + cfg.horizon],
            left=track.left[start : start + cfg.horizon],
            right=track.right[start : start + cfg.horizon],
            horizon=cfg.horizon,
        )
        pose = vehicle_pose_from_wheels(window.left[0], window.right[0])
        world_to_cam = rig.compose(world_to_vehicle(*pose))

        sem, depth = render(world, world_to_cam, intr, max_range=cfg.max_range)
        encoder_input = sem
        if cfg.trail_bands > 1:
            encoder_input = trail_appearance(
                sem, depth, world, world_to_cam, intr,
                cfg.trail_bands, cfg.world.trail_halfwidth,
            )
        fmap = synth_encode(
            encoder_input, protos, cfg.stride, cfg.noise_sigma, cfg.blur_radius,
            seed=derive_seed(seed, 4, f),
        )

        points = project_track(window, intr, world_to_cam)
        kept = filter_occluded(points, depth, tol=cfg.occlusion_tol)
        footprint = rasterize_footprint(kept, (intr.height, intr.width))
        usable = footprint.bitmap & ~ego.bitmap
        coords = np.argwhere(usable)
        if len(coords):
            rng = np.random.default_rng(derive_seed(seed, 5, f))
            pick = rng.choice(len(coords), size=min(cfg.mask_query_points, len(coords)),
                              replace=False)
            queries = coords[pick]
        else:
            queries = np.zeros((0, 2), dtype=np.int64)
        masks = propose_masks(
            sem, queries, jitter=cfg.mask_jitter, false_rate=cfg.mask_false_rate,
            seed=derive_seed(seed, 6, f),
        )

        frame_dir = out / "frames" / f"{f:03d}"
        frame_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(sem, mode="L").save(frame_dir / "semantic.png")
        write_depth(frame_dir / "depth.trvd", depth)
        write_feature_map(frame_dir / "features.trvf", fmap)
        write_masks(frame_dir / "masks.trvm", masks)
        write_pose_csv(frame_dir / "poses.csv", window)

        gt_classes = gt_bev_classes(world, pose, bev_grid)
        write_bev(
            frame_dir / "gt_bev.trvb",
            BevCostmap(
                costs=gt_classes.astype(np.float64),
                known=np.ones_like(gt_classes, dtype=bool),
                grid=bev_grid,
            ),
        )
        rel = f"frames/{f:03d}"
        entries.append(
            {
                "image": f"{rel}/semantic.png",
                "depth": f"{rel}/depth.trvd",
                "features": f"{rel}/features.trvf",
                "masks": f"{rel}/masks.trvm",
                "poses": f"{rel}/poses.csv",
                "calibration": "calibration.json",
                "gt_bev": f"{rel}/gt_bev.trvb",
                "time_s": float(track.times[start]),
            }
        )
    manifest = out / "manifest.json"
    write_manifest(manifest, entries)
    return manifest

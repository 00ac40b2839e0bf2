"""Sampling-based planner (MPPI) over BEV costmaps, plus collision evaluation.

The vehicle follows a kinematic bicycle: per step of dt seconds,

    x += v cos(theta) dt        y += v sin(theta) dt
    theta += v tan(steer) / wheelbase dt
    v = max(0, v + accel dt)

Rollout costs sum the costmap under each state (weighted), add a terminal
distance-to-goal term, and a large fixed penalty for every state in a
lethal cell or off the grid.  Weights follow exp(-(S - min S) / lambda),
normalized to sum to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .costmap import BevCostmap
from .errors import DataError, NumericError
from .geometry import BevGridConfig

# Score added per off-grid or lethal-cell state; well above any reachable
# in-grid trajectory cost so such rollouts effectively drop out.
INFEASIBLE_PENALTY = 1.0e6


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.x, self.y, self.heading, self.speed], dtype=np.float64)


@dataclass(frozen=True)
class MppiConfig:
    horizon_steps: int = 50
    dt: float = 0.1
    rollouts: int = 512
    lam: float = 1.0
    noise_sigma_steer: float = 0.15
    noise_sigma_accel: float = 0.5
    max_steer: float = 0.5
    max_accel: float = 2.0
    wheelbase: float = 2.5
    goal_weight: float = 5.0
    cost_weight: float = 10.0
    lethal_threshold: float = 0.9
    success_cost_cap: float = 1.0e4

    def __post_init__(self):
        if self.horizon_steps < 1 or self.rollouts < 1:
            raise DataError("horizon_steps and rollouts must be positive")
        if self.dt <= 0 or self.lam <= 0 or self.wheelbase <= 0:
            raise DataError("dt, lambda and wheelbase must be positive")


@dataclass(frozen=True)
class GroundTruthBev:
    """Reference grid of terrain class ids with per-class cost and lethality."""

    classes: NDArray[np.int64]            # (rows, cols)
    cost_table: dict[int, float]
    lethal: dict[int, bool]
    grid: BevGridConfig | None = None

    def __post_init__(self):
        cls = np.asarray(self.classes, dtype=np.int64)
        present = set(int(c) for c in np.unique(cls))
        missing = sorted(present - set(self.cost_table))
        if missing:
            raise DataError(f"class ids {missing} missing from cost table")
        missing_l = sorted(present - set(self.lethal))
        if missing_l:
            raise DataError(f"class ids {missing_l} missing from lethal table")
        object.__setattr__(self, "classes", cls)

    def cost_grid(self) -> NDArray[np.float64]:
        out = np.zeros(self.classes.shape, dtype=np.float64)
        for cid, cost in self.cost_table.items():
            out[self.classes == cid] = cost
        return out

    def lethal_grid(self) -> NDArray[np.bool_]:
        out = np.zeros(self.classes.shape, dtype=bool)
        for cid, flag in self.lethal.items():
            if flag:
                out[self.classes == cid] = True
        return out


def rollout(
    state: VehicleState, controls: NDArray, cfg: MppiConfig
) -> NDArray[np.float64]:
    """Integrate one control sequence; returns (horizon+1, 4) states, start first.

    Controls are (horizon, 2) [steer, accel]; both are clamped to the
    configured bounds and speed never goes negative.
    """
    u = np.asarray(controls, dtype=np.float64)
    if u.shape != (cfg.horizon_steps, 2):
        raise DataError(f"controls must be ({cfg.horizon_steps}, 2), got {u.shape}")
    steer = np.clip(u[:, 0], -cfg.max_steer, cfg.max_steer)
    accel = np.clip(u[:, 1], -cfg.max_accel, cfg.max_accel)
    states = np.empty((cfg.horizon_steps + 1, 4), dtype=np.float64)
    states[0] = state.as_array()
    x, y, th, v = states[0]
    for t in range(cfg.horizon_steps):
        x += v * math.cos(th) * cfg.dt
        y += v * math.sin(th) * cfg.dt
        th += v * math.tan(steer[t]) / cfg.wheelbase * cfg.dt
        v = max(0.0, v + accel[t] * cfg.dt)
        states[t + 1] = (x, y, th, v)
    return states


def _batch_rollout(
    state: VehicleState, controls: NDArray, cfg: MppiConfig
) -> NDArray[np.float64]:
    """Vectorized rollout of (K, horizon, 2) control batches -> (K, horizon+1, 4)."""
    k = controls.shape[0]
    steer = np.clip(controls[:, :, 0], -cfg.max_steer, cfg.max_steer)
    accel = np.clip(controls[:, :, 1], -cfg.max_accel, cfg.max_accel)
    states = np.empty((k, cfg.horizon_steps + 1, 4), dtype=np.float64)
    states[:, 0] = state.as_array()
    x = np.full(k, state.x)
    y = np.full(k, state.y)
    th = np.full(k, state.heading)
    v = np.full(k, state.speed)
    for t in range(cfg.horizon_steps):
        x = x + v * np.cos(th) * cfg.dt
        y = y + v * np.sin(th) * cfg.dt
        th = th + v * np.tan(steer[:, t]) / cfg.wheelbase * cfg.dt
        v = np.maximum(0.0, v + accel[:, t] * cfg.dt)
        states[:, t + 1, 0] = x
        states[:, t + 1, 1] = y
        states[:, t + 1, 2] = th
        states[:, t + 1, 3] = v
    return states


def _grid_lookup(
    costmap: BevCostmap, xs: NDArray, ys: NDArray
) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Costs under (x, y) positions; second output flags off-grid points."""
    g = costmap.grid
    i = np.floor((xs - g.origin[0]) / g.resolution).astype(np.int64)
    j = np.floor((ys - g.origin[1]) / g.resolution).astype(np.int64)
    off = (i < 0) | (i >= g.rows) | (j < 0) | (j >= g.cols)
    i = np.clip(i, 0, g.rows - 1)
    j = np.clip(j, 0, g.cols - 1)
    costs = costmap.costs[i, j]
    return np.where(off, 0.0, costs), off


def score_rollouts(
    states: NDArray, goal: tuple[float, float], costmap: BevCostmap, cfg: MppiConfig
) -> NDArray[np.float64]:
    """Total score per rollout: running weighted cell cost + terminal goal
    distance + infeasibility penalties for lethal or off-grid states."""
    xs, ys = states[..., 1:, 0], states[..., 1:, 1]
    cell_costs, off = _grid_lookup(costmap, xs, ys)
    lethal = cell_costs >= cfg.lethal_threshold
    running = cfg.cost_weight * cell_costs.sum(axis=-1)
    running = running + INFEASIBLE_PENALTY * (off | lethal).sum(axis=-1)
    gx, gy = goal
    terminal = np.hypot(states[..., -1, 0] - gx, states[..., -1, 1] - gy)
    return running + cfg.goal_weight * terminal


@dataclass(frozen=True)
class MppiResult:
    controls: NDArray[np.float64]     # (horizon, 2) weighted-average sequence
    states: NDArray[np.float64]       # (horizon+1, 4) rollout of those controls
    cost: float                       # score of that rollout
    weights: NDArray[np.float64]      # (K,) normalized sample weights
    sample_costs: NDArray[np.float64] # (K,) scores of the sampled rollouts


def mppi_plan(
    costmap: BevCostmap,
    state: VehicleState,
    goal: tuple[float, float],
    cfg: MppiConfig,
    seed: int,
    nominal: NDArray | None = None,
) -> MppiResult:
    """One MPPI update: sample K noisy control sequences around the nominal,
    weight by exp(-(S - min S)/lambda), and return their weighted average.

    Deterministic for a given seed.  Pass the previous result's controls
    (time-shifted) as `nominal` for receding-horizon use.
    """
    if nominal is None:
        nominal = np.zeros((cfg.horizon_steps, 2), dtype=np.float64)
    nominal = np.asarray(nominal, dtype=np.float64)
    if nominal.shape != (cfg.horizon_steps, 2):
        raise DataError(f"nominal controls must be ({cfg.horizon_steps}, 2)")
    rng = np.random.default_rng(seed)
    noise = np.empty((cfg.rollouts, cfg.horizon_steps, 2))
    noise[:, :, 0] = rng.normal(0.0, cfg.noise_sigma_steer, (cfg.rollouts, cfg.horizon_steps))
    noise[:, :, 1] = rng.normal(0.0, cfg.noise_sigma_accel, (cfg.rollouts, cfg.horizon_steps))
    sampled = nominal[None] + noise
    sampled[:, :, 0] = np.clip(sampled[:, :, 0], -cfg.max_steer, cfg.max_steer)
    sampled[:, :, 1] = np.clip(sampled[:, :, 1], -cfg.max_accel, cfg.max_accel)

    states = _batch_rollout(state, sampled, cfg)
    scores = score_rollouts(states, goal, costmap, cfg)
    shifted = (scores - scores.min()) / cfg.lam
    w = np.exp(-shifted)
    w_sum = w.sum()
    if not np.isfinite(w_sum) or w_sum <= 0:
        raise NumericError("MPPI weights degenerate (all scores non-finite?)")
    w = w / w_sum

    controls = np.einsum("k,kto->to", w, sampled)
    best_states = rollout(state, controls, cfg)
    best_cost = float(score_rollouts(best_states[None], goal, costmap, cfg)[0])
    return MppiResult(
        controls=controls, states=best_states, cost=best_cost, weights=w,
        sample_costs=scores,
    )


def shift_controls(controls: NDArray) -> NDArray[np.float64]:
    """Warm-start helper: drop the first control, repeat the last."""
    out = np.roll(np.asarray(controls, dtype=np.float64), -1, axis=0)
    out[-1] = out[-2]
    return out


@dataclass(frozen=True)
class CollisionFrame:
    """Everything needed to evaluate the planner on one frame."""

    costmap: BevCostmap               # predicted, fully known (inpainted)
    gt: GroundTruthBev                # class grid on the same grid config
    state: VehicleState               # start state in the grid frame
    goal: tuple[float, float]


@dataclass(frozen=True)
class CollisionReport:
    frames: int
    successful_runs: int
    collisions: int
    rate: float
    per_frame: list[dict]

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "successful_runs": self.successful_runs,
            "collisions": self.collisions,
            "rate": self.rate,
            "per_frame": self.per_frame,
        }


def evaluate_collisions(
    frames: list[CollisionFrame], cfg: MppiConfig, seed: int
) -> CollisionReport:
    """Plan once per frame and count lethal-ground-truth contacts.

    A run is successful when its optimal trajectory stays on the grid and
    its score stays under the configured cap; the collision rate is
    collisions / successful runs.  Zero successful runs is an error.
    """
    if not frames:
        raise DataError("evaluate_collisions needs at least one frame")
    per_frame: list[dict] = []
    successful = 0
    collisions = 0
    for idx, fr in enumerate(frames):
        if fr.gt.classes.shape != fr.costmap.costs.shape:
            raise DataError(f"frame {idx}: GT and costmap grids disagree")
        result = mppi_plan(
            fr.costmap, fr.state, fr.goal, cfg, seed=derive_frame_seed(seed, idx)
        )
        xs, ys = result.states[1:, 0], result.states[1:, 1]
        g = fr.costmap.grid
        i = np.floor((xs - g.origin[0]) / g.resolution).astype(np.int64)
        j = np.floor((ys - g.origin[1]) / g.resolution).astype(np.int64)
        on_grid = (i >= 0) & (i < g.rows) & (j >= 0) & (j < g.cols)
        success = bool(on_grid.all() and result.cost < cfg.success_cost_cap)
        collided = False
        if success:
            lethal = fr.gt.lethal_grid()
            collided = bool(lethal[i, j].any())
            successful += 1
            collisions += int(collided)
        per_frame.append(
            {"frame": idx, "success": success, "collision": collided,
             "cost": result.cost}
        )
    if successful == 0:
        raise NumericError("no successful planner runs; collision rate undefined")
    return CollisionReport(
        frames=len(frames),
        successful_runs=successful,
        collisions=collisions,
        rate=collisions / successful,
        per_frame=per_frame,
    )


def derive_frame_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])

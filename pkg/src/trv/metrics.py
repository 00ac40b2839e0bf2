"""Classification metrics and evaluation helpers.

Label convention: 1 = traversable, and the score is the similarity (higher
means more traversable).  AUROC comes from the rank statistic with tied
scores counting half; average precision integrates the precision-recall
steps; the F1 operating point is searched over every distinct score used
as a `score >= t` threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .control import GroundTruthBev
from .costmap import BevCostmap
from .errors import DataError, NumericError


@dataclass(frozen=True)
class MetricReport:
    auroc: float
    average_precision: float
    f1: float
    threshold: float
    precision: float
    recall: float
    fpr: float
    fnr: float
    n_pos: int
    n_neg: int

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "ap": self.average_precision,
            "f1": self.f1,
            "threshold": self.threshold,
            "precision": self.precision,
            "recall": self.recall,
            "fpr": self.fpr,
            "fnr": self.fnr,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


def _ranks_with_ties(values: NDArray[np.float64]) -> NDArray[np.float64]:
    """1-based ranks, ties sharing the average of their rank range."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores: NDArray, labels: NDArray) -> float:
    """Probability a random positive outranks a random negative (ties = 0.5)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise NumericError("AUROC needs both classes present")
    ranks = _ranks_with_ties(s)
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _pr_curve(scores: NDArray, labels: NDArray):
    """Cumulative TP/FP after each distinct-score group, descending."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # Group boundaries: last index of each distinct score.
    distinct_last = np.nonzero(np.diff(s) != 0)[0]
    boundaries = np.concatenate([distinct_last, [len(s) - 1]])
    tp_cum = np.cumsum(y)
    fp_cum = np.cumsum(1 - y)
    tp = tp_cum[boundaries].astype(np.float64)
    fp = fp_cum[boundaries].astype(np.float64)
    thresholds = s[boundaries]
    return tp, fp, thresholds


def average_precision(scores: NDArray, labels: NDArray) -> float:
    """Step-wise integral of the precision-recall curve."""
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0 or int((y == 0).sum()) == 0:
        raise NumericError("average precision needs both classes present")
    tp, fp, _ = _pr_curve(scores, labels)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def classification_metrics(scores: NDArray, labels: NDArray) -> MetricReport:
    """AUROC, AP and the best-F1 operating point with its error rates."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("scores and labels must be equal-length 1-D arrays")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise NumericError("metrics need both classes present")

    tp, fp, thresholds = _pr_curve(s, y)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(denom), where=denom > 0)
    best = int(np.argmax(f1))  # first max = highest threshold on ties

    fn = n_pos - tp[best]
    return MetricReport(
        auroc=auroc(s, y),
        average_precision=average_precision(s, y),
        f1=float(f1[best]),
        threshold=float(thresholds[best]),
        precision=float(precision[best]),
        recall=float(recall[best]),
        fpr=float(fp[best] / n_neg),
        fnr=float(fn / n_pos),
        n_pos=n_pos,
        n_neg=n_neg,
    )


def cell_label_grid(
    semantic: NDArray[np.integer],
    stride: int,
    traversable: dict[int, bool],
    labeled: dict[int, bool],
) -> tuple[NDArray[np.int64], NDArray[np.bool_]]:
    """Per-feature-cell binary labels from a semantic image.

    Each stride x stride block takes the majority class over its labeled
    pixels (ties break to the smaller class id); blocks with no labeled
    pixel are flagged invalid.  Returns (labels, valid) at the cell grid
    shape, labels 1 where the majority class is traversable.
    """
    sem = np.asarray(semantic)
    h, w = sem.shape
    if h % stride or w % stride:
        raise DataError(f"image shape {sem.shape} not divisible by stride {stride}")
    gh, gw = h // stride, w // stride
    blocks = sem.reshape(gh, stride, gw, stride).transpose(0, 2, 1, 3).reshape(gh, gw, -1)
    labels = np.zeros((gh, gw), dtype=np.int64)
    valid = np.zeros((gh, gw), dtype=bool)
    labeled_ids = {cid for cid, flag in labeled.items() if flag}
    for i in range(gh):
        for j in range(gw):
            vals = blocks[i, j]
            best_id, best_count = -1, 0
            for cid in np.unique(vals):
                cid = int(cid)
                if cid not in labeled_ids:
                    continue
                count = int((vals == cid).sum())
                if count > best_count:
                    best_id, best_count = cid, count
            if best_id >= 0:
                valid[i, j] = True
                labels[i, j] = 1 if traversable.get(best_id, False) else 0
    return labels, valid


def l1_cost_error(predicted: BevCostmap, gt: GroundTruthBev) -> float:
    """Mean absolute difference to the manual per-class costs, known cells only."""
    if predicted.costs.shape != gt.classes.shape:
        raise DataError("prediction and ground truth grids disagree on shape")
    if not predicted.known.any():
        raise NumericError("no known cells to evaluate")
    ref = gt.cost_grid()
    diff = np.abs(predicted.costs - ref)[predicted.known]
    return float(diff.mean())


def _candidate_error(
    candidate: tuple[float, float],
    train_frames,
    val_frames,
    encoder,
    train_cfg,
    base_loss_cfg,
    cost_table: dict[int, float],
    lethal_table: dict[int, bool],
) -> float:
    """Train one (tau, omega_mask) setting and return its validation L1 error."""
    from dataclasses import replace

    from . import trainer
    from .costmap import load_bev, project_costs_to_bev, similarity_map, to_cost
    from .features import load_depth
    from .geometry import load_calibration

    tau, omega = candidate
    loss_cfg = replace(base_loss_cfg, tau=tau, omega_mask=omega)
    result = trainer.train(train_frames, encoder, train_cfg, loss_cfg)
    errors = []
    calib_cache: dict = {}
    for frame in val_frames:
        if frame.gt_bev is None:
            raise DataError(f"validation frame {frame.image} has no gt_bev entry")
        key = str(frame.calibration)
        if key not in calib_cache:
            intr, rig, _ = load_calibration(frame.calibration)
            calib_cache[key] = (intr, rig)
        intr, rig = calib_cache[key]
        decoded = result.decoder.decode(encoder.encode(frame))
        costs = to_cost(similarity_map(decoded, result.vector))
        gt_bev = load_bev(frame.gt_bev)
        predicted = project_costs_to_bev(
            costs, decoded.stride, load_depth(frame.depth), intr, rig, gt_bev.grid,
        )
        gt = GroundTruthBev(
            classes=np.rint(gt_bev.costs).astype(np.int64),
            cost_table=cost_table,
            lethal=lethal_table,
            grid=gt_bev.grid,
        )
        errors.append(l1_cost_error(predicted, gt))
    return float(np.mean(errors))


def select_hyperparams(
    candidates: list[tuple[float, float]],
    train_frames,
    val_frames,
    encoder,
    train_cfg,
    base_loss_cfg,
    cost_table: dict[int, float],
    lethal_table: dict[int, bool],
) -> tuple[tuple[float, float], list[dict]]:
    """Train per (tau, omega_mask) candidate and rank by validation L1 error.

    Returns the argmin candidate (ties break toward the earlier one) and
    the full table.  TRV_THREADS caps parallel candidate training; results
    are collected in candidate order, so the outcome does not depend on it.
    """
    import os
    from concurrent.futures import ThreadPoolExecutor
    from functools import partial

    if not candidates:
        raise DataError("select_hyperparams needs at least one candidate")
    run = partial(
        _candidate_error,
        train_frames=train_frames,
        val_frames=val_frames,
        encoder=encoder,
        train_cfg=train_cfg,
        base_loss_cfg=base_loss_cfg,
        cost_table=cost_table,
        lethal_table=lethal_table,
    )
    max_threads = os.environ.get("TRV_THREADS")
    workers = max(1, int(max_threads)) if max_threads else 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            errors = list(pool.map(run, candidates))
    else:
        errors = [run(c) for c in candidates]
    table = [
        {"tau": c[0], "omega_mask": c[1], "l1_cost_error": float(e)}
        for c, e in zip(candidates, errors)
    ]
    best_idx = int(np.argmin([row["l1_cost_error"] for row in table]))
    return candidates[best_idx], table

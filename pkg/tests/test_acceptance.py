"""Acceptance checklist for the shipped guarantees.

One test per guarantee; `pytest -v tests/test_acceptance.py` prints one
pass/fail line each.  The heavyweight scenarios drive the real CLI on
freshly generated synthetic datasets, so this module is the slow part of
the suite (several minutes of CPU); stated runtime budgets are asserted
inside the tests that carry them.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest

from trv.cli import main
from trv.control import (
    CollisionFrame,
    GroundTruthBev,
    MppiConfig,
    VehicleState,
    evaluate_collisions,
    mppi_plan,
    shift_controls,
)
from trv.costmap import BevCostmap, load_bev, write_bev
from trv.features import FeatureMap, load_manifest
from trv.geometry import (
    BevGridConfig,
    CameraExtrinsics,
    CameraIntrinsics,
    DepthMap,
    ProjectedPoint,
    backproject_pixel,
    filter_occluded,
    project_points,
)
from trv.metrics import classification_metrics
from trv.sampling import SampleSet
from trv.simworld import load_class_table
from trv.trainer import Decoder, LossConfig, contrastive_loss, loss_with_weight_grads


def cli(*argv) -> None:
    rc = main([str(a) for a in argv])
    assert rc == 0, f"command failed ({rc}): {' '.join(str(a) for a in argv)}"


def read_auroc(report_dir) -> float:
    return json.load(open(report_dir / "report.json"))["auroc"]


def gt_cost_beliefs(manifest, pred_dir) -> None:
    """Write ground-truth per-class costs as the predicted BEV costmaps."""
    frames = load_manifest(manifest)
    cost_table, _, _, _ = load_class_table(manifest.parent / "world.json")
    lut = np.zeros(max(cost_table) + 1)
    for cid, cost in cost_table.items():
        lut[cid] = cost
    for idx, frame in enumerate(frames):
        gt = load_bev(frame.gt_bev)
        frame_dir = pred_dir / "frames" / f"{idx:03d}"
        frame_dir.mkdir(parents=True, exist_ok=True)
        write_bev(
            frame_dir / "bev_inpainted.trvb",
            BevCostmap(costs=lut[gt.costs.astype(np.int64)],
                       known=np.ones_like(gt.known), grid=gt.grid),
        )


# ---------------------------------------------------------------------------
# Independent references (duplicated on purpose; they must not share code
# with the implementations they check).
# ---------------------------------------------------------------------------


def naive_contrastive(pos, neg, tau):
    n, m = len(pos), len(neg)
    attract = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                attract += float(np.dot(pos[i], pos[j])) / tau
    repel = 0.0
    for i in range(n):
        total = 0.0
        for k in range(m):
            total += math.exp(float(np.dot(pos[i], neg[k])) / tau)
        repel += math.log(total)
    return -attract / (n * (n - 1)) + repel / n


def auroc_by_pair_counting(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else (0.5 if p == q else 0.0)
    return wins / (len(pos) * len(neg))


def ap_by_threshold_sweep(scores, labels):
    n_pos = int((labels == 1).sum())
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        predicted = scores >= t
        tp = int((predicted & (labels == 1)).sum())
        fp = int((predicted & (labels == 0)).sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# The checklist.
# ---------------------------------------------------------------------------


def test_01_contrastive_loss_matches_naive_reference():
    """Loss equals the double-sum reference within 1e-9; hand cases exact; < 1 s."""
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    started = time.perf_counter()

    loss, _, _ = contrastive_loss(np.stack([e1, e1]), e2[None], tau=1.0)
    assert loss == -1.0
    loss, _, _ = contrastive_loss(np.stack([e1, -e1]), e2[None], tau=2.0)
    assert loss == 0.5

    rng = np.random.default_rng(101)
    for _ in range(100):
        n = int(rng.integers(2, 17))
        m = int(rng.integers(1, 65))
        d = int(rng.integers(1, 9))
        tau = float(rng.uniform(0.05, 1.0))
        pos, neg = unit_rows(rng, n, d), unit_rows(rng, m, d)
        loss, _, _ = contrastive_loss(pos, neg, tau)
        assert abs(loss - naive_contrastive(pos, neg, tau)) <= 1e-9

    assert time.perf_counter() - started < 1.0


def test_02_weight_gradients_match_finite_differences():
    """Analytic decoder gradients vs central differences, 20 seeds, < 10 s."""
    started = time.perf_counter()
    h = 1e-5  # keeps f64 cancellation noise well under the 1e-4 budget
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        fmap = FeatureMap(values=rng.normal(size=(6, 6, 4)), stride=4)
        traj = SampleSet(positives=rng.integers(0, 24, size=(8, 2)),
                         negatives=rng.integers(0, 24, size=(16, 2)),
                         source="trajectory")
        mask = SampleSet(positives=rng.integers(0, 24, size=(8, 2)),
                         negatives=rng.integers(0, 24, size=(16, 2)),
                         source="mask")
        cfg = LossConfig(tau=0.2, omega_mask=0.3)
        decoder = Decoder((4, 8, 8, 4), seed=seed)
        _, gw, gb, _ = loss_with_weight_grads(decoder, fmap, traj, mask, cfg)
        for params, grads in ((decoder.weights, gw), (decoder.biases, gb)):
            for layer, grad in zip(params, grads):
                flat_p, flat_g = layer.reshape(-1), grad.reshape(-1)
                for idx in range(flat_p.size):
                    flat_p[idx] += h
                    up = loss_with_weight_grads(decoder, fmap, traj, mask, cfg)[0].total
                    flat_p[idx] -= 2 * h
                    dn = loss_with_weight_grads(decoder, fmap, traj, mask, cfg)[0].total
                    flat_p[idx] += h
                    fd = (up - dn) / (2 * h)
                    rel = abs(flat_g[idx] - fd) / max(1e-6, abs(flat_g[idx]) + abs(fd))
                    worst = max(worst, rel)
    assert worst < 1e-4
    assert time.perf_counter() - started < 10.0


def test_03_occlusion_and_projection_geometry_oracles():
    """filter_occluded == brute force on 1e4 points; round trip < 1e-6 px."""
    rng = np.random.default_rng(31)
    k = CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)

    vals = rng.uniform(0.05, 12.0, size=(128, 128)).astype(np.float32)
    vals[rng.uniform(size=(128, 128)) < 0.15] = 0.0
    depth = DepthMap(values=vals)
    points = [
        ProjectedPoint(u=float(rng.uniform(-0.49, 127.49)),
                       v=float(rng.uniform(-0.49, 127.49)),
                       z=float(rng.uniform(0.05, 12.0)),
                       index=i, side="left" if i % 2 == 0 else "right")
        for i in range(10_000)
    ]
    for tol in (0.0, 0.1):
        kept = filter_occluded(points, depth, tol=tol)
        want = [
            p for p in points
            if (d := float(vals[int(round(p.v)), int(round(p.u))])) <= 0
            or p.z <= d + tol
        ]
        assert [id(p) for p in kept] == [id(p) for p in want]

    worst = 0.0
    for _ in range(10):
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        ext = CameraExtrinsics(rotation=q, translation=rng.normal(size=3))
        u = rng.uniform(0, 127, size=1000)
        v = rng.uniform(0, 127, size=1000)
        z = rng.uniform(0.5, 50.0, size=1000)
        pts = np.stack([backproject_pixel(ui, vi, zi, k, ext)
                        for ui, vi, zi in zip(u, v, z)])
        uvz, valid = project_points(pts, k, ext)
        assert valid.all()
        worst = max(worst, np.abs(uvz[:, 0] - u).max(), np.abs(uvz[:, 1] - v).max())
    assert worst < 1e-6


def test_04_end_to_end_learning_on_held_out_frames(tmp_path):
    """Train on 50 frames, evaluate on 20 later frames of the same world:
    AUROC >= 0.95 within a 10-minute budget.  The EMA momentum is dialed to
    the dataset scale (50 updates); everything else is stock."""
    started = time.perf_counter()
    train_ds = tmp_path / "train_ds"
    eval_ds = tmp_path / "eval_ds"
    cli("sim-gen", "--out", train_ds, "--n-frames", 50, "--seed", 7)
    cli("sim-gen", "--out", eval_ds, "--n-frames", 20, "--frame-start", 300,
        "--seed", 7)
    cli("train", "--manifest", train_ds / "manifest.json", "--out", tmp_path / "run",
        "--ema-alpha", 0.9)
    cli("predict", "--manifest", eval_ds / "manifest.json",
        "--checkpoint", tmp_path / "run" / "checkpoint.trvc",
        "--out", tmp_path / "pred")
    cli("eval", "--mode", "metrics", "--manifest", eval_ds / "manifest.json",
        "--pred", tmp_path / "pred", "--out", tmp_path / "rep")

    report = json.load(open(tmp_path / "rep" / "report.json"))
    assert report["n_frames"] == 20
    assert report["auroc"] >= 0.95
    assert time.perf_counter() - started < 600.0


def test_05_mask_loss_ablation_improves_auroc(tmp_path):
    """On a world whose traversable band is 3x the driven footprint, adding
    the mask loss must beat the trajectory-only run by >= 0.02 AUROC."""
    started = time.perf_counter()
    gen = ["--trail-bands", 3, "--trail-band-angle-deg", 30,
           "--world-trail-halfwidth", 2.4, "--seed", 21]
    cli("sim-gen", "--out", tmp_path / "w_train", "--n-frames", 20, *gen)
    cli("sim-gen", "--out", tmp_path / "w_test", "--n-frames", 8,
        "--frame-start", 100, *gen)

    auroc = {}
    for name, omega in (("mask", 0.05), ("nomask", 0.0)):
        cli("train", "--manifest", tmp_path / "w_train" / "manifest.json",
            "--out", tmp_path / f"run_{name}", "--epochs", 5,
            "--ema-alpha", 0.9, "--omega-mask", omega, "--seed", 3)
        cli("predict", "--manifest", tmp_path / "w_test" / "manifest.json",
            "--checkpoint", tmp_path / f"run_{name}" / "checkpoint.trvc",
            "--out", tmp_path / f"pred_{name}")
        cli("eval", "--mode", "metrics",
            "--manifest", tmp_path / "w_test" / "manifest.json",
            "--pred", tmp_path / f"pred_{name}", "--out", tmp_path / f"rep_{name}")
        auroc[name] = read_auroc(tmp_path / f"rep_{name}")

    assert auroc["mask"] - auroc["nomask"] >= 0.02
    assert time.perf_counter() - started < 600.0


def test_06_mppi_straight_line_gap_threading_and_weights():
    """Zero costmap plans straight (< 1 cell); a lethal wall with a gap is
    threaded collision-free 100 times; sample weights always sum to 1."""
    grid = BevGridConfig()
    flat = BevCostmap(costs=np.zeros((grid.rows, grid.cols)),
                      known=np.ones((grid.rows, grid.cols), dtype=bool), grid=grid)

    plan_cfg = MppiConfig(lam=5.0)
    worst_dev = 0.0
    for seed in range(100):
        res = mppi_plan(flat, VehicleState(0.0, 0.0, 0.0, 2.0), (20.0, 0.0),
                        plan_cfg, seed=seed)
        worst_dev = max(worst_dev, float(np.abs(res.states[:, 1]).max()))
    assert worst_dev < grid.resolution

    costs = np.zeros((grid.rows, grid.cols))
    classes = np.zeros((grid.rows, grid.cols), dtype=np.int64)
    for i in range(grid.rows):
        for j in range(grid.cols):
            x, y = grid.cell_center(i, j)
            if 10.0 <= x < 11.0 and abs(y) > 1.5:
                costs[i, j] = 1.0
                classes[i, j] = 1
    wall = BevCostmap(costs=costs, known=np.ones_like(costs, dtype=bool), grid=grid)
    gt = GroundTruthBev(classes=classes, cost_table={0: 0.0, 1: 1.0},
                        lethal={0: False, 1: True}, grid=grid)
    frames = [CollisionFrame(costmap=wall, gt=gt,
                             state=VehicleState(0.5, 0.0, 0.0, 2.0), goal=(16.0, 0.0))
              for _ in range(100)]
    report = evaluate_collisions(frames, MppiConfig(), seed=17)
    assert report.successful_runs == 100
    assert report.collisions == 0

    nominal = None
    for it in range(30):
        res = mppi_plan(wall, VehicleState(0.5, 0.0, 0.0, 2.0), (16.0, 0.0),
                        MppiConfig(), seed=1000 + it, nominal=nominal)
        assert abs(res.weights.sum() - 1.0) <= 1e-12
        nominal = shift_controls(res.controls)


def test_07_collision_rate_with_ground_truth_costs(tmp_path):
    """Driving on the true costs over 100 frames collides <= 1% of the time."""
    ds = tmp_path / "ds"
    cli("sim-gen", "--out", ds, "--n-frames", 100, "--frame-spacing", 3,
        "--seed", 31)
    pred = tmp_path / "pred"
    gt_cost_beliefs(ds / "manifest.json", pred)
    cli("eval", "--mode", "mppi", "--manifest", ds / "manifest.json",
        "--pred", pred, "--out", tmp_path / "rep", "--seed", 5)
    report = json.load(open(tmp_path / "rep" / "report.json"))
    assert report["n_frames"] == 100
    assert report["successful_runs"] > 0
    assert report["rate"] <= 0.01


def test_08_adaptation_recovers_after_domain_shift(tmp_path):
    """Zero-shot transfer to a rotated-feature world degrades; a 10-frame,
    2-epoch adaptation recovers at least half of the lost AUROC."""
    cli("sim-gen", "--out", tmp_path / "a_train", "--n-frames", 20, "--seed", 7)
    cli("sim-gen", "--out", tmp_path / "a_test", "--n-frames", 8,
        "--frame-start", 100, "--seed", 7)
    shifted = ["--seed", 8, "--domain-shift-deg", 45]
    cli("sim-gen", "--out", tmp_path / "b_adapt", "--n-frames", 10, *shifted)
    cli("sim-gen", "--out", tmp_path / "b_test", "--n-frames", 8,
        "--frame-start", 100, *shifted)

    cli("train", "--manifest", tmp_path / "a_train" / "manifest.json",
        "--out", tmp_path / "src", "--epochs", 5, "--ema-alpha", 0.9, "--seed", 3)
    cli("adapt", "--manifest", tmp_path / "b_adapt" / "manifest.json",
        "--checkpoint", tmp_path / "src" / "checkpoint.trvc",
        "--out", tmp_path / "adapted", "--frames", 10, "--epochs", 2, "--seed", 5)

    auroc = {}
    for name, test_ds, ckpt in (
        ("in_domain", "a_test", tmp_path / "src" / "checkpoint.trvc"),
        ("zero_shot", "b_test", tmp_path / "src" / "checkpoint.trvc"),
        ("adapted", "b_test", tmp_path / "adapted" / "checkpoint.trvc"),
    ):
        cli("predict", "--manifest", tmp_path / test_ds / "manifest.json",
            "--checkpoint", ckpt, "--out", tmp_path / f"pred_{name}")
        cli("eval", "--mode", "metrics",
            "--manifest", tmp_path / test_ds / "manifest.json",
            "--pred", tmp_path / f"pred_{name}", "--out", tmp_path / f"rep_{name}")
        auroc[name] = read_auroc(tmp_path / f"rep_{name}")

    assert auroc["zero_shot"] < auroc["in_domain"]
    gap = auroc["in_domain"] - auroc["zero_shot"]
    recovered = auroc["adapted"] - auroc["zero_shot"]
    assert recovered >= 0.5 * gap


def test_09_metrics_match_brute_force_references():
    """AUROC by pair counting and AP by threshold sweep, within 1e-9."""
    rng = np.random.default_rng(91)
    for _ in range(10):
        scores = rng.integers(0, 40, size=200).astype(np.float64) / 40.0  # ties
        labels = (rng.uniform(size=200) < 0.4).astype(np.int64)
        labels[:2] = (0, 1)
        report = classification_metrics(scores, labels)
        assert abs(report.auroc - auroc_by_pair_counting(scores, labels)) <= 1e-9
        assert abs(report.average_precision - ap_by_threshold_sweep(scores, labels)) <= 1e-9


def test_10_seeded_reruns_are_byte_identical(tmp_path):
    """sim-gen, train and predict are reproducible down to the last byte."""

    def tree_bytes(root):
        return {
            str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()
        }

    for ds in ("ds_a", "ds_b"):
        cli("sim-gen", "--out", tmp_path / ds, "--n-frames", 4, "--seed", 7)
    assert tree_bytes(tmp_path / "ds_a") == tree_bytes(tmp_path / "ds_b")

    manifest = tmp_path / "ds_a" / "manifest.json"
    for run in ("run_a", "run_b"):
        cli("train", "--manifest", manifest, "--out", tmp_path / run)
    assert tree_bytes(tmp_path / "run_a") == tree_bytes(tmp_path / "run_b")

    for pred in ("pred_a", "pred_b"):
        cli("predict", "--manifest", manifest,
            "--checkpoint", tmp_path / "run_a" / "checkpoint.trvc",
            "--out", tmp_path / pred)
    assert tree_bytes(tmp_path / "pred_a") == tree_bytes(tmp_path / "pred_b")


def test_11_secondary_exporter_writes_conformant_files(tmp_path):
    """Files produced by the standalone exporter load through this package's
    validators with matching dims and stride.  Skipped when the exporter
    package is not installed; nothing here depends on it."""
    samx = pytest.importorskip("samx")
    from PIL import Image

    from trv.features import load_feature_map
    from trv.sampling import load_masks

    images = tmp_path / "images"
    images.mkdir()
    rng = np.random.default_rng(0)
    for name in ("a.png", "b.png"):
        Image.fromarray(rng.integers(0, 255, size=(64, 96, 3), dtype=np.uint8)).save(
            images / name
        )
    out = tmp_path / "export"
    rc = samx.cli.main(["export", "--images", str(images), "--out", str(out),
                        "--backend", "stub"])
    assert rc == 0

    doc = json.load(open(out / "export.json"))
    stride, dim = doc["stride"], doc["feature_dim"]
    for entry in doc["frames"]:
        fmap = load_feature_map(out / entry["features"])
        assert fmap.stride == stride
        assert fmap.values.shape == (64 // stride, 96 // stride, dim)
        masks = load_masks(out / entry["masks"])
        confs = [m.confidence for m in masks]
        assert confs == sorted(confs, reverse=True)
        for m in masks:
            assert m.bitmap.shape == (64, 96)
            assert 0.0 <= m.confidence <= 1.0

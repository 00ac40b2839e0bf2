"""Self-supervised training: per-cell MLP decoder, contrastive loss, EMA vector.

The encoder stays frozen; only the small per-cell decoder head learns.  For
a frame with positive samples P and negative samples N (pixel coordinates
mapped to feature cells), the per-pair InfoNCE-style loss is

    L = -1/(|P|(|P|-1)) * sum_{i != j in P} log( exp(F_i.F_j / tau)
                                                 / sum_{k in N} exp(F_i.F_k / tau) )

Note the denominator runs over negatives only, so L can go negative once
positives agree more strongly than any positive-negative pair.  All
reductions run in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .errors import DataError, EmptyRegionError, NumericError
from .features import EncoderHandle, FeatureMap, Frame
from .geometry import (
    CameraExtrinsics,
    CameraIntrinsics,
    load_calibration,
    load_pose_csv,
    project_track,
    filter_occluded,
    rasterize_footprint,
    vehicle_pose_from_wheels,
    world_to_vehicle,
)
from .sampling import (
    EgoMask,
    SampleSet,
    load_masks,
    sample_mask,
    sample_trajectory,
    select_mask,
)

CHECKPOINT_MAGIC = b"TRVC"
CHECKPOINT_VERSION = 1

_NORM_FLOOR = 1e-12  # zero-output guard in L2 normalization


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.05
    omega_mask: float = 0.05
    n_pos_traj: int = 256
    n_neg_traj: int = 1024
    n_pos_mask: int = 512
    n_neg_mask: int = 1024

    def __post_init__(self):
        if self.tau <= 0:
            raise DataError("tau must be positive")
        if not 0.0 <= self.omega_mask <= 1.0:
            raise DataError("omega_mask must be in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 2
    epochs: int = 1
    seed: int = 0
    ema_alpha: float = 0.999
    horizon: int = 300
    occlusion_tol: float = 0.1
    min_mask_area_frac: float = 0.005
    hidden: tuple[int, ...] = (256, 128)
    out_dim: int = 16


@dataclass(frozen=True)
class TraversabilityVector:
    """EMA of decoded positive-cell features; the similarity anchor."""

    z: NDArray[np.float64]
    alpha: float = 0.999
    initialized: bool = False


def _softplus(x: NDArray) -> NDArray:
    return np.logaddexp(0.0, x)


class Decoder:
    """Per-cell MLP head with L2-normalized outputs.

    Layers are fully connected with a softplus between them (smooth, so
    finite-difference gradient checks hold everywhere); the last layer is
    linear and its output is normalized to the unit sphere.
    """

    def __init__(self, dims: tuple[int, ...], seed: int = 0):
        if len(dims) < 2:
            raise DataError("decoder needs at least input and output dims")
        self.dims = tuple(int(d) for d in dims)
        rng = np.random.default_rng(seed)
        self.weights: list[NDArray[np.float64]] = []
        self.biases: list[NDArray[np.float64]] = []
        for d_in, d_out in zip(self.dims[:-1], self.dims[1:]):
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)))
            self.biases.append(np.zeros(d_out))

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def forward(self, x: NDArray) -> tuple[NDArray[np.float64], dict]:
        """(n, D_in) -> unit-norm (n, D_out) plus a cache for backward."""
        a = np.asarray(x, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != self.in_dim:
            raise DataError(f"decoder expects (n, {self.in_dim}) input, got {a.shape}")
        pre: list[NDArray] = []
        acts: list[NDArray] = [a]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            pre.append(z)
            acts.append(_softplus(z) if k < len(self.weights) - 1 else z)
        y = acts[-1]
        r = np.linalg.norm(y, axis=1, keepdims=True)
        r = np.maximum(r, _NORM_FLOOR)
        f = y / r
        return f, {"pre": pre, "acts": acts, "f": f, "r": r}

    def backward(self, cache: dict, df: NDArray) -> tuple[list[NDArray], list[NDArray]]:
        """Gradients of a scalar loss wrt weights/biases, given dL/d(normalized output)."""
        f, r = cache["f"], cache["r"]
        df = np.asarray(df, dtype=np.float64)
        # Through y -> y/||y||:  dy = (df - f (f . df)) / r
        dy = (df - f * np.sum(f * df, axis=1, keepdims=True)) / r
        grads_w: list[NDArray] = [None] * len(self.weights)  # type: ignore[list-item]
        grads_b: list[NDArray] = [None] * len(self.biases)   # type: ignore[list-item]
        delta = dy
        for k in range(len(self.weights) - 1, -1, -1):
            a_prev = cache["acts"][k]
            grads_w[k] = a_prev.T @ delta
            grads_b[k] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.weights[k].T) * expit(cache["pre"][k - 1])
        return grads_w, grads_b

    def decode(self, fmap: FeatureMap) -> FeatureMap:
        """Apply to every cell of a feature map."""
        h, w, d = fmap.values.shape
        if d != self.in_dim:
            raise DataError(f"feature dim {d} does not match decoder input {self.in_dim}")
        out, _ = self.forward(fmap.values.reshape(h * w, d))
        return FeatureMap(values=out.reshape(h, w, self.out_dim), stride=fmap.stride)

    def copy(self) -> "Decoder":
        dup = Decoder.__new__(Decoder)
        dup.dims = self.dims
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup


def decode(decoder: Decoder, fmap: FeatureMap) -> FeatureMap:
    return decoder.decode(fmap)


def contrastive_loss(
    pos: NDArray, neg: NDArray, tau: float
) -> tuple[float, NDArray[np.float64], NDArray[np.float64]]:
    """Loss over all ordered positive pairs, plus gradients wrt both feature sets.

    pos: (N, D) with N >= 2; neg: (M, D) with M >= 1.  The log-sum-exp over
    negatives is max-shifted for stability.  Returns (loss, dL/dpos, dL/dneg).
    """
    u = np.asarray(pos, dtype=np.float64)
    v = np.asarray(neg, dtype=np.float64)
    if u.ndim != 2 or v.ndim != 2:
        raise DataError("contrastive_loss expects 2-D sample arrays")
    n, m = len(u), len(v)
    if n < 2:
        raise NumericError(f"contrastive_loss needs >= 2 positives, got {n}")
    if m < 1:
        raise NumericError("contrastive_loss needs >= 1 negative")
    if tau <= 0:
        raise DataError("tau must be positive")

    pos_logits = (u @ u.T) / tau          # (N, N)
    neg_logits = (u @ v.T) / tau          # (N, M)
    shift = neg_logits.max(axis=1, keepdims=True)
    exp_shift = np.exp(neg_logits - shift)
    sum_exp = exp_shift.sum(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(sum_exp[:, 0])

    off_diag = pos_logits.sum() - np.trace(pos_logits)
    loss = -off_diag / (n * (n - 1)) + lse.mean()

    softmax = exp_shift / sum_exp         # (N, M), rows sum to 1
    s = u.sum(axis=0)
    d_pos = -2.0 / (n * (n - 1) * tau) * (s - u) + (softmax @ v) / (n * tau)
    d_neg = (softmax.T @ u) / (n * tau)
    return float(loss), d_pos, d_neg


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    trajectory: float
    mask: float


def _cells_of(samples: NDArray[np.int64], stride: int) -> NDArray[np.int64]:
    return samples // stride


def combined_loss(
    decoded: FeatureMap,
    traj: SampleSet,
    mask: SampleSet | None,
    cfg: LossConfig,
) -> tuple[LossBreakdown, NDArray[np.int64], NDArray[np.float64]]:
    """Weighted trajectory + mask loss on a decoded map.

    Returns the loss breakdown plus gradients wrt the decoded features as
    (cells (k, 2), dF (k, D)) over the unique cells touched by any sample.
    With no mask the mask weight is treated as zero.
    """
    omega = cfg.omega_mask if mask is not None else 0.0
    groups = [traj.positives, traj.negatives]
    if mask is not None:
        groups += [mask.positives, mask.negatives]
    cells = np.concatenate([_cells_of(g, decoded.stride) for g in groups], axis=0)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    feats = decoded.values[uniq[:, 0], uniq[:, 1]]

    bounds = np.cumsum([0] + [len(g) for g in groups])
    idx = [inverse[bounds[i]:bounds[i + 1]] for i in range(len(groups))]

    d_unique = np.zeros_like(feats)
    l_traj, g_pos, g_neg = contrastive_loss(feats[idx[0]], feats[idx[1]], cfg.tau)
    np.add.at(d_unique, idx[0], (1.0 - omega) * g_pos)
    np.add.at(d_unique, idx[1], (1.0 - omega) * g_neg)
    l_mask = 0.0
    if mask is not None:
        l_mask, g_pos_m, g_neg_m = contrastive_loss(feats[idx[2]], feats[idx[3]], cfg.tau)
        np.add.at(d_unique, idx[2], omega * g_pos_m)
        np.add.at(d_unique, idx[3], omega * g_neg_m)
    total = (1.0 - omega) * l_traj + omega * l_mask
    return LossBreakdown(total=total, trajectory=l_traj, mask=l_mask), uniq, d_unique


def loss_with_weight_grads(
    decoder: Decoder,
    fmap: FeatureMap,
    traj: SampleSet,
    mask: SampleSet | None,
    cfg: LossConfig,
) -> tuple[LossBreakdown, list[NDArray], list[NDArray], NDArray[np.float64]]:
    """Full chain: encode cells -> decoder -> combined loss -> weight gradients.

    Only the cells touched by samples go through the decoder.  Also returns
    the decoded trajectory-positive features (one row per sample) for the
    EMA update.
    """
    omega = cfg.omega_mask if mask is not None else 0.0
    groups = [traj.positives, traj.negatives]
    if mask is not None:
        groups += [mask.positives, mask.negatives]
    cells = np.concatenate([_cells_of(g, fmap.stride) for g in groups], axis=0)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    x = fmap.values[uniq[:, 0], uniq[:, 1]]
    f, cache = decoder.forward(x)

    bounds = np.cumsum([0] + [len(g) for g in groups])
    idx = [inverse[bounds[i]:bounds[i + 1]] for i in range(len(groups))]

    df = np.zeros_like(f)
    l_traj, g_pos, g_neg = contrastive_loss(f[idx[0]], f[idx[1]], cfg.tau)
    np.add.at(df, idx[0], (1.0 - omega) * g_pos)
    np.add.at(df, idx[1], (1.0 - omega) * g_neg)
    l_mask = 0.0
    if mask is not None:
        l_mask, g_pos_m, g_neg_m = contrastive_loss(f[idx[2]], f[idx[3]], cfg.tau)
        np.add.at(df, idx[2], omega * g_pos_m)
        np.add.at(df, idx[3], omega * g_neg_m)

    grads_w, grads_b = decoder.backward(cache, df)
    breakdown = LossBreakdown(
        total=(1.0 - omega) * l_traj + omega * l_mask, trajectory=l_traj, mask=l_mask
    )
    return breakdown, grads_w, grads_b, f[idx[0]]


def ema_update(vec: TraversabilityVector, pos_feats: NDArray) -> TraversabilityVector:
    """Blend the mean positive feature into z, normalizing before and after.

    An empty positive set leaves the vector unchanged; the first non-empty
    update initializes z to the normalized mean.
    """
    feats = np.asarray(pos_feats, dtype=np.float64)
    if feats.size == 0:
        return vec
    mean = feats.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < _NORM_FLOOR:
        return vec  # degenerate mean; nothing sensible to blend
    mean_hat = mean / norm
    if not vec.initialized:
        return replace(vec, z=mean_hat, initialized=True)
    blend = vec.alpha * vec.z + (1.0 - vec.alpha) * mean_hat
    bnorm = np.linalg.norm(blend)
    if bnorm < _NORM_FLOOR:
        return vec  # exactly antipodal blend; keep previous state
    return replace(vec, z=blend / bnorm, initialized=True)


def derive_seed(*parts: int) -> int:
    """Stable sub-seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class _CalibCache:
    intr: CameraIntrinsics
    rig: CameraExtrinsics
    ego: EgoMask


def _load_frame_calibration(frame: Frame, cache: dict) -> _CalibCache:
    key = str(frame.calibration)
    if key not in cache:
        intr, rig, ego_rel = load_calibration(frame.calibration)
        if ego_rel is not None:
            from .sampling import load_ego_mask  # local import: optional PIL use
            ego = load_ego_mask(Path(frame.calibration).parent / ego_rel)
        else:
            ego = EgoMask.empty((intr.height, intr.width))
        cache[key] = _CalibCache(intr=intr, rig=rig, ego=ego)
    return cache[key]


def frame_footprint(frame: Frame, calib: _CalibCache, cfg: TrainConfig):
    """Project the frame's wheel track into its image and rasterize the footprint."""
    from .features import load_depth

    track = load_pose_csv(frame.poses)
    track = replace(track, horizon=cfg.horizon)
    x, y, heading = vehicle_pose_from_wheels(track.left[0], track.right[0])
    world_to_cam = calib.rig.compose(world_to_vehicle(x, y, heading))
    points = project_track(track, calib.intr, world_to_cam)
    depth = load_depth(frame.depth)
    kept = filter_occluded(points, depth, tol=cfg.occlusion_tol)
    return rasterize_footprint(kept, (calib.intr.height, calib.intr.width))


@dataclass
class FrameSamples:
    traj: SampleSet
    mask: SampleSet | None
    footprint_area: int


def prepare_frame_samples(
    frame: Frame,
    calib: _CalibCache,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    traj_seed: int,
    mask_seed: int,
) -> FrameSamples:
    """Footprint -> trajectory samples; mask proposal -> mask samples.

    Raises EmptyRegionError when the frame has no usable footprint; a
    failed mask selection or mask sampling just drops the mask term.
    """
    fp = frame_footprint(frame, calib, train_cfg)
    if fp.area == 0:
        raise EmptyRegionError("empty driven footprint; skip frame")
    traj = sample_trajectory(
        fp.bitmap, calib.ego, loss_cfg.n_pos_traj, loss_cfg.n_neg_traj, traj_seed
    )
    mask_samples = None
    proposals = load_masks(frame.masks)
    n_pixels = calib.intr.height * calib.intr.width
    min_area = max(fp.area, int(round(train_cfg.min_mask_area_frac * n_pixels)))
    chosen = select_mask(proposals, min_area)
    if chosen is not None:
        try:
            mask_samples = sample_mask(
                chosen, calib.ego, loss_cfg.n_pos_mask, loss_cfg.n_neg_mask, mask_seed
            )
        except EmptyRegionError:
            mask_samples = None
    return FrameSamples(traj=traj, mask=mask_samples, footprint_area=fp.area)


@dataclass
class LogRow:
    step: int
    frame: int
    loss_traj: float
    loss_mask: float
    loss_total: float


@dataclass
class TrainResult:
    decoder: Decoder
    vector: TraversabilityVector
    log: list[LogRow]
    skipped: list[tuple[int, str]]


class _SgdMomentum:
    def __init__(self, decoder: Decoder, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.vel_w = [np.zeros_like(w) for w in decoder.weights]
        self.vel_b = [np.zeros_like(b) for b in decoder.biases]

    def step(self, decoder: Decoder, grads_w: list[NDArray], grads_b: list[NDArray]):
        for k in range(len(decoder.weights)):
            self.vel_w[k] = self.momentum * self.vel_w[k] + grads_w[k]
            self.vel_b[k] = self.momentum * self.vel_b[k] + grads_b[k]
            decoder.weights[k] -= self.lr * self.vel_w[k]
            decoder.biases[k] -= self.lr * self.vel_b[k]


def train(
    frames: list[Frame],
    encoder: EncoderHandle,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    decoder: Decoder | None = None,
    vector: TraversabilityVector | None = None,
) -> TrainResult:
    """SGD over frames in manifest order, one optimizer step per batch.

    The EMA vector updates once per frame from the decoded trajectory
    positives (before the weight step).  Frames whose footprint or sample
    regions are empty are skipped and reported.  Fully determined by
    train_cfg.seed.
    """
    if not frames:
        raise DataError("train called with an empty frame list")
    calib_cache: dict = {}
    log: list[LogRow] = []
    skipped: list[tuple[int, str]] = []
    optimizer: _SgdMomentum | None = None
    step = 0

    for epoch in range(train_cfg.epochs):
        batch_grads: tuple[list[NDArray], list[NDArray]] | None = None
        batch_count = 0

        def flush_batch():
            nonlocal batch_grads, batch_count, step, optimizer
            if batch_count == 0 or batch_grads is None:
                return
            gw = [g / batch_count for g in batch_grads[0]]
            gb = [g / batch_count for g in batch_grads[1]]
            optimizer.step(decoder, gw, gb)
            step += 1
            batch_grads = None
            batch_count = 0

        for fidx, frame in enumerate(frames):
            calib = _load_frame_calibration(frame, calib_cache)
            try:
                samples = prepare_frame_samples(
                    frame,
                    calib,
                    train_cfg,
                    loss_cfg,
                    traj_seed=derive_seed(train_cfg.seed, epoch, fidx, 0),
                    mask_seed=derive_seed(train_cfg.seed, epoch, fidx, 1),
                )
            except EmptyRegionError as e:
                skipped.append((fidx, str(e)))
                continue
            fmap = encoder.encode(frame)
            if decoder is None:
                decoder = Decoder(
                    (fmap.dim, *train_cfg.hidden, train_cfg.out_dim), seed=train_cfg.seed
                )
            if vector is None:
                vector = TraversabilityVector(
                    z=np.zeros(decoder.out_dim), alpha=train_cfg.ema_alpha
                )
            if optimizer is None:
                optimizer = _SgdMomentum(decoder, train_cfg.learning_rate, train_cfg.momentum)

            breakdown, gw, gb, pos_feats = loss_with_weight_grads(
                decoder, fmap, samples.traj, samples.mask, loss_cfg
            )
            vector = ema_update(vector, pos_feats)
            log.append(
                LogRow(
                    step=step,
                    frame=fidx,
                    loss_traj=breakdown.trajectory,
                    loss_mask=breakdown.mask,
                    loss_total=breakdown.total,
                )
            )
            if batch_grads is None:
                batch_grads = ([np.zeros_like(w) for w in gw], [np.zeros_like(b) for b in gb])
            for k in range(len(gw)):
                batch_grads[0][k] += gw[k]
                batch_grads[1][k] += gb[k]
            batch_count += 1
            if batch_count == train_cfg.batch_size:
                flush_batch()
        flush_batch()

    if decoder is None or vector is None:
        raise NumericError("every frame was skipped; nothing was trained")
    return TrainResult(decoder=decoder, vector=vector, log=log, skipped=skipped)


def adapt(
    decoder: Decoder,
    vector: TraversabilityVector,
    frames: list[Frame],
    encoder: EncoderHandle,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
) -> TrainResult:
    """Few-shot continuation of training from an existing decoder + vector."""
    if not frames:
        raise DataError("adapt called with an empty frame list")
    return train(
        frames, encoder, train_cfg, loss_cfg, decoder=decoder.copy(), vector=vector
    )


# ---------------------------------------------------------------------------
# Checkpoint file ("TRVC"): layer dims, f32 weights/biases in layer order,
# the EMA vector and alpha, and an echo of the loss configuration.
# ---------------------------------------------------------------------------


def save_checkpoint(path, decoder: Decoder, vector: TraversabilityVector,
                    loss_cfg: LossConfig) -> None:
    n_layers = len(decoder.weights)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, n_layers)]
    chunks.append(struct.pack(f"<{n_layers + 1}I", *decoder.dims))
    for w, b in zip(decoder.weights, decoder.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    chunks.append(struct.pack("<Bd", int(vector.initialized), float(vector.alpha)))
    chunks.append(np.ascontiguousarray(vector.z, dtype="<f4").tobytes())
    chunks.append(
        struct.pack(
            "<ffIIII",
            loss_cfg.tau,
            loss_cfg.omega_mask,
            loss_cfg.n_pos_traj,
            loss_cfg.n_neg_traj,
            loss_cfg.n_pos_mask,
            loss_cfg.n_neg_mask,
        )
    )
    from .features import _atomic_write

    _atomic_write(path, b"".join(chunks))


def load_checkpoint(path) -> tuple[Decoder, TraversabilityVector, LossConfig]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"checkpoint {path}: bad magic {blob[:4]!r}")
    try:
        version, n_layers = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"checkpoint {path}: unsupported version {version}")
        off = 12
        dims = struct.unpack_from(f"<{n_layers + 1}I", blob, off)
        off += 4 * (n_layers + 1)
        decoder = Decoder.__new__(Decoder)
        decoder.dims = tuple(int(d) for d in dims)
        decoder.weights, decoder.biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(blob, dtype="<f4", count=d_in * d_out, offset=off)
            off += 4 * d_in * d_out
            b = np.frombuffer(blob, dtype="<f4", count=d_out, offset=off)
            off += 4 * d_out
            decoder.weights.append(w.astype(np.float64).reshape(d_in, d_out))
            decoder.biases.append(b.astype(np.float64))
        initialized, alpha = struct.unpack_from("<Bd", blob, off)
        off += struct.calcsize("<Bd")
        z = np.frombuffer(blob, dtype="<f4", count=dims[-1], offset=off)
        off += 4 * dims[-1]
        tau, omega, npt, nnt, npm, nnm = struct.unpack_from("<ffIIII", blob, off)
        off += struct.calcsize("<ffIIII")
    except struct.error as e:
        raise DataError(f"checkpoint {path}: truncated ({e})") from e
    if off != len(blob):
        raise DataError(f"checkpoint {path}: {len(blob) - off} trailing bytes")
    vector = TraversabilityVector(
        z=z.astype(np.float64), alpha=float(alpha), initialized=bool(initialized)
    )
    loss_cfg = LossConfig(
        tau=float(tau), omega_mask=float(omega),
        n_pos_traj=int(npt), n_neg_traj=int(nnt),
        n_pos_mask=int(npm), n_neg_mask=int(nnm),
    )
    return decoder, vector, loss_cfg


def write_loss_log(path, rows: list[LogRow]) -> None:
    lines = ["step,frame,loss_traj,loss_mask,loss_total"]
    for r in rows:
        lines.append(
            f"{r.step},{r.frame},{r.loss_traj!r},{r.loss_mask!r},{r.loss_total!r}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

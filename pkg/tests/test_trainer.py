"""Contrastive loss, decoder gradients, EMA vector, and the training loop.

The loss under test, for positives u_1..u_n and negatives v_1..v_m:

    L = -(1/(n(n-1))) * sum_{i != j} (u_i . u_j)/tau
        + (1/n) * sum_i log( sum_k exp((u_i . v_k)/tau) )

naive_loss below evaluates that definition with plain Python loops; the
vectorized implementation must agree to 1e-9.  Gradients are checked by
hand on two tiny instances and by central finite differences everywhere
else.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from trv.errors import DataError, NumericError
from trv.features import FeatureMap, FileEncoder
from trv.sampling import SampleSet
from trv.trainer import (
    Decoder,
    LossConfig,
    TrainConfig,
    TraversabilityVector,
    adapt,
    combined_loss,
    contrastive_loss,
    derive_seed,
    ema_update,
    load_checkpoint,
    loss_with_weight_grads,
    save_checkpoint,
    train,
    write_loss_log,
)


def naive_loss(pos: np.ndarray, neg: np.ndarray, tau: float) -> float:
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


E1 = np.array([1.0, 0.0])
E2 = np.array([0.0, 1.0])


class TestContrastiveLossHandCases:
    def test_identical_positives_orthogonal_negative(self):
        # Attraction term: -(u1.u2) = -1.  Repulsion: log(exp(0)) = 0.
        loss, d_pos, d_neg = contrastive_loss(np.stack([E1, E1]), E2[None], tau=1.0)
        assert loss == pytest.approx(-1.0, abs=1e-15)
        # d/du_i = -(s - u_i) + softmax @ v / 2 with s = 2 e1.
        np.testing.assert_allclose(d_pos, np.stack([-E1 + E2 / 2, -E1 + E2 / 2]), atol=1e-15)
        np.testing.assert_allclose(d_neg, E1[None], atol=1e-15)

    def test_antipodal_positives_at_tau_2(self):
        # Attraction: -(-1)/tau = +0.5.  Repulsion: log(exp(0)) = 0.
        loss, d_pos, d_neg = contrastive_loss(np.stack([E1, -E1]), E2[None], tau=2.0)
        assert loss == pytest.approx(0.5, abs=1e-15)
        np.testing.assert_allclose(
            d_pos, np.stack([E1 / 2 + E2 / 4, -E1 / 2 + E2 / 4]), atol=1e-15
        )
        np.testing.assert_allclose(d_neg, np.zeros((1, 2)), atol=1e-15)


class TestContrastiveLossAgainstNaive:
    def test_100_random_instances(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            n = int(rng.integers(2, 17))
            m = int(rng.integers(1, 65))
            d = int(rng.integers(1, 9))
            pos = rng.normal(size=(n, d))
            pos /= np.linalg.norm(pos, axis=1, keepdims=True)
            neg = rng.normal(size=(m, d))
            neg /= np.linalg.norm(neg, axis=1, keepdims=True)
            tau = float(rng.uniform(0.05, 1.0))
            loss, _, _ = contrastive_loss(pos, neg, tau)
            assert loss == pytest.approx(naive_loss(pos, neg, tau), abs=1e-9)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        pos = rng.normal(size=(4, 3))
        neg = rng.normal(size=(6, 3))
        tau = 0.3
        _, d_pos, d_neg = contrastive_loss(pos, neg, tau)
        h = 1e-6
        for arr, grad in ((pos, d_pos), (neg, d_neg)):
            for i in range(arr.shape[0]):
                for j in range(arr.shape[1]):
                    arr[i, j] += h
                    up, _, _ = contrastive_loss(pos, neg, tau)
                    arr[i, j] -= 2 * h
                    dn, _, _ = contrastive_loss(pos, neg, tau)
                    arr[i, j] += h
                    assert grad[i, j] == pytest.approx((up - dn) / (2 * h), abs=1e-7)

    def test_extreme_temperature_stays_finite(self):
        rng = np.random.default_rng(5)
        pos = rng.normal(size=(4, 3))
        neg = rng.normal(size=(8, 3)) * 10.0
        loss, d_pos, d_neg = contrastive_loss(pos, neg, tau=0.01)
        assert np.isfinite(loss)
        assert np.isfinite(d_pos).all() and np.isfinite(d_neg).all()

    def test_error_cases(self):
        ok = np.ones((2, 2))
        with pytest.raises(NumericError, match="positives"):
            contrastive_loss(ok[:1], ok, tau=1.0)
        with pytest.raises(NumericError, match="negative"):
            contrastive_loss(ok, ok[:0], tau=1.0)
        with pytest.raises(DataError, match="tau"):
            contrastive_loss(ok, ok, tau=0.0)
        with pytest.raises(DataError):
            contrastive_loss(np.ones(2), ok, tau=1.0)


def random_samples(rng, img=24, n_pos=8, n_neg=16, source="trajectory"):
    pick = lambda n: np.stack(
        [rng.integers(0, img, size=n), rng.integers(0, img, size=n)], axis=1
    ).astype(np.int64)
    return SampleSet(positives=pick(n_pos), negatives=pick(n_neg), source=source)


class TestCombinedLoss:
    """Reference: look features up per sample (duplicates repeat) and call
    naive_loss on each term; the cell-deduplicated fast path must agree."""

    def _decoded(self, rng, img=24, stride=4, dim=5):
        vals = rng.normal(size=(img // stride, img // stride, dim))
        return FeatureMap(values=vals, stride=stride)

    @staticmethod
    def _rows(decoded, samples):
        cells = samples // decoded.stride
        return decoded.values[cells[:, 0], cells[:, 1]]

    def test_total_matches_per_sample_reference(self):
        rng = np.random.default_rng(11)
        decoded = self._decoded(rng)
        traj = random_samples(rng)
        mask = random_samples(rng, source="mask")
        cfg = LossConfig(tau=0.2, omega_mask=0.3)
        breakdown, _, _ = combined_loss(decoded, traj, mask, cfg)
        l_traj = naive_loss(self._rows(decoded, traj.positives),
                            self._rows(decoded, traj.negatives), cfg.tau)
        l_mask = naive_loss(self._rows(decoded, mask.positives),
                            self._rows(decoded, mask.negatives), cfg.tau)
        assert breakdown.trajectory == pytest.approx(l_traj, abs=1e-9)
        assert breakdown.mask == pytest.approx(l_mask, abs=1e-9)
        assert breakdown.total == pytest.approx(0.7 * l_traj + 0.3 * l_mask, abs=1e-9)

    def test_no_mask_means_trajectory_only(self):
        rng = np.random.default_rng(12)
        decoded = self._decoded(rng)
        traj = random_samples(rng)
        breakdown, _, _ = combined_loss(decoded, traj, None, LossConfig(omega_mask=0.3))
        assert breakdown.total == pytest.approx(breakdown.trajectory, abs=1e-12)
        assert breakdown.mask == 0.0

    def test_cell_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        decoded = self._decoded(rng)
        traj = random_samples(rng)
        mask = random_samples(rng, source="mask")
        cfg = LossConfig(tau=0.25, omega_mask=0.4)
        _, cells, grads = combined_loss(decoded, traj, mask, cfg)
        h = 1e-6
        vals = decoded.values
        for k in range(len(cells)):
            i, j = cells[k]
            for d in range(vals.shape[2]):
                vals[i, j, d] += h
                up = combined_loss(decoded, traj, mask, cfg)[0].total
                vals[i, j, d] -= 2 * h
                dn = combined_loss(decoded, traj, mask, cfg)[0].total
                vals[i, j, d] += h
                assert grads[k, d] == pytest.approx((up - dn) / (2 * h), abs=1e-6)


class TestDecoder:
    def test_output_is_unit_normalized(self):
        rng = np.random.default_rng(1)
        dec = Decoder((6, 10, 4), seed=0)
        f, _ = dec.forward(rng.normal(size=(20, 6)))
        np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-12)

    def test_decode_maps_cells_independently(self):
        rng = np.random.default_rng(2)
        dec = Decoder((3, 5), seed=0)
        fmap = FeatureMap(values=rng.normal(size=(4, 6, 3)), stride=2)
        out = dec.decode(fmap)
        assert out.stride == 2 and out.values.shape == (4, 6, 5)
        row, _ = dec.forward(fmap.values[2, 3][None])
        np.testing.assert_allclose(out.values[2, 3], row[0], atol=1e-12)

    def test_seed_determinism_and_copy_independence(self):
        a, b = Decoder((4, 8, 2), seed=5), Decoder((4, 8, 2), seed=5)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)
        c = a.copy()
        c.weights[0][0, 0] += 1.0
        assert a.weights[0][0, 0] != c.weights[0][0, 0]

    def test_needs_two_dims(self):
        with pytest.raises(DataError):
            Decoder((4,), seed=0)


class TestWeightGradients:
    """Central finite differences through encode-cells -> MLP -> loss."""

    def _loss_at(self, decoder, fmap, traj, mask, cfg):
        return loss_with_weight_grads(decoder, fmap, traj, mask, cfg)[0].total

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        fmap = FeatureMap(values=rng.normal(size=(6, 6, 4)), stride=4)
        traj = random_samples(rng, img=24)
        mask = random_samples(rng, img=24, source="mask")
        cfg = LossConfig(tau=0.2, omega_mask=0.3)
        decoder = Decoder((4, 8, 8, 4), seed=seed)
        _, gw, gb, _ = loss_with_weight_grads(decoder, fmap, traj, mask, cfg)
        # h = 1e-5 keeps the f64 cancellation noise (~eps * |L| / h) well
        # below the 1e-4 relative budget even for near-zero entries.
        h = 1e-5
        worst = 0.0
        for params, grads in ((decoder.weights, gw), (decoder.biases, gb)):
            for layer, grad in zip(params, grads):
                flat_p, flat_g = layer.reshape(-1), grad.reshape(-1)
                for idx in range(flat_p.size):
                    flat_p[idx] += h
                    up = self._loss_at(decoder, fmap, traj, mask, cfg)
                    flat_p[idx] -= 2 * h
                    dn = self._loss_at(decoder, fmap, traj, mask, cfg)
                    flat_p[idx] += h
                    fd = (up - dn) / (2 * h)
                    rel = abs(flat_g[idx] - fd) / max(1e-6, abs(flat_g[idx]) + abs(fd))
                    worst = max(worst, rel)
        assert worst < 1e-4

    def test_returns_positive_features_for_ema(self):
        rng = np.random.default_rng(9)
        fmap = FeatureMap(values=rng.normal(size=(6, 6, 4)), stride=4)
        traj = random_samples(rng, img=24, n_pos=5)
        decoder = Decoder((4, 8, 4), seed=0)
        _, _, _, pos_feats = loss_with_weight_grads(
            decoder, fmap, traj, None, LossConfig()
        )
        assert pos_feats.shape == (5, 4)
        np.testing.assert_allclose(np.linalg.norm(pos_feats, axis=1), 1.0, atol=1e-12)


class TestEmaUpdate:
    def test_first_update_initializes_to_normalized_mean(self):
        vec = TraversabilityVector(z=np.zeros(2), alpha=0.9)
        out = ema_update(vec, np.array([[2.0, 0.0], [4.0, 0.0]]))
        assert out.initialized
        np.testing.assert_allclose(out.z, [1.0, 0.0], atol=1e-15)

    def test_half_alpha_blend_of_orthogonal_directions(self):
        vec = TraversabilityVector(z=E1.copy(), alpha=0.5, initialized=True)
        out = ema_update(vec, E2[None])
        r = math.sqrt(2.0) / 2.0
        np.testing.assert_allclose(out.z, [r, r], atol=1e-15)

    def test_alpha_weighting(self):
        vec = TraversabilityVector(z=E1.copy(), alpha=0.999, initialized=True)
        out = ema_update(vec, E2[None])
        # Blend (0.999, 0.001) then normalize: stays nearly at e1.
        assert out.z[0] > 0.999 * out.z[1]
        assert np.linalg.norm(out.z) == pytest.approx(1.0, abs=1e-15)

    def test_empty_and_degenerate_updates_are_no_ops(self):
        vec = TraversabilityVector(z=E1.copy(), alpha=0.5, initialized=True)
        assert ema_update(vec, np.empty((0, 2))) is vec
        out = ema_update(vec, np.stack([E2, -E2]))  # zero mean
        assert out is vec

    def test_exactly_antipodal_blend_keeps_previous(self):
        vec = TraversabilityVector(z=E1.copy(), alpha=0.5, initialized=True)
        out = ema_update(vec, (-E1)[None])
        assert out is vec


class TestConfigValidation:
    def test_loss_config_bounds(self):
        with pytest.raises(DataError):
            LossConfig(tau=0.0)
        with pytest.raises(DataError):
            LossConfig(omega_mask=1.5)
        with pytest.raises(DataError):
            LossConfig(omega_mask=-0.1)

    def test_derive_seed_is_stable_and_sensitive(self):
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
        assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)
        assert 0 <= derive_seed(0) < 2**32


class TestTrainLoop:
    CFG = TrainConfig(epochs=1, seed=4, hidden=(32, 16), out_dim=8, horizon=120)

    def test_trains_decoder_and_vector(self, small_frames):
        result = train(small_frames, FileEncoder(), self.CFG, LossConfig())
        assert result.decoder.dims == (16, 32, 16, 8)
        assert result.vector.initialized
        assert np.linalg.norm(result.vector.z) == pytest.approx(1.0, abs=1e-9)
        assert len(result.log) == len(small_frames) - len(result.skipped)
        assert all(np.isfinite(r.loss_total) for r in result.log)

    def test_mask_term_engages_on_rendered_frames(self, small_frames):
        result = train(small_frames, FileEncoder(), self.CFG, LossConfig())
        assert any(r.loss_mask != 0.0 for r in result.log)

    def test_deterministic_for_fixed_seed(self, small_frames):
        a = train(small_frames, FileEncoder(), self.CFG, LossConfig())
        b = train(small_frames, FileEncoder(), self.CFG, LossConfig())
        for wa, wb in zip(a.decoder.weights, b.decoder.weights):
            np.testing.assert_array_equal(wa, wb)
        np.testing.assert_array_equal(a.vector.z, b.vector.z)

    def test_seed_changes_the_outcome(self, small_frames):
        a = train(small_frames, FileEncoder(), self.CFG, LossConfig())
        b = train(small_frames, FileEncoder(), replace(self.CFG, seed=5), LossConfig())
        assert any(
            np.abs(wa - wb).max() > 0 for wa, wb in zip(a.decoder.weights, b.decoder.weights)
        )

    def test_empty_frame_list_rejected(self):
        with pytest.raises(DataError):
            train([], FileEncoder(), self.CFG, LossConfig())

    def test_all_frames_skipped_raises(self, small_frames):
        # A one-pose horizon cannot enclose any footprint area.
        cfg = replace(self.CFG, horizon=1)
        with pytest.raises(NumericError, match="skipped"):
            train(small_frames, FileEncoder(), cfg, LossConfig())

    def test_zero_epochs_with_existing_decoder_is_identity(self, small_frames):
        first = train(small_frames, FileEncoder(), self.CFG, LossConfig())
        cfg = replace(self.CFG, epochs=0)
        out = train(small_frames, FileEncoder(), cfg, LossConfig(),
                    decoder=first.decoder, vector=first.vector)
        for wa, wb in zip(out.decoder.weights, first.decoder.weights):
            np.testing.assert_array_equal(wa, wb)
        assert out.log == []


class TestAdapt:
    def test_continues_without_mutating_the_source(self, small_frames):
        base_cfg = TrainConfig(epochs=1, seed=4, hidden=(32, 16), out_dim=8, horizon=120)
        src = train(small_frames, FileEncoder(), base_cfg, LossConfig())
        snapshot = [w.copy() for w in src.decoder.weights]
        out = adapt(src.decoder, src.vector, small_frames[:2], FileEncoder(),
                    replace(base_cfg, epochs=2), LossConfig())
        for wa, wb in zip(src.decoder.weights, snapshot):
            np.testing.assert_array_equal(wa, wb)
        assert any(
            np.abs(wa - wb).max() > 0 for wa, wb in zip(out.decoder.weights, snapshot)
        )
        assert out.vector.alpha == src.vector.alpha


class TestCheckpointFile:
    def _fixture(self):
        decoder = Decoder((4, 6, 3), seed=8)
        vector = TraversabilityVector(
            z=np.array([0.6, 0.0, 0.8]), alpha=0.95, initialized=True
        )
        loss_cfg = LossConfig(tau=0.07, omega_mask=0.25, n_pos_traj=10, n_neg_traj=20,
                              n_pos_mask=30, n_neg_mask=40)
        return decoder, vector, loss_cfg

    def test_round_trip_at_storage_precision(self, tmp_path):
        decoder, vector, loss_cfg = self._fixture()
        path = tmp_path / "c.trvc"
        save_checkpoint(path, decoder, vector, loss_cfg)
        dec2, vec2, cfg2 = load_checkpoint(path)
        assert dec2.dims == decoder.dims
        for wa, wb in zip(dec2.weights, decoder.weights):
            np.testing.assert_array_equal(wa, wb.astype("<f4").astype(np.float64))
        np.testing.assert_array_equal(vec2.z, vector.z.astype("<f4").astype(np.float64))
        assert vec2.alpha == vector.alpha
        assert vec2.initialized
        assert cfg2.tau == pytest.approx(loss_cfg.tau, abs=1e-7)
        assert cfg2.omega_mask == pytest.approx(loss_cfg.omega_mask, abs=1e-7)
        assert (cfg2.n_pos_traj, cfg2.n_neg_traj) == (10, 20)
        assert (cfg2.n_pos_mask, cfg2.n_neg_mask) == (30, 40)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.trvc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        decoder, vector, loss_cfg = self._fixture()
        path = tmp_path / "c.trvc"
        save_checkpoint(path, decoder, vector, loss_cfg)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        decoder, vector, loss_cfg = self._fixture()
        path = tmp_path / "c.trvc"
        save_checkpoint(path, decoder, vector, loss_cfg)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(DataError, match="trailing"):
            load_checkpoint(path)


class TestLossLog:
    def test_csv_shape(self, tmp_path):
        from trv.trainer import LogRow

        rows = [LogRow(step=0, frame=0, loss_traj=1.5, loss_mask=0.25, loss_total=1.4375)]
        path = tmp_path / "log.csv"
        write_loss_log(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,frame,loss_traj,loss_mask,loss_total"
        assert lines[1] == "0,0,1.5,0.25,1.4375"

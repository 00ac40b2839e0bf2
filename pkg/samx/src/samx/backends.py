"""Encoders behind the exporter.

`embed` returns (H_f x W_f x D float32 grid, stride in input pixels);
`propose` returns (confidence, bool bitmap) pairs in any order -- the
export layer sorts and files them.  `tap` is the human-readable record
of which activation the features come from; it goes into the output
manifest verbatim.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ExportError

_LUMA = np.array([0.299, 0.587, 0.114])


class SamVitH:
    """Segment-Anything ViT-H: neck features plus the automatic mask generator.

    Inputs follow the model's own pipeline (longest side resized to the
    encoder size, square-padded, ImageNet-normalized).  The feature grid is
    the encoder's neck output cropped to the un-padded region, so the stride
    in original pixels is longest_side / 64; sides must keep that integral.
    Predicted IoU is clamped into [0, 1] before it is written as confidence.
    """

    model_id = "sam-vit-h"
    feature_dim = 256
    tap = (
        "image_encoder neck output (LayerNorm2d + 1x1/3x3 conv neck), "
        "256 channels at 1/16 of the 1024-padded input"
    )

    def __init__(self, weights, device: str = "cpu"):
        try:
            import torch
            from segment_anything import SamAutomaticMaskGenerator, sam_model_registry
            from segment_anything.utils.transforms import ResizeLongestSide
        except ImportError as e:
            raise ExportError(
                "the sam backend needs the optional extras: pip install 'samx[sam]'"
            ) from e
        if weights is None:
            raise ExportError("--weights is required for the sam backend")
        try:
            self._model = sam_model_registry["vit_h"](checkpoint=str(weights))
        except (OSError, RuntimeError, KeyError) as e:
            raise ExportError(f"cannot load SAM weights from {weights}: {e}") from e
        self._model.to(device).eval()
        self._torch = torch
        self._device = device
        self._transform = ResizeLongestSide(self._model.image_encoder.img_size)
        self._generator_cls = SamAutomaticMaskGenerator
        self._generators: dict[int, object] = {}

    def embed(self, image: np.ndarray) -> tuple[np.ndarray, int]:
        torch = self._torch
        h, w = image.shape[:2]
        if max(h, w) % 64 != 0:
            raise ExportError(
                f"longest side must be a multiple of 64 for an integral stride, got {w}x{h}"
            )
        with torch.no_grad():
            resized = self._transform.apply_image(image)
            t = torch.as_tensor(resized, device=self._device)
            t = t.permute(2, 0, 1)[None].float()
            grid = self._model.image_encoder(self._model.preprocess(t))[0]
        cells_h = round(64 * h / max(h, w))
        cells_w = round(64 * w / max(h, w))
        feats = grid[:, :cells_h, :cells_w].permute(1, 2, 0).cpu().numpy()
        return feats.astype(np.float32), max(h, w) // 64

    def propose(
        self, image: np.ndarray, points_per_side: int, conf_threshold: float
    ) -> list[tuple[float, np.ndarray]]:
        gen = self._generators.get(points_per_side)
        if gen is None:
            gen = self._generator_cls(self._model, points_per_side=points_per_side)
            self._generators[points_per_side] = gen
        out = []
        for record in gen.generate(image):
            conf = min(1.0, max(0.0, float(record["predicted_iou"])))
            if conf >= conf_threshold:
                out.append((conf, np.asarray(record["segmentation"], dtype=bool)))
        return out


class Stub:
    """Deterministic stand-in for pipeline dry runs; needs no weights.

    Features are per-cell image statistics (mean color, luminance spread,
    gradient energy, cell position) pushed through a fixed random projection
    to 256 dims -- image-dependent and reproducible, nothing more.  Proposals
    are luminance-threshold connected components around a query-point grid,
    scored by bounding-box compactness.
    """

    model_id = "stub"
    feature_dim = 256
    stride = 16
    tap = "per-cell image statistics, fixed random projection (dry-run stub)"

    _LUM_TOL = 0.08
    _MIN_AREA = 16

    def __init__(self):
        rng = np.random.default_rng(202405)
        self._projection = rng.standard_normal((8, self.feature_dim))

    def embed(self, image: np.ndarray) -> tuple[np.ndarray, int]:
        h, w = image.shape[:2]
        s = self.stride
        if h % s or w % s:
            raise ExportError(f"image size {w}x{h} is not a multiple of stride {s}")
        hf, wf = h // s, w // s
        img = image / 255.0
        lum = img @ _LUMA
        gy, gx = np.gradient(lum)

        cells = img.reshape(hf, s, wf, s, 3)
        lum_c = lum.reshape(hf, s, wf, s)
        stats = np.empty((hf, wf, 8))
        stats[..., 0:3] = cells.mean(axis=(1, 3))
        stats[..., 3] = lum_c.std(axis=(1, 3))
        stats[..., 4] = np.abs(gx).reshape(hf, s, wf, s).mean(axis=(1, 3))
        stats[..., 5] = np.abs(gy).reshape(hf, s, wf, s).mean(axis=(1, 3))
        stats[..., 6] = np.linspace(0.0, 1.0, hf)[:, None]
        stats[..., 7] = np.linspace(0.0, 1.0, wf)[None, :]
        return (stats @ self._projection).astype(np.float32), s

    def propose(
        self, image: np.ndarray, points_per_side: int, conf_threshold: float
    ) -> list[tuple[float, np.ndarray]]:
        h, w = image.shape[:2]
        lum = (image / 255.0) @ _LUMA
        seen: set[bytes] = set()
        out: list[tuple[float, np.ndarray]] = []
        labeled_cache: dict[bytes, np.ndarray] = {}
        for i in range(points_per_side):
            for j in range(points_per_side):
                r = int((i + 0.5) * h / points_per_side)
                c = int((j + 0.5) * w / points_per_side)
                near = np.abs(lum - lum[r, c]) <= self._LUM_TOL
                key = np.packbits(near.reshape(-1)).tobytes()
                labels = labeled_cache.get(key)
                if labels is None:
                    labels, _ = ndimage.label(near)
                    labeled_cache[key] = labels
                bitmap = labels == labels[r, c]
                area = int(bitmap.sum())
                if area < self._MIN_AREA:
                    continue
                rows, cols = np.nonzero(bitmap)
                bbox = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
                conf = area / bbox
                if conf < conf_threshold:
                    continue
                digest = np.packbits(bitmap.reshape(-1)).tobytes()
                if digest in seen:
                    continue
                seen.add(digest)
                out.append((conf, bitmap))
        return out


def make_backend(name: str, weights, device: str):
    if name == "sam":
        return SamVitH(weights, device=device)
    if name == "stub":
        return Stub()
    raise ExportError(f"unknown backend {name!r} (choices: sam, stub)")

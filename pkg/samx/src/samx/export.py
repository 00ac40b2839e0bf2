"""Batch export: images in, TRVF/TRVM files plus a manifest out.

The loop is tolerant per image -- unreadable or misshaped inputs are
skipped with a warning so one bad frame cannot sink an overnight run.
Job-level problems (empty directory, backend failure, images that
disagree on feature stride) abort with an ExportError.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import make_backend
from .errors import ExportError
from .formats import write_features, write_masks

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class ExportJob:
    images: Path
    out: Path
    points_per_side: int = 32
    conf_threshold: float = 0.0
    backend: str = "sam"
    weights: Path | None = None
    device: str = "cpu"


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise ExportError(f"image directory {directory} does not exist")
    files = sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not files:
        raise ExportError(f"no images found in {directory}")
    return files


def run_export(job: ExportJob) -> dict:
    backend = make_backend(job.backend, job.weights, job.device)
    files = _list_images(Path(job.images))
    out_root = Path(job.out)
    out_root.mkdir(parents=True, exist_ok=True)

    frames: list[dict] = []
    stride: int | None = None
    skipped = 0
    for path in files:
        try:
            with Image.open(path) as img:
                rgb = np.asarray(img.convert("RGB"))
            values, frame_stride = backend.embed(rgb)
        except (OSError, ExportError) as e:
            print(f"warning: skipping {path.name}: {e}", file=sys.stderr)
            skipped += 1
            continue
        if stride is None:
            stride = frame_stride
        elif frame_stride != stride:
            raise ExportError(
                f"{path.name} yields stride {frame_stride}, earlier frames {stride};"
                " export one resolution per job"
            )
        proposals = backend.propose(rgb, job.points_per_side, job.conf_threshold)
        proposals.sort(key=lambda p: (-p[0], -int(p[1].sum())))

        frame_dir = out_root / "frames" / f"{len(frames):03d}"
        frame_dir.mkdir(parents=True, exist_ok=True)
        write_features(frame_dir / "features.trvf", values, frame_stride)
        write_masks(frame_dir / "masks.trvm", proposals)
        frames.append({
            "image": path.name,
            "features": str((frame_dir / "features.trvf").relative_to(out_root)),
            "masks": str((frame_dir / "masks.trvm").relative_to(out_root)),
        })

    if not frames:
        raise ExportError("every image was skipped; nothing exported")
    doc = {
        "model": backend.model_id,
        "tap": backend.tap,
        "stride": stride,
        "feature_dim": backend.feature_dim,
        "points_per_side": job.points_per_side,
        "conf_threshold": job.conf_threshold,
        "frames": frames,
    }
    with open(out_root / "export.json", "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    if skipped:
        print(f"warning: skipped {skipped} of {len(files)} images", file=sys.stderr)
    return doc

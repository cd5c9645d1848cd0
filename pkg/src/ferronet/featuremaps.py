"""Dump one stage's feature maps as PGM images plus a channel-dispersion report."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes, load_checkpoint
from .data import NormalizationStats, read_ppm, resize_nearest, write_pgm
from .models import ResNet18, extract_feature_maps
from .tensor import Tensor

ACTIVE_THRESHOLD = 1e-3


def channel_statistics(fmap: np.ndarray) -> dict:
    """Per-channel spatial means of a [C, h, w] map, their spread and the active fraction."""
    means = fmap.mean(axis=(1, 2))
    return {
        "channel_means": [float(m) for m in means],
        "channel_mean_std": float(means.std()),
        "active_fraction": float(np.mean(means > ACTIVE_THRESHOLD)),
    }


def to_grayscale(channel: np.ndarray) -> np.ndarray:
    """Min-max scale one [h, w] map to uint8; all-zero maps stay black."""
    lo, hi = float(channel.min()), float(channel.max())
    if hi > lo:
        return np.rint((channel - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return np.full(channel.shape, 255 if hi > 0 else 0, dtype=np.uint8)


def feature_dispersion(model: ResNet18, images: Tensor, stage: int) -> float:
    """Batch average of the across-channel std of channel means at ``stage`` (eval mode)."""
    fmap = extract_feature_maps(model, images, stage).data
    return float(fmap.mean(axis=(2, 3)).std(axis=1).mean())


def dump_feature_maps(checkpoint, image_path, stage: int, out_dir) -> dict:
    model, header = load_checkpoint(checkpoint)
    norm = header.get("meta", {}).get("normalization")
    stats = NormalizationStats(tuple(norm["mean"]), tuple(norm["std"])) if norm else NormalizationStats.identity()
    image = resize_nearest(read_ppm(image_path), model.config.input_size)
    fmap = extract_feature_maps(model, Tensor(stats.normalize(image[None])), stage).data[0]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, channel in enumerate(fmap):
        write_pgm(out_dir / f"channel_{k:03d}.pgm", to_grayscale(channel))
    report = {
        "checkpoint": str(checkpoint),
        "image": str(image_path),
        "stage": stage,
        "shape": list(fmap.shape),
        **channel_statistics(fmap),
    }
    atomic_write_bytes(out_dir / "report.json", (json.dumps(report, indent=2) + "\n").encode("utf-8"))
    return report

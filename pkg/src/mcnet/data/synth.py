"""Synthetic segmentation scenes for desk-scale runs.

Each sample is a noisy canvas with one to four ellipses or rectangles per
foreground class.  Every class has its own mean intensity (per channel, for
multichannel data), so labels are learnable from the image.
"""

from __future__ import annotations

import numpy as np

from mcnet.data.dataset import Sample

MAX_ATTEMPTS = 50


def _shape_mask(rng, side):
    yy, xx = np.mgrid[0:side, 0:side]
    cy, cx = rng.uniform(0.15, 0.85, size=2) * side
    ry, rx = rng.uniform(0.06, 0.2, size=2) * side
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def class_levels(n_classes: int, in_channels: int, seed: int) -> np.ndarray:
    """(n_classes, in_channels) mean intensities; background is darkest."""
    rng = np.random.default_rng([seed, 7919])
    base = np.linspace(0.1, 0.9, n_classes)
    levels = np.empty((n_classes, in_channels))
    for c in range(in_channels):
        perm = np.concatenate([[0], 1 + rng.permutation(n_classes - 1)]) if c else np.arange(n_classes)
        levels[:, c] = base[perm]
    return levels


def synth_sample(seed: int, index: int, side: int, n_classes: int, in_channels=1,
                 noise=0.06) -> Sample:
    """Pure function of its arguments; retries until every class is present."""
    if n_classes < 2:
        raise ValueError("need at least two classes (background plus one)")
    levels = class_levels(n_classes, in_channels, seed)
    rng = np.random.default_rng([seed, index])
    for _ in range(MAX_ATTEMPTS):
        mask = np.zeros((side, side), dtype=np.int64)
        for cls in range(1, n_classes):
            for _ in range(int(rng.integers(1, 5))):
                mask[_shape_mask(rng, side)] = cls
        if np.unique(mask).size == n_classes:
            break
    image = levels[mask].transpose(2, 0, 1) + rng.normal(0.0, noise, (in_channels, side, side))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, mask, f"synth{seed}_{index:04d}")


def synth_dataset(seed: int, n_samples: int, side: int, n_classes: int, in_channels=1,
                  noise=0.06) -> list[Sample]:
    return [synth_sample(seed, i, side, n_classes, in_channels, noise) for i in range(n_samples)]

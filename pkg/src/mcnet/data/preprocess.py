"""Resizing and padding to the network input size.

Images are ``(H, W)`` or ``(C, H, W)`` arrays.  Masks must go through
:func:`resize_nearest` so no fractional labels appear.
"""

from __future__ import annotations

import numpy as np

from mcnet.engine.ops import bilinear_matrix
from mcnet.errors import ShapeError


def _spatial(image):
    img = np.asarray(image)
    if img.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (C, H, W), got shape {img.shape}")
    return img


def resize_bilinear(image, target_side: int):
    """Bilinear resize with the same pixel-centre convention as the network's
    upsampling layer.  Returns float64."""
    img = _spatial(image).astype(np.float64)
    if target_side < 1:
        raise ShapeError(f"target side must be >= 1, got {target_side}")
    h, w = img.shape[-2:]
    if (h, w) == (target_side, target_side):
        return img.copy()
    ah = bilinear_matrix(h, target_side)
    aw = bilinear_matrix(w, target_side)
    return np.matmul(np.matmul(ah, img), aw.T)


def resize_nearest(mask, target_side: int):
    m = _spatial(mask)
    if target_side < 1:
        raise ShapeError(f"target side must be >= 1, got {target_side}")
    h, w = m.shape[-2:]
    rows = np.minimum(((np.arange(target_side) + 0.5) * h / target_side).astype(int), h - 1)
    cols = np.minimum(((np.arange(target_side) + 0.5) * w / target_side).astype(int), w - 1)
    return m[..., rows[:, None], cols[None, :]].copy()


def pad_to(image, target_side: int):
    """Zero-pad on the bottom and right up to ``target_side``."""
    img = _spatial(image)
    h, w = img.shape[-2:]
    if h > target_side or w > target_side:
        raise ShapeError(f"cannot pad {h}x{w} down to {target_side}")
    pad = [(0, 0)] * (img.ndim - 2) + [(0, target_side - h), (0, target_side - w)]
    return np.pad(img, pad)


def preprocess(image, mask, side: int, mode: str = "resize"):
    """Bring an image/mask pair to ``side`` x ``side`` ("resize" or "pad")."""
    if mode == "resize":
        return resize_bilinear(image, side), resize_nearest(mask, side)
    if mode == "pad":
        return pad_to(image, side), pad_to(mask, side)
    raise ValueError(f"unknown preprocessing mode {mode!r}")

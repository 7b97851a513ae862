"""Training-time image augmentation: resize, crop, flip, brightness, rotation."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def augment(image: np.ndarray, rng: np.random.Generator | int, flip: bool | None = None) -> np.ndarray:
    """Randomly perturb an ``H×W×1`` image in [0, 1]; output keeps shape and range.

    ``flip`` forces the horizontal-flip decision when given.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 1 or min(image.shape) <= 0:
        raise ValueError(f"augment: expected H×W×1 image with positive extents, got {image.shape}")
    rng = np.random.default_rng(rng)
    h, w = image.shape[:2]
    plane = image[:, :, 0].astype(np.float64)
    big = ndimage.zoom(plane, ((h + 4) / h, (w + 4) / w), order=1, mode="nearest", grid_mode=True)
    big = big[: h + 4, : w + 4]
    top = int(rng.integers(0, big.shape[0] - h + 1))
    left = int(rng.integers(0, big.shape[1] - w + 1))
    out = big[top:top + h, left:left + w]
    do_flip = bool(rng.random() < 0.5)
    if flip is not None:
        do_flip = flip
    if do_flip:
        out = out[:, ::-1]
    out = np.clip(out * rng.uniform(0.8, 1.2), 0.0, 1.0)
    angle = rng.uniform(-10.0, 10.0)
    out = ndimage.rotate(out, angle, reshape=False, order=0, mode="nearest")
    return out.astype(image.dtype)[:, :, None]

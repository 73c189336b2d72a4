"""Turning generated or real sequences into 8-bit PNG grids."""

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .data import denormalize

GAP = 2


def pair_image(bf, gfp) -> np.ndarray:
    """One sequence pair as RGB: brightfield row (gray) above fluorescence row (green).

    ``bf`` and ``gfp`` are ``[T, H, W]`` in [-1, 1]; columns are timesteps.
    """
    b = denormalize(bf)
    g = denormalize(gfp)
    t, h, w = b.shape
    top = np.concatenate(list(b), axis=1)
    bottom = np.concatenate(list(g), axis=1)
    out = np.zeros((2 * h, t * w, 3), dtype=np.uint8)
    out[:h] = top[..., None]
    out[h:, :, 1] = bottom
    return out


def stack_rows(images: Sequence[np.ndarray], gap: int = GAP) -> np.ndarray:
    if len(images) == 1:
        return images[0]
    w = max(im.shape[1] for im in images)
    parts = []
    for i, im in enumerate(images):
        if i:
            parts.append(np.zeros((gap, w, 3), dtype=np.uint8))
        pad = np.zeros((im.shape[0], w, 3), dtype=np.uint8)
        pad[:, : im.shape[1]] = im
        parts.append(pad)
    return np.concatenate(parts, axis=0)


def batch_image(bf, gfp) -> np.ndarray:
    """All pairs of a ``[B, T, H, W]`` batch stacked vertically."""
    return stack_rows([pair_image(bf[i], gfp[i]) for i in range(bf.shape[0])])


def save_png(img: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path, format="PNG")
    return path

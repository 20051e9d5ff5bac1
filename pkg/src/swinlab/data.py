"""Hermetic synthetic image task: 8 classes of Gaussian blobs.

Each class places a bright blob at one of the eight cells of a 3x3 grid
(center cell unused), with jittered position, size, and amplitude, plus
per-pixel Gaussian noise.  The class signal is purely positional, so a
classifier has to read *where* the energy is; raw pixels remain linearly
separable enough that a logistic-regression baseline clears 85%.

Geometry is expressed in fractions of the image side, so the same
distribution can be rendered at any resolution.  That is what window-size
transfer evaluates: train at one resolution/window, evaluate the same task
rendered finer.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

NUM_CLASSES = 8

# Cell centers of a 3x3 layout, skipping the middle cell; fractions of the side.
_POS = [(r, c) for r in (1 / 6, 3 / 6, 5 / 6) for c in (1 / 6, 3 / 6, 5 / 6)
        if not (r == 3 / 6 and c == 3 / 6)]


def make_dataset(n: int, img_size: int, seed: int,
                 noise_std: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Render ``n`` labeled blob images at ``img_size`` x ``img_size`` x 3.

    Returns (images [n, s, s, 3] float64, labels [n] int64).  Balanced
    classes, deterministic for a given (n, img_size, seed).
    """
    if n < 1:
        raise ParameterError(f"dataset size must be >= 1, got {n}")
    if img_size < 8:
        raise ParameterError(f"img_size must be >= 8, got {img_size}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % NUM_CLASSES).astype(np.int64)
    s = float(img_size)
    yy, xx = np.mgrid[0:img_size, 0:img_size]
    yy = yy + 0.5
    xx = xx + 0.5
    images = np.zeros((n, img_size, img_size, 3))
    for i in range(n):
        r0, c0 = _POS[labels[i]]
        cy = (r0 + rng.uniform(-0.04, 0.04)) * s
        cx = (c0 + rng.uniform(-0.04, 0.04)) * s
        sigma = s * 0.09 * (1.0 + rng.uniform(-0.15, 0.15))
        amp = 1.0 + rng.uniform(-0.2, 0.2)
        blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
        images[i] = blob[:, :, None] + rng.normal(0.0, noise_std,
                                                  size=(img_size, img_size, 3))
    return images, labels

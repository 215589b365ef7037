"""Illumination-invariant color map used as an image-prior condition.

Each pixel of the input is normalized by its channel sum, giving a
chromaticity vector on the simplex that is insensitive to per-pixel
brightness scaling. All-black pixels map to zeros rather than a fake
gray prior.
"""

from __future__ import annotations

import numpy as np

DEFAULT_EPSILON = 1e-6


def compute_color_map(y: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Per-pixel channel normalization C(y)[..., c] = y_c / (sum_c' y_c' + eps).

    Args:
        y: H x W x 3 array with non-negative values.
        epsilon: small positive regularizer guarding black pixels.

    Returns:
        Array of the same shape; channels at each pixel sum to <= 1
        (to 1 within eps effects wherever the pixel is not black).
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[-1] != 3:
        raise ValueError(f"expected H x W x 3 input, got shape {y.shape}")
    if np.any(y < 0):
        raise ValueError("color map input must be non-negative")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    denom = y.sum(axis=-1, keepdims=True) + epsilon
    return y / denom


def color_map_batch(y, epsilon: float = DEFAULT_EPSILON):
    """Torch variant for B x 3 x H x W batches (channel-first).

    Same normalization as compute_color_map; used inside training and
    sampling where inputs are already tensors.
    """
    denom = y.sum(dim=1, keepdim=True) + epsilon
    return y / denom

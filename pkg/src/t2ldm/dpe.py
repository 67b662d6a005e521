"""Directional position encoding: Fourier features of per-pixel beam angles.

Each pixel of a feature map corresponds to a beam direction (azimuth theta,
pitch phi). The encoding stacks sin/cos pairs of both angles at octave
frequencies 2^k and is injected into a feature map as
x + alpha * projection(features), with a learnable gate alpha starting at 0.
"""

from __future__ import annotations

import numpy as np

from .rangemap import SensorConfig


def pixel_angle_grid(height: int, width: int, config: SensorConfig) -> tuple[np.ndarray, np.ndarray]:
    """(theta, phi) grids of shape (H, W) at pixel centers.

    theta = 2*pi - 2*pi*(w + 0.5)/W, strictly decreasing across columns inside
    (0, 2*pi); phi runs from fov_up (row 0) down to fov_down.
    """
    if height < 1 or width < 1:
        raise ValueError("grid must be at least 1x1")
    w = np.arange(width, dtype=np.float64)
    h = np.arange(height, dtype=np.float64)
    theta = 2.0 * np.pi - 2.0 * np.pi * (w + 0.5) / width
    phi = config.fov_up - (config.fov_up - config.fov_down) * (h + 0.5) / height
    return np.broadcast_to(theta, (height, width)).copy(), \
        np.broadcast_to(phi[:, None], (height, width)).copy()


def dpe_features(height: int, width: int, config: SensorConfig, num_octaves: int = 4) -> np.ndarray:
    """(4K, H, W) float32 encoding: per octave k, [sin 2^k theta, cos 2^k theta,
    sin 2^k phi, cos 2^k phi]."""
    if num_octaves < 1:
        raise ValueError("need at least one octave")
    theta, phi = pixel_angle_grid(height, width, config)
    planes = []
    for k in range(num_octaves):
        f = float(2**k)
        planes += [np.sin(f * theta), np.cos(f * theta), np.sin(f * phi), np.cos(f * phi)]
    return np.stack(planes).astype(np.float32)


def apply_dpe(x, features, alpha, projection):
    """x + alpha * projection(features); alpha = 0 leaves x untouched."""
    return x + alpha * projection(features)

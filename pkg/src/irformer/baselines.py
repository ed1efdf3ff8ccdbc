"""
Model-driven comparison detectors: white top-hat and max-mean / max-median.

Both return a confidence map in [0, 1] (residual divided by its per-image
max; an all-zero residual stays zero) so they plug into the same
segmentation and metric pipeline as the learned detector.  Borders are
handled by replicate padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from irformer.errors import ConfigError

VARIANTS = ("max-mean", "max-median")


@dataclass
class FilterConfig:
    size: int = 5
    variant: str = "max-mean"

    def __post_init__(self):
        _check_window(self.size)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


def _check_window(size: int) -> None:
    if size < 3 or size % 2 == 0:
        raise ConfigError(f"window/structuring element must be odd and >= 3, got {size}")


def _normalise(residual: np.ndarray) -> np.ndarray:
    residual = np.maximum(residual, 0.0)
    peak = residual.max()
    return residual / peak if peak > 0 else residual


def white_tophat_residual(image: np.ndarray, se_size: int = 5) -> np.ndarray:
    """image - opening(image) with a square structuring element, unnormalised."""
    _check_window(se_size)
    image = np.asarray(image, dtype=np.float64)
    opened = ndimage.grey_dilation(
        ndimage.grey_erosion(image, size=(se_size, se_size), mode="nearest"),
        size=(se_size, se_size), mode="nearest")
    return image - opened


def top_hat(image: np.ndarray, se_size: int = 5) -> np.ndarray:
    return _normalise(white_tophat_residual(image, se_size))


def directional_stack(image: np.ndarray, window: int) -> np.ndarray:
    """
    Line neighbourhoods of length ``window`` through every pixel, shape
    (4, H, W, window): horizontal, vertical, main diagonal, anti-diagonal.
    """
    _check_window(window)
    r = window // 2
    padded = np.pad(np.asarray(image, dtype=np.float64), r, mode="edge")
    h, w = image.shape
    patches = sliding_window_view(padded, (window, window))[:h, :w]   # (H, W, win, win)
    idx = np.arange(window)
    lines = [
        patches[:, :, r, :],                 # horizontal
        patches[:, :, :, r],                 # vertical
        patches[:, :, idx, idx],             # main diagonal
        patches[:, :, idx, window - 1 - idx],  # anti-diagonal
    ]
    return np.stack(lines, axis=0)


def max_mean_median_residual(image: np.ndarray, window: int = 5,
                             variant: str = "max-mean") -> np.ndarray:
    """image - max over the four directional means (or medians), unnormalised."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    lines = directional_stack(image, window)
    stat = lines.mean(axis=-1) if variant == "max-mean" else np.median(lines, axis=-1)
    return np.asarray(image, dtype=np.float64) - stat.max(axis=0)


def max_mean_median(image: np.ndarray, window: int = 5, variant: str = "max-mean") -> np.ndarray:
    return _normalise(max_mean_median_residual(image, window, variant))


def baseline_map(name: str, image: np.ndarray, size: int = 5) -> np.ndarray:
    """Dispatch by CLI name: ``tophat``, ``maxmean`` or ``maxmedian``."""
    if name == "tophat":
        return top_hat(image, size)
    if name == "maxmean":
        return max_mean_median(image, size, "max-mean")
    if name == "maxmedian":
        return max_mean_median(image, size, "max-median")
    raise ConfigError(f"unknown baseline {name!r}")

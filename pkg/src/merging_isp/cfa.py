"""Bayer RGGB mosaicing and a bilinear demosaicer for cascaded baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import ShapeError

# channel indices
_R, _G, _B = 0, 1, 2

# kernels for filling missing samples from same-channel neighbors; dividing
# by the identically-filtered mask turns each into an average over the
# neighbors that actually carry a sample
_KERNEL_RB = np.array(
    [[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]]
)
_KERNEL_G = np.array([[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]])


@dataclass(frozen=True)
class CfaPattern:
    """2x2 grid of channel indices; grid[y][x] is the channel kept at
    pixel (y mod 2, x mod 2)."""

    grid: tuple[tuple[int, int], tuple[int, int]]

    def __post_init__(self):
        flat = [c for row in self.grid for c in row]
        if sorted(flat) != [_R, _G, _G, _B]:
            raise ValueError(f"CFA tile must hold one R, two G, one B, got {flat}")

    def mask(self, height, width):
        """Boolean mask of shape (3, height, width): True where sampled."""
        m = np.zeros((3, height, width), dtype=bool)
        for dy in range(2):
            for dx in range(2):
                m[self.grid[dy][dx], dy::2, dx::2] = True
        return m


RGGB = CfaPattern(((_R, _G), (_G, _B)))


@dataclass
class RawImage:
    """Zero-masked 3-channel CFA image: at each pixel only the channel
    selected by the pattern may be nonzero."""

    values: np.ndarray  # (3, H, W) float64
    pattern: CfaPattern


def mosaic_rggb(rgb, pattern=RGGB):
    """Mask an RGB image down to its CFA samples.

    Requires even height and width so the image covers whole Bayer tiles.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"mosaic_rggb: expected (3,H,W) image, got {rgb.shape}")
    _, h, w = rgb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"mosaic_rggb: dimensions must be even, got {h}x{w}")
    return RawImage(values=rgb * pattern.mask(h, w), pattern=pattern)


def bilinear_demosaic(raw):
    """Fill missing CFA samples by averaging available same-channel neighbors.

    Green uses the 4-neighbor cross, red/blue use the full 3x3 stencil
    (which reduces to the 2-neighbor or diagonal average where appropriate).
    Borders reflect without repeating the edge pixel, matching the conv core.
    """
    vals = raw.values
    _, h, w = vals.shape
    mask = raw.pattern.mask(h, w).astype(np.float64)
    out = np.empty_like(vals)
    for c in range(3):
        k = _KERNEL_G if c == _G else _KERNEL_RB
        num = ndimage.correlate(vals[c], k, mode="mirror")
        den = ndimage.correlate(mask[c], k, mode="mirror")
        out[c] = num / den
    return out

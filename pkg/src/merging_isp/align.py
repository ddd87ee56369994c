"""Global translational alignment by coarse-to-fine exhaustive search.

Stands in for dense optical flow in the cascaded pipeline variants; the
joint pipeline never calls it. Deterministic: ties in the search break to
the lexicographically smallest (dy, dx).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DomainError, ShapeError


@dataclass(frozen=True)
class Displacement:
    """Integer pixel offset; positive dy/dx move content down/right."""

    dy: int
    dx: int


def _mirror_indices(idx, length):
    """Map arbitrary integer indices into [0, length) by mirror-without-edge
    reflection (period 2*length - 2)."""
    if length == 1:
        return np.zeros_like(idx)
    period = 2 * length - 2
    idx = np.mod(idx, period)
    return np.where(idx >= length, period - idx, idx)


def warp_translate(image, displacement):
    """Shift an image by whole pixels, filling borders by reflection."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    ys = _mirror_indices(np.arange(h) - displacement.dy, h)
    xs = _mirror_indices(np.arange(w) - displacement.dx, w)
    return img[..., ys[:, None], xs[None, :]]


def _intensity(image, exposure_time, gamma):
    """Exposure-normalized intensity: sum over channels of x**gamma / t."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    norm = np.power(np.clip(img, 0.0, None), gamma) / float(exposure_time)
    return norm.sum(axis=0)


_SATURATION_THRESHOLD = 0.99


def _valid_mask(image):
    """1.0 where no channel is clipped, 0.0 where the sensor saturated.

    Clipped pixels violate the x**gamma / t exposure-constancy the matcher
    relies on, so they are excluded from the difference score; without this
    a long exposure with large saturated regions can pull the search toward
    arbitrary offsets."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    return (img.max(axis=0) < _SATURATION_THRESHOLD).astype(np.float64)


def _downsample2(img):
    h, w = img.shape
    h2, w2 = h - h % 2, w - w % 2
    v = img[:h2, :w2]
    return 0.25 * (v[0::2, 0::2] + v[0::2, 1::2] + v[1::2, 0::2] + v[1::2, 1::2])


def _mad(ref, mov, ref_w, mov_w, dy, dx):
    """Weighted mean absolute difference on the overlap of ref and mov
    shifted by (dy, dx); infinite when no validly-weighted overlap exists."""
    h, w = ref.shape
    if abs(dy) >= h or abs(dx) >= w:
        return np.inf
    ry0, ry1 = max(0, -dy), h - max(0, dy)
    rx0, rx1 = max(0, -dx), w - max(0, dx)
    my0, my1 = max(0, dy), h - max(0, -dy)
    mx0, mx1 = max(0, dx), w - max(0, -dx)
    weight = mov_w[my0:my1, mx0:mx1] * ref_w[ry0:ry1, rx0:rx1]
    total = float(weight.sum())
    if total == 0.0:
        return np.inf
    diff = np.abs(mov[my0:my1, mx0:mx1] - ref[ry0:ry1, rx0:rx1])
    return float((weight * diff).sum() / total)


def _search(ref, mov, ref_w, mov_w, center, radius):
    best = center
    best_err = np.inf
    for dy in range(center[0] - radius, center[0] + radius + 1):
        for dx in range(center[1] - radius, center[1] + radius + 1):
            err = _mad(ref, mov, ref_w, mov_w, dy, dx)
            # scan order is lexicographic, so strict < keeps the smallest tie
            if err < best_err:
                best_err = err
                best = (dy, dx)
    return best


def estimate_translation(reference, moving, levels=3, radius=4, *,
                         reference_time=1.0, moving_time=1.0, gamma=2.2,
                         cfa=False):
    """Estimate the global shift of ``moving`` relative to ``reference``.

    Both images are normalized to comparable radiance (x**gamma / t, summed
    over channels) before comparison, so exposure differences cancel. With
    ``cfa=True`` the search runs on 2x2-pooled images and returns even
    offsets only, preserving the Bayer phase of zero-masked raw inputs.
    """
    ref = np.asarray(reference, dtype=np.float64)
    mov = np.asarray(moving, dtype=np.float64)
    if ref.shape != mov.shape:
        raise ShapeError(f"estimate_translation: shape mismatch {ref.shape} vs {mov.shape}")
    if levels < 1:
        raise DomainError(f"estimate_translation: levels must be >= 1, got {levels}")

    ref_i = _intensity(ref, reference_time, gamma)
    mov_i = _intensity(mov, moving_time, gamma)
    ref_w = _valid_mask(ref)
    mov_w = _valid_mask(mov)
    if cfa:
        ref_i, mov_i = _downsample2(ref_i), _downsample2(mov_i)
        ref_w, mov_w = _downsample2(ref_w), _downsample2(mov_w)
    if min(ref_i.shape) < 2**levels:
        raise ShapeError(
            f"estimate_translation: image {ref_i.shape} smaller than 2^{levels}"
        )

    pyramid = [(ref_i, mov_i, ref_w, mov_w)]
    for _ in range(levels - 1):
        r, m, rw, mw = pyramid[-1]
        pyramid.append(
            (_downsample2(r), _downsample2(m), _downsample2(rw), _downsample2(mw))
        )

    dy, dx = 0, 0
    for level, (r, m, rw, mw) in enumerate(reversed(pyramid)):
        if level > 0:
            dy, dx = 2 * dy, 2 * dx
        dy, dx = _search(r, m, rw, mw, (dy, dx), radius)
    if cfa:
        dy, dx = 2 * dy, 2 * dx
    return Displacement(dy, dx)


def align_to_reference(image, displacement):
    """Undo an estimated displacement: shift the image back onto the
    reference frame with reflective fill."""
    return warp_translate(image, Displacement(-displacement.dy, -displacement.dx))

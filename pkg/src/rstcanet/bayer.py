"""RGGB Bayer mosaicing and the bilinear interpolation baseline.

The 2x2 cell samples red at (0,0), green at (0,1) and (1,0), blue at (1,1).
Everything here runs on plain numpy arrays: the data pipeline never needs
gradients.
"""

from __future__ import annotations

import numpy as np

# per-channel neighbour kernels for bilinear interpolation
_G_KERNEL = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=np.float32)
_RB_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float32)


def bayer_masks(h: int, w: int) -> np.ndarray:
    """[3,H,W] boolean sampling masks for the RGGB pattern."""
    yy, xx = np.mgrid[0:h, 0:w]
    r = (yy % 2 == 0) & (xx % 2 == 0)
    g = (yy % 2) != (xx % 2)
    b = (yy % 2 == 1) & (xx % 2 == 1)
    return np.stack([r, g, b])


def mosaic_rggb(rgb: np.ndarray) -> np.ndarray:
    """[3,H,W] RGB -> [1,H,W] RGGB mosaic; H and W must be even."""
    rgb = np.asarray(rgb, dtype=np.float32)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] RGB, got {rgb.shape}")
    _, h, w = rgb.shape
    if h % 2 or w % 2:
        raise ValueError(f"mosaic needs even dims, got ({h},{w})")
    masks = bayer_masks(h, w)
    out = np.zeros((1, h, w), dtype=np.float32)
    for c in range(3):
        out[0][masks[c]] = rgb[c][masks[c]]
    return out


def _neighbor_mean(values: np.ndarray, mask: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Kernel-weighted mean over available (masked-in) neighbours."""
    from scipy.ndimage import convolve

    num = convolve(values * mask, kernel, mode="constant", cval=0.0)
    den = convolve(mask.astype(np.float32), kernel, mode="constant", cval=0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    return np.where(den > 0, out, 0.0)


def bilinear_demosaic(mosaic: np.ndarray) -> np.ndarray:
    """[1,H,W] RGGB mosaic -> [3,H,W] RGB, the classical evaluation floor.

    Each missing value is the mean of its available same-channel neighbours
    (4-neighbourhood for green, the surrounding 3x3 taps for red/blue);
    sampled positions pass through untouched.
    """
    mosaic = np.asarray(mosaic, dtype=np.float32)
    if mosaic.ndim != 3 or mosaic.shape[0] != 1:
        raise ValueError(f"expected [1,H,W] mosaic, got {mosaic.shape}")
    _, h, w = mosaic.shape
    plane = mosaic[0]
    masks = bayer_masks(h, w)
    out = np.zeros((3, h, w), dtype=np.float32)
    for c, kernel in ((0, _RB_KERNEL), (1, _G_KERNEL), (2, _RB_KERNEL)):
        mask = masks[c]
        interp = _neighbor_mean(plane, mask, kernel)
        out[c] = np.where(mask, plane, interp)
    return out

"""Color-mapped disparity renders."""
import numpy as np


def render_colormap(disparity, max_disparity, valid=None):
    """Linear blue -> green -> red ramp over [0, max_disparity]; invalid pixels black.

    Returns an (H, W, 3) uint8 image.
    """
    if max_disparity <= 0:
        raise ValueError(f"max_disparity must be positive, got {max_disparity}")
    d = np.asarray(disparity, dtype=np.float64)
    bad = ~np.isfinite(d)
    t = np.clip(np.where(bad, 0.0, d) / max_disparity, 0.0, 1.0)
    lo = t <= 0.5
    r = np.where(lo, 0.0, 2 * t - 1)
    g = np.where(lo, 2 * t, 2 - 2 * t)
    b = np.where(lo, 1 - 2 * t, 0.0)
    rgb = np.rint(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)
    if valid is not None:
        bad |= ~np.asarray(valid, dtype=bool)
    rgb[bad] = 0
    return rgb

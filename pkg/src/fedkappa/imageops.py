"""Low-level 2-D image resampling shared by preprocessing and augmentation.

Conventions: pixel centers sit on an integer grid, resizing maps output pixel
centers through half-pixel alignment (src = (dst + 0.5) * scale - 0.5) with
edge clamping, and rotation samples outside the source extent as zero.
"""

import numpy as np

from .errors import InvalidShape


def bilinear_sample(images: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                    fill: float = 0.0) -> np.ndarray:
    """Sample a batch of images at fractional coordinates.

    images: [B, H, W]; ys, xs: broadcastable to [B, ...] sample coordinates.
    Coordinates outside [0, H-1] x [0, W-1] blend toward `fill`.
    """
    b, h, w = images.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0).astype(images.dtype)
    wx = (xs - x0).astype(images.dtype)

    batch_idx = np.arange(b).reshape((b,) + (1,) * (ys.ndim - 1))

    def tap(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = images[batch_idx, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside, vals, images.dtype.type(fill))

    top = tap(y0, x0) * (1 - wx) + tap(y0, x0 + 1) * wx
    bot = tap(y0 + 1, x0) * (1 - wx) + tap(y0 + 1, x0 + 1) * wx
    return top * (1 - wy) + bot * wy


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize one 2-D image with bilinear interpolation and edge clamping."""
    if image.ndim != 2 or image.size == 0:
        raise InvalidShape(f"expected a nonempty 2-D image, got shape {image.shape}")
    in_h, in_w = image.shape
    sy = in_h / out_h
    sx = in_w / out_w
    ys = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0.0, in_h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0.0, in_w - 1.0)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    out = bilinear_sample(image[None].astype(image.dtype), grid_y[None], grid_x[None])
    return out[0]


def rotate_batch(images: np.ndarray, angles_deg: np.ndarray) -> np.ndarray:
    """Rotate each image in a batch about its center, zero-padding corners.

    images: [B, H, W]; angles_deg: [B]. Bilinear resampling via the inverse
    map, so an angle of exactly 0 reproduces the input up to interpolation
    roundoff.
    """
    b, h, w = images.shape
    theta = np.deg2rad(angles_deg.astype(np.float64))
    cos = np.cos(theta)[:, None, None]
    sin = np.sin(theta)[:, None, None]
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    # inverse rotation: destination -> source
    src_y = cos * gy[None] + sin * gx[None] + cy
    src_x = -sin * gy[None] + cos * gx[None] + cx
    return bilinear_sample(images, src_y, src_x, fill=0.0)

"""Bilinear rotation and rescaling on (C, H, W) grids.

Rotations are precomputed as sparse interpolation operators so that scanning
many angles costs a sparse product instead of repeated interpolation calls.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp


@lru_cache(maxsize=512)
def rotation_operator(h: int, w: int, deg: float) -> sp.csr_matrix:
    """Sparse (h*w, h*w) bilinear rotation about (h/2, w/2) with zero fill.

    Row ``p`` holds the interpolation weights for output pixel ``p``.
    """
    theta = np.deg2rad(deg)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = h / 2.0, w / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # Inverse map: sample the input at R(-theta) applied to the output offset.
    sy = cos * dy + sin * dx + cy
    sx = -sin * dy + cos * dx + cx
    y0, x0 = np.floor(sy), np.floor(sx)
    fy, fx = sy - y0, sx - x0
    rows, cols, vals = [], [], []
    out_idx = np.arange(h * w)
    for oy, ox, wt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        py = (y0 + oy).astype(np.int64).ravel()
        px = (x0 + ox).astype(np.int64).ravel()
        wt = wt.ravel()
        ok = (py >= 0) & (py < h) & (px >= 0) & (px < w) & (wt != 0)
        rows.append(out_idx[ok])
        cols.append(py[ok] * w + px[ok])
        vals.append(wt[ok])
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w)
    )
    mat.sum_duplicates()
    return mat


def rotate(x: np.ndarray, deg: float) -> np.ndarray:
    """Rotate every channel of ``x`` by ``deg`` degrees about the grid center."""
    c, h, w = x.shape
    op = rotation_operator(h, w, float(deg) % 360.0)
    return (op @ x.reshape(c, h * w).T).T.reshape(c, h, w)


@lru_cache(maxsize=16)
def _stacked_rotations(h: int, w: int, angles: tuple[float, ...], dtype: str) -> sp.csr_matrix:
    return sp.vstack([rotation_operator(h, w, a) for a in angles], format="csr").astype(dtype)


def rotate_many(x: np.ndarray, angles) -> np.ndarray:
    """Return an (len(angles), C, H, W) stack of rotated copies of ``x``.

    float32 input is rotated in float32; anything else in float64.
    """
    c, h, w = x.shape
    dtype = "float32" if x.dtype == np.float32 else "float64"
    angles = tuple(float(a) % 360.0 for a in angles)
    out = _stacked_rotations(h, w, angles, dtype) @ np.ascontiguousarray(x.reshape(c, h * w).T, dtype=dtype)
    return out.reshape(len(angles), h, w, c).transpose(0, 3, 1, 2)


def resize(x: np.ndarray, size) -> np.ndarray:
    """Bilinear resample each channel of ``x`` to ``size`` (an int or an (h, w) pair)."""
    c, h, w = x.shape
    oh, ow = (size, size) if np.isscalar(size) else size
    if (h, w) == (oh, ow):
        return x.copy()
    return ndi.zoom(x, (1.0, oh / h, ow / w), order=1, mode="nearest", grid_mode=True)

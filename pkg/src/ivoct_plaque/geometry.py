"""Scan conversion between polar A-scan stacks and cartesian cross-sections.

Conventions
-----------
A polar image has shape ``(D, K)``: axis 0 is depth along an A-scan, axis 1 is
the acquisition index, with column ``k`` acquired at angle ``2*pi*k/K``.

A cartesian image is square with side ``S`` and center ``m = (S - 1) / 2``.
Angle 0 points along +columns and increases toward +rows (clockwise when the
image is displayed with row 0 at the top). The catheter sits at the center.

All resampling is bilinear. Polar angle wraps, polar depth clamps.
"""
from functools import lru_cache

import numpy as np

MIN_DEPTH_SAMPLES = 2
MIN_ASCANS = 4
MIN_SIDE = 8
DEFAULT_SIDE = 600

_EDGE_TOL = 1e-9


def check_polar(p):
    p = np.asarray(p)
    if p.ndim != 2:
        raise ValueError(f"polar image must be 2-D, got shape {p.shape}")
    if p.shape[0] < MIN_DEPTH_SAMPLES or p.shape[1] < MIN_ASCANS:
        raise ValueError(
            f"polar image needs at least {MIN_DEPTH_SAMPLES} depth samples and "
            f"{MIN_ASCANS} A-scans, got shape {p.shape}"
        )
    return p


def check_cartesian(c):
    c = np.asarray(c)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cartesian image must be square 2-D, got shape {c.shape}")
    if c.shape[0] < MIN_SIDE:
        raise ValueError(f"cartesian side must be >= {MIN_SIDE}, got {c.shape[0]}")
    return c


def bilinear_sample(img, rows, cols, fill=None):
    """Sample ``img`` at fractional ``(rows, cols)``.

    Points outside the pixel-center lattice get ``fill``; with ``fill=None``
    they are clamped to the border instead.
    """
    img = np.asarray(img, dtype=np.float64)
    n_r, n_c = img.shape
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)

    outside = None
    if fill is not None:
        outside = (
            (rows < -_EDGE_TOL) | (rows > n_r - 1 + _EDGE_TOL)
            | (cols < -_EDGE_TOL) | (cols > n_c - 1 + _EDGE_TOL)
        )
    rows = np.clip(rows, 0.0, n_r - 1)
    cols = np.clip(cols, 0.0, n_c - 1)

    r0 = np.minimum(np.floor(rows).astype(np.intp), max(n_r - 2, 0))
    c0 = np.minimum(np.floor(cols).astype(np.intp), max(n_c - 2, 0))
    fr = rows - r0
    fc = cols - c0
    r1 = np.minimum(r0 + 1, n_r - 1)
    c1 = np.minimum(c0 + 1, n_c - 1)

    out = (
        (1 - fr) * (1 - fc) * img[r0, c0]
        + (1 - fr) * fc * img[r0, c1]
        + fr * (1 - fc) * img[r1, c0]
        + fr * fc * img[r1, c1]
    )
    if outside is not None:
        out = np.where(outside, fill, out)
    return out


@lru_cache(maxsize=16)
def _polar_lookup(depth, ascans, side):
    # Index/weight tables for polar_to_cartesian; cached since every frame of a
    # dataset shares the same geometry.
    m = (side - 1) / 2.0
    rr, cc = np.mgrid[0:side, 0:side].astype(np.float64)
    dy = rr - m
    dx = cc - m
    rho = np.hypot(dy, dx)
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    inside = rho <= m

    d = rho * (depth - 1) / m
    a = theta * ascans / (2 * np.pi)

    d = np.clip(d, 0.0, depth - 1)
    d0 = np.minimum(np.floor(d).astype(np.intp), depth - 2)
    fd = d - d0
    a_floor = np.floor(a)
    fa = a - a_floor
    a0 = a_floor.astype(np.intp) % ascans
    a1 = (a0 + 1) % ascans

    sel = inside.ravel()
    tables = []
    for arr in (d0, a0, a1, fd, fa):
        t = arr.ravel()[sel]
        t.setflags(write=False)
        tables.append(t)
    sel.setflags(write=False)
    return sel, tuple(tables)


def polar_to_cartesian(p, side=DEFAULT_SIDE, fill=0.0):
    """Scan-convert a ``(D, K)`` polar image to a ``side x side`` disk.

    Output pixel at radius ``rho`` and angle ``theta`` samples depth
    ``rho * (D - 1) / m`` and A-scan ``theta * K / (2 pi)``. Pixels with
    ``rho > m`` receive ``fill``.
    """
    p = check_polar(p).astype(np.float64, copy=False)
    side = int(side)
    if side < MIN_SIDE:
        raise ValueError(f"side must be >= {MIN_SIDE}, got {side}")
    depth, ascans = p.shape
    sel, (d0, a0, a1, fd, fa) = _polar_lookup(depth, ascans, side)

    vals = (
        (1 - fd) * (1 - fa) * p[d0, a0]
        + (1 - fd) * fa * p[d0, a1]
        + fd * (1 - fa) * p[d0 + 1, a0]
        + fd * fa * p[d0 + 1, a1]
    )
    out = np.full(side * side, float(fill))
    out[sel] = np.clip(vals, 0.0, 1.0)
    return out.reshape(side, side)


def cartesian_to_polar(c, depth_samples, num_ascans):
    """Inverse of :func:`polar_to_cartesian`: resample a disk onto a polar grid.

    Pixels outside the scanned disk are excluded from interpolation.
    """
    c = check_cartesian(c).astype(np.float64, copy=False)
    depth_samples = int(depth_samples)
    num_ascans = int(num_ascans)
    if depth_samples < MIN_DEPTH_SAMPLES or num_ascans < MIN_ASCANS:
        raise ValueError(
            f"need depth_samples >= {MIN_DEPTH_SAMPLES} and num_ascans >= {MIN_ASCANS}"
        )
    m = (c.shape[0] - 1) / 2.0
    rho = np.arange(depth_samples) * m / (depth_samples - 1)
    theta = 2 * np.pi * np.arange(num_ascans) / num_ascans
    rows = m + rho[:, None] * np.sin(theta)[None, :]
    cols = m + rho[:, None] * np.cos(theta)[None, :]
    # Interpolate only over in-disk pixels so the fill never bleeds into the
    # rim. A rim sample can have all four neighbors outside the disk; those
    # are taken half a pixel further in, where an inside neighbor exists.
    rr, cc = np.mgrid[0:c.shape[0], 0:c.shape[1]]
    support = (np.hypot(rr - m, cc - m) <= m + _EDGE_TOL).astype(np.float64)
    cw = c * support
    num = bilinear_sample(cw, rows, cols)
    den = bilinear_sample(support, rows, cols)
    empty = den < 1e-12
    if empty.any():
        i, k = np.nonzero(empty)
        r_in = np.minimum(rho[i], m - 0.5)
        rows_in = m + r_in * np.sin(theta[k])
        cols_in = m + r_in * np.cos(theta[k])
        num[empty] = bilinear_sample(cw, rows_in, cols_in)
        den[empty] = bilinear_sample(support, rows_in, cols_in)
    return np.clip(num / den, 0.0, 1.0)


@lru_cache(maxsize=32)
def _interp_matrix(n_in, n_out):
    # Corner-aligned linear interpolation weights, shape (n_out, n_in).
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
    f = pos - i0
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), i0] = 1 - f
    w[np.arange(n_out), i0 + 1] += f
    w.setflags(write=False)
    return w


def resize(img, target):
    """Bilinear resize with corner-aligned sampling (corners map to corners)."""
    img = np.asarray(img, dtype=np.float64)
    rows, cols = (int(t) for t in target)
    if img.ndim != 2 or min(img.shape) < 2 or rows < 2 or cols < 2:
        raise ValueError(f"cannot resize {img.shape} to {(rows, cols)}: dims must be >= 2")
    if img.shape == (rows, cols):
        return img.copy()
    out = _interp_matrix(img.shape[0], rows) @ img @ _interp_matrix(img.shape[1], cols).T
    return np.clip(out, 0.0, 1.0)


def center_crop(img, size):
    img = np.asarray(img)
    rows, cols = (int(s) for s in size)
    if rows > img.shape[0] or cols > img.shape[1] or rows < 1 or cols < 1:
        raise ValueError(f"crop {(rows, cols)} does not fit image {img.shape}")
    top = (img.shape[0] - rows) // 2
    left = (img.shape[1] - cols) // 2
    return img[top:top + rows, left:left + cols].copy()


def crop(img, offset, size):
    img = np.asarray(img)
    top, left = offset
    rows, cols = size
    if top < 0 or left < 0 or top + rows > img.shape[0] or left + cols > img.shape[1]:
        raise ValueError(f"crop at {offset} of size {size} exceeds image {img.shape}")
    return img[top:top + rows, left:left + cols].copy()


def rotate(img, angle, fill=0.0):
    """Rotate about the image center by ``angle`` degrees.

    Positive angles move content toward increasing polar angle, so that
    rolling polar columns by ``j`` matches ``rotate(.., 360 * j / K)``.
    Multiples of 90 degrees on square images are exact pixel permutations.
    """
    img = np.asarray(img, dtype=np.float64)
    quarter, rem = divmod(float(angle), 90.0)
    if rem == 0.0 and (img.shape[0] == img.shape[1] or int(quarter) % 2 == 0):
        return np.rot90(img, -int(quarter) % 4).copy()

    a = np.deg2rad(angle)
    mr = (img.shape[0] - 1) / 2.0
    mc = (img.shape[1] - 1) / 2.0
    rr, cc = np.mgrid[0:img.shape[0], 0:img.shape[1]].astype(np.float64)
    dy = rr - mr
    dx = cc - mc
    cos_a, sin_a = np.cos(a), np.sin(a)
    src_c = mc + cos_a * dx + sin_a * dy
    src_r = mr - sin_a * dx + cos_a * dy
    return np.clip(bilinear_sample(img, src_r, src_c, fill=float(fill)), 0.0, 1.0)

"""Edge-to-mask rasterization by ray casting, and its backward pass.

Masks are numpy arrays of shape ``(H, W)`` indexed ``[y, x]``. Pixel
``(ix, iy)`` is sampled at the lattice point ``(ix, iy)``: a ray is cast
from it towards -y and crossings with horizontal boundary edges are counted.
Under the half-open crossing predicate a rectangle ``[x0, x1] x [y0, y1]``
fills columns ``x0 .. x1-1`` and rows ``y0+1 .. y1``.
"""
from __future__ import annotations

import logging
import os

import numba
import numpy as np

from .errors import GeometryError
from .geometry import Point, Segment, SegmentSet

log = logging.getLogger(__name__)

THREADS_ENV = "EDGEOPC_THREADS"


def configure_threads(n: int | None = None) -> int:
    """Set the rasterizer thread count (``EDGEOPC_THREADS`` if ``n`` is None)."""
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@numba.njit(cache=True, inline="always")
def _check_cross(px, py, sx, sy, ex, ey):
    v1x = px - sx
    v1y = py - sy
    v2x = px - ex
    v2y = py - ey
    cross = v1x * v2y - v1y * v2x
    cond1 = (v1x < 0) and (v2x >= 0) and (cross < 0)
    cond2 = (v1x >= 0) and (v2x < 0) and (cross > 0)
    return cond1 or cond2


def check_cross(p, s) -> bool:
    """True if the downward ray from ``p`` crosses the horizontal segment ``s``.

    ``s`` is a Segment or a ``((x1, y1), (x2, y2))`` pair.
    """
    if isinstance(s, Segment):
        (sx, sy), (ex, ey) = tuple(s.start), tuple(s.end)
    else:
        (sx, sy), (ex, ey) = s
    px, py = tuple(p) if isinstance(p, Point) else p
    return bool(_check_cross(int(px), int(py), int(sx), int(sy), int(ex), int(ey)))


@numba.njit(parallel=True, cache=True)
def _count_crossings(hseg, x_lo, x_hi, y_lo, y_hi, H, W):
    count = np.zeros((H, W), dtype=np.int32)
    nseg = hseg.shape[0]
    for x in numba.prange(x_lo, x_hi + 1):
        for k in range(nseg):
            sx = hseg[k, 0]
            ex = hseg[k, 2]
            lo = min(sx, ex)
            hi = max(sx, ex)
            # the predicate is false outside [lo, hi); skip the column early
            if x < lo or x >= hi:
                continue
            sy = hseg[k, 1]
            ey = hseg[k, 3]
            for y in range(y_lo, y_hi + 1):
                if _check_cross(x, y, sx, sy, ex, ey):
                    count[y, x] += 1
    return count


def _boundary_edges(merged: SegmentSet, W: int, H: int) -> np.ndarray:
    edges = merged.ring_edges()
    if len(edges) == 0:
        return edges
    step = edges[:, 1] - edges[:, 0]
    if np.any((step[:, 0] != 0) & (step[:, 1] != 0)):
        raise GeometryError("ring is not closed: diagonal gap between consecutive segments")
    if np.any(edges != np.round(edges)):
        raise GeometryError("rasterize expects integer (rounded) coordinates")
    clipped = edges.copy()
    clipped[..., 0] = np.clip(clipped[..., 0], 0, W - 1)
    clipped[..., 1] = np.clip(clipped[..., 1], 0, H - 1)
    if np.any(clipped != edges):
        log.warning("rasterize: coordinates outside the %dx%d clip were clamped", W, H)
    return clipped


def rasterize(merged: SegmentSet, W: int, H: int, axis: str = "horizontal") -> np.ndarray:
    """Binary mask (uint8, shape ``(H, W)``) of the closed rings in ``merged``.

    Only horizontal boundary edges are tested; the even-odd rule on the
    integer crossing counts gives the mask. ``axis="vertical"`` runs the
    mirrored test on vertical edges instead and must agree exactly.
    """
    if W <= 0 or H <= 0:
        raise GeometryError("mask dimensions must be positive")
    edges = _boundary_edges(merged, W, H)
    if len(edges) == 0:
        return np.zeros((H, W), dtype=np.uint8)
    if axis == "vertical":
        return _rasterize_vertical(edges, W, H)
    horiz = edges[(edges[:, 0, 1] == edges[:, 1, 1]) & (edges[:, 0, 0] != edges[:, 1, 0])]
    if len(horiz) == 0:
        return np.zeros((H, W), dtype=np.uint8)
    hseg = horiz.reshape(-1, 4).astype(np.int64)
    x_lo, x_hi = int(edges[..., 0].min()), int(edges[..., 0].max())
    y_lo, y_hi = int(edges[..., 1].min()), int(edges[..., 1].max())
    count = _count_crossings(hseg, x_lo, x_hi, y_lo, y_hi, H, W)
    return (count % 2 == 1).astype(np.uint8)


def _rasterize_vertical(edges: np.ndarray, W: int, H: int) -> np.ndarray:
    vert = edges[(edges[:, 0, 0] == edges[:, 1, 0]) & (edges[:, 0, 1] != edges[:, 1, 1])]
    parity = np.zeros((H, W), dtype=np.int32)
    for (xe, ya), (_, yb) in vert.astype(np.int64):
        lo, hi = min(ya, yb), max(ya, yb)
        # ray towards -x: crosses x = xe iff xe <= px, rows lo < py <= hi
        parity[lo + 1:hi + 1, xe:] += 1
    return (parity % 2 == 1).astype(np.uint8)


def compute_edge_gradients(dL_dM: np.ndarray, merged: SegmentSet, velocities: np.ndarray,
                           mode: str = "midpoint") -> np.ndarray:
    """Per-segment gradients ``[N, 2, 2]`` from an image-domain gradient.

    Each segment takes the image gradient at its floored midpoint and both
    endpoint rows become that scalar times the segment velocity. With
    ``mode="mean"`` the scalar is averaged over the pixels under the segment.
    """
    H, W = dL_dM.shape
    n = len(merged)
    out = np.zeros((n, 2, 2), dtype=np.float64)
    if n == 0:
        return out
    c = merged.coords
    g = np.zeros(n, dtype=np.float64)
    if mode == "midpoint":
        mx = np.floor((c[:, 0, 0] + c[:, 1, 0]) / 2).astype(np.int64)
        my = np.floor((c[:, 0, 1] + c[:, 1, 1]) / 2).astype(np.int64)
        ok = (mx >= 0) & (mx < W) & (my >= 0) & (my < H)
        if not np.all(ok):
            log.warning("compute_edge_gradients: %d segment midpoints out of bounds", int((~ok).sum()))
        g[ok] = dL_dM[my[ok], mx[ok]]
    elif mode == "mean":
        for i in range(n):
            (x1, y1), (x2, y2) = np.floor(c[i]).astype(np.int64)
            xs = np.arange(min(x1, x2), max(x1, x2) + 1)
            ys = np.arange(min(y1, y2), max(y1, y2) + 1)
            xx, yy = np.broadcast_arrays(xs[:, None], ys[None, :])
            ok = (xx >= 0) & (xx < W) & (yy >= 0) & (yy < H)
            if ok.any():
                g[i] = dL_dM[yy[ok], xx[ok]].mean()
    else:
        raise ValueError(f"unknown gradient mode {mode!r}")
    out[:, 0, :] = g[:, None] * velocities
    out[:, 1, :] = out[:, 0, :]
    return out


def edge_scalar(grads: np.ndarray, velocities: np.ndarray) -> np.ndarray:
    """Signed gradient magnitude along each velocity."""
    return np.einsum("ij,ij->i", grads[:, 0, :], velocities)


def apply_step(segset: SegmentSet, grads: np.ndarray, lr: float, clip: float | None = None) -> SegmentSet:
    """Gradient-descent update ``S - lr * grad``, optionally clipped per coordinate.

    Segments with non-finite gradients are left in place.
    """
    if grads.shape != segset.coords.shape:
        raise ValueError(f"gradient shape {grads.shape} does not match segments {segset.coords.shape}")
    step = -lr * grads
    bad = ~np.all(np.isfinite(step.reshape(len(segset), -1)), axis=1)
    if bad.any():
        log.warning("apply_step: skipped %d segments with non-finite gradient", int(bad.sum()))
        step[bad] = 0.0
    if clip is not None:
        step = np.clip(step, -clip, clip)
    return segset.replace(segset.coords + step)

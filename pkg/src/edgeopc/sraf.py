"""Sub-resolution assist features: gradient-based seeding, pruning, co-optimization.

Seeds come from the L2 gradient of the target itself used as a mask on a
grid ``factor`` times coarser. Where that gradient is most negative, adding
mask transmission would help the print most; those places, away from the
main pattern, become small square assist rectangles that are then moved by
the same edge optimizer as the main pattern.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .geometry import Point, Polygon, SegmentSet
from .litho import KernelSet, forward, pick_corners
from .loss import backprop_resist
from .raster import rasterize

# gradient values are rounded to this many relative digits before ranking
_SCORE_DIGITS = 6


@dataclass(frozen=True)
class SrafSeed:
    center: Point
    size: tuple[int, int]
    score: float
    rect: tuple[int, int, int, int]  # (x0, y0, x1, y1) polygon corners at full resolution
    grid_index: tuple[float, float]  # (i, j) on the coarse grid; half-integers sit between pixels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["center"] = [self.center.x, self.center.y]
        return d


def area_downsample(mask: np.ndarray, factor: int) -> np.ndarray:
    H, W = mask.shape
    if H % factor or W % factor:
        raise ConfigError(f"mask shape {mask.shape} is not divisible by the SRAF factor {factor}")
    m = np.asarray(mask, dtype=np.float64)
    return m.reshape(H // factor, factor, W // factor, factor).mean(axis=(1, 3))


def low_res_gradient(target: np.ndarray, kernels: KernelSet, config) -> np.ndarray:
    """``dL2/dM`` on the coarse grid, evaluated at ``M = T``."""
    factor = config.sraf_factor
    t_low = area_downsample(target, factor)
    k_low = kernels.downsampled(factor)
    nominal = pick_corners(config.corners)[0]
    fwd = forward(t_low, k_low, (nominal,), config.alpha, config.threshold)
    return backprop_resist(2.0 * (fwd.nominal.z - t_low), fwd.nominal, config.alpha)


def _seed_rect(i: float, j: float, factor: int, size: int) -> tuple[int, int, int, int]:
    # coarse pixel (i, j) covers fine columns/rows factor*i .. factor*i + factor - 1, and i, j
    # may be half-integers; a rect [x0, x1] x [y0, y1] fills columns x0..x1-1 and rows y0+1..y1
    cx2 = int(round(2 * factor * i)) + factor - 1  # twice the block centre
    cy2 = int(round(2 * factor * j)) + factor - 1
    x0 = (cx2 - size + 1) // 2
    y0 = (cy2 - size + 1) // 2 - 1
    return x0, y0, x0 + size, y0 + size


def generate_sraf_seeds(target: np.ndarray, kernels: KernelSet, config) -> list[SrafSeed]:
    """Place assist-feature seeds at negative local minima of the coarse L2 gradient.

    Candidates must lie in empty field: their rectangles keep the largest
    spacing rule plus 2 px from the target, and half a kernel from the
    frame edge. Gradient values above ``-1e-3`` of the peak are ignored.
    Selection is greedy by score. Candidates whose quantized scores tie are
    handled as one group and a member is taken only if it clashes with
    nothing already taken and with no other member of its group, so a
    symmetric target yields a symmetric seed set. A group that would
    overflow ``config.max_srafs`` is dropped whole.
    """
    target = np.asarray(target)
    H, W = target.shape
    factor, size = config.sraf_factor, config.sraf_size
    if config.max_srafs <= 0 or not target.any():
        return []
    G = low_res_gradient(target, kernels, config)
    peak = float(np.abs(G).max())
    if peak == 0:
        return []
    rules = config.rules
    gap = int(np.ceil(rules.largest)) + 2
    # seed rectangles must keep `gap` px from every target pixel (projection metric)
    near = ndimage.maximum_filter(target > 0, size=2 * gap + 1, mode="constant")
    table = np.pad(near.astype(np.int64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    margin = kernels.size // 2
    pitch = size + rules.largest + 5  # minimum centre distance between two seeds, per axis
    # quantize so mirror images of a symmetric target, equal up to float noise, tie exactly
    Gq = np.round(G / peak * 10 ** _SCORE_DIGITS).astype(np.int64)
    local_min = (Gq == ndimage.minimum_filter(Gq, size=5, mode="nearest")) & (Gq < -(10 ** (_SCORE_DIGITS - 3)))
    # a plateau of tied minima (e.g. two pixels either side of a mirror axis) is one candidate
    labels, n = ndimage.label(local_min, structure=np.ones((3, 3)))
    cands = []
    for lab in range(1, n + 1):
        js, is_ = np.nonzero(labels == lab)
        ci, cj = round(2 * is_.mean()) / 2, round(2 * js.mean()) / 2
        x0, y0, x1, y1 = _seed_rect(ci, cj, factor, size)
        c0, c1, r0, r1 = x0, x1, y0 + 1, y1 + 1  # pixel ranges the rect fills
        if c0 < margin or r0 < margin or c1 > W - margin or r1 > H - margin:
            continue
        if table[r1, c1] - table[r0, c1] - table[r1, c0] + table[r0, c0]:
            continue
        cands.append((int(-Gq[js[0], is_[0]]), cj, ci, (x0, y0, x1, y1), float(-G[js, is_].mean())))
    if not cands:
        return []
    cands.sort(key=lambda c: (-c[0], c[1], c[2]))
    groups: list[list[int]] = []
    for k, c in enumerate(cands):
        if groups and cands[groups[-1][0]][0] == c[0]:
            groups[-1].append(k)
        else:
            groups.append([k])

    def clash(a: int, b: int) -> bool:
        dx = abs(cands[a][2] - cands[b][2]) * factor
        dy = abs(cands[a][1] - cands[b][1]) * factor
        return max(dx, dy) < pitch

    taken: list[int] = []
    for grp in groups:
        ok = [k for k in grp
              if not any(clash(k, t) for t in taken) and not any(clash(k, o) for o in grp if o != k)]
        if len(taken) + len(ok) > config.max_srafs:
            break
        taken.extend(ok)
    seeds = []
    for k in taken:
        _, cj, ci, rect, score = cands[k]
        center = Point(factor * ci + (factor - 1) / 2, factor * cj + (factor - 1) / 2)
        seeds.append(SrafSeed(center, (size, size), score, rect, (ci, cj)))
    return seeds


def seeds_to_polygons(seeds, config=None) -> list[Polygon]:
    return [Polygon.rect(*s.rect) for s in seeds]


def prune_srafs(merged: SegmentSet, z_nom: np.ndarray, min_width: float) -> list[int]:
    """Ring indices to keep: every main ring, and assist rings that neither print nor collapse.

    An assist ring is dropped when any of its pixels is 1 in the hard nominal
    print ``z_nom`` or when its bounding box is thinner than ``min_width``.
    """
    H, W = z_nom.shape
    keep = []
    for k, tag in enumerate(merged.ring_tags):
        if tag != "sraf":
            keep.append(k)
            continue
        v = merged.ring_vertices(k)
        x0, y0 = v.min(axis=0)
        x1, y1 = v.max(axis=0)
        if min(x1 - x0, y1 - y0) < min_width:
            continue
        ox, oy = int(x0), int(y0)
        local = merged.subset_rings([k])
        local = local.replace(local.coords - np.array([ox, oy]))
        win = rasterize(local, int(x1 - x0) + 1, int(y1 - y0) + 1)
        ys, xs = np.nonzero(win)
        ys, xs = ys + oy, xs + ox
        inside = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
        if np.any(z_nom[ys[inside], xs[inside]]):
            continue
        keep.append(k)
    return keep


def optimize_with_srafs(target, seeds, config, kernels):
    """Optimize the main pattern together with assist rectangles built from ``seeds``."""
    from .optimizer import optimize

    return optimize(target, config, kernels, srafs=seeds_to_polygons(seeds, config))


def save_seeds(seeds, path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in seeds], indent=2) + "\n")


def load_seeds(path) -> list[SrafSeed]:
    out = []
    for d in json.loads(Path(path).read_text()):
        out.append(SrafSeed(Point(*d["center"]), tuple(d["size"]), float(d["score"]), tuple(d["rect"]),
                            tuple(d["grid_index"])))
    return out

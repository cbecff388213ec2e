"""Evaluation metrics on hard-thresholded images: L2, PVB, EPE count, shots."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .litho import DEFAULT_CORNERS, DEFAULT_THRESHOLD, ProcessCorner, hard_corners
from .loss import EpeSamplePlan


@dataclass
class MetricsReport:
    l2: float
    pvb: float
    epe_count: int
    shots: int
    tat_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def table_header() -> str:
        return f"{'case':<16}{'L2 (nm^2)':>12}{'PVB (nm^2)':>12}{'EPE':>6}{'#shot':>7}{'TAT (s)':>9}"

    def table_row(self, name: str = "result") -> str:
        return (f"{name:<16}{self.l2:>12.0f}{self.pvb:>12.0f}{self.epe_count:>6d}"
                f"{self.shots:>7d}{self.tat_seconds:>9.2f}")


def _binary_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    return a.astype(bool), b.astype(bool)


def metric_l2(z_nom: np.ndarray, target: np.ndarray) -> float:
    """Squared L2 error of binary images: the number of differing pixels (1 nm^2 each)."""
    a, b = _binary_pair(z_nom, target)
    return float(np.count_nonzero(a ^ b))


def metric_pvb(z_max: np.ndarray, z_min: np.ndarray) -> float:
    a, b = _binary_pair(z_max, z_min)
    return float(np.count_nonzero(a ^ b))


def edge_displacements(z_nom: np.ndarray, plan: EpeSamplePlan) -> np.ndarray:
    """Signed printed-contour offset at each sample, along its outward normal.

    Positive means the print extends past the target edge. Scans stop after
    ``2 * th_epe`` pixels; an unterminated scan reports ``2 * th_epe + 1``.
    """
    z = np.asarray(z_nom).astype(bool)
    H, W = z.shape
    cap = 2 * plan.th_epe
    out = np.zeros(len(plan), dtype=np.int64)
    for k in range(len(plan)):
        x, y = int(plan.xs[k]), int(plan.ys[k])
        nx, ny = int(plan.normals[k, 0]), int(plan.normals[k, 1])

        def at(step):
            xx, yy = x + step * nx, y + step * ny
            if 0 <= xx < W and 0 <= yy < H:
                return z[yy, xx]
            return False

        if at(0):
            d = 0
            while d < cap + 1 and at(d + 1):
                d += 1
            out[k] = d
        else:
            d = 1
            while d < cap + 1 and not at(-d):
                d += 1
            out[k] = -d
    return out


def metric_epe(z_nom: np.ndarray, target: np.ndarray, plan: EpeSamplePlan) -> int:
    """Number of samples whose printed contour is more than ``th_epe`` px off target."""
    _binary_pair(z_nom, target)
    d = edge_displacements(z_nom, plan)
    return int(np.count_nonzero(np.abs(d) > plan.th_epe))


def decompose_rectangles(mask: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Exact rectangle cover by horizontal-slab merging.

    Row runs are stacked while consecutive rows have a run with the same
    x-extent. Rectangles are ``(x0, y0, x1, y1)`` pixel ranges, half-open.
    """
    m = np.asarray(mask).astype(bool)
    H, W = m.shape
    rects: list[tuple[int, int, int, int]] = []
    active: dict[tuple[int, int], int] = {}
    padded = np.zeros((H, W + 2), dtype=np.int8)
    padded[:, 1:-1] = m
    diff = np.diff(padded, axis=1)
    for y in range(H + 1):
        runs: dict[tuple[int, int], int] = {}
        if y < H:
            starts = np.nonzero(diff[y] == 1)[0]
            ends = np.nonzero(diff[y] == -1)[0]
            for s, e in zip(starts, ends):
                key = (int(s), int(e))
                runs[key] = active.get(key, y)
        for key, y0 in active.items():
            if key not in runs:
                rects.append((key[0], y0, key[1], y))
        active = runs
    rects.sort(key=lambda r: (r[1], r[0]))
    return rects


def reconstruct(rects, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for x0, y0, x1, y1 in rects:
        out[y0:y1, x0:x1] = True
    return out


def shot_count(mask: np.ndarray) -> int:
    return len(decompose_rectangles(mask))


def evaluate(mask: np.ndarray, target: np.ndarray, kernels, plan: EpeSamplePlan,
             corners: Sequence[ProcessCorner] = DEFAULT_CORNERS, threshold: float = DEFAULT_THRESHOLD,
             tat_seconds: float = 0.0) -> MetricsReport:
    """Hard-threshold evaluation of a binary mask against its target."""
    z_nom, z_max, z_min = hard_corners(mask, kernels, corners, threshold)
    return MetricsReport(
        l2=metric_l2(z_nom, target),
        pvb=metric_pvb(z_max, z_min),
        epe_count=metric_epe(z_nom, target, plan),
        shots=shot_count(mask),
        tat_seconds=tat_seconds,
    )

"""Deterministic layout fixtures and brute-force reference implementations.

The oracles here share no code with the modules they check: they use
plain loops or direct numpy formulas and import nothing from ``raster``,
``litho``, ``loss`` or ``mrc``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import Polygon


@dataclass
class Fixture:
    name: str
    polygons: list[Polygon]
    width: int = 512
    height: int = 512
    symmetry: str | None = None  # "c4", "mirror-x", "mirror-y" or None
    notes: str = ""
    tags: list[str] = field(default_factory=list)

    @property
    def n_rings(self) -> int:
        return len(self.polygons)

    @property
    def area(self) -> float:
        return float(sum(p.signed_area() for p in self.polygons))


def _centered(polys: list[Polygon], width: int, height: int) -> list[Polygon]:
    """Shift polygons so their joint bbox is centred in the frame (half-open raster aware)."""
    xs = [v.x for p in polys for v in p.vertices]
    ys = [v.y for p in polys for v in p.vertices]
    # a rect [x0, x1] x [y0, y1] covers columns x0..x1-1 and rows y0+1..y1
    dx = (width - (min(xs) + max(xs))) / 2
    dy = (height - 2 - (min(ys) + max(ys))) / 2
    if dx != int(dx) or dy != int(dy):
        dx, dy = int(np.floor(dx)), int(np.floor(dy))
    return [p.translated(int(dx), int(dy)) for p in polys]


def _square(scale: float, frame: int) -> Fixture:
    s = int(scale)
    return Fixture("square", _centered([Polygon.rect(0, 0, s, s)], frame, frame), frame, frame, "c4")


def _lines(scale: float, frame: int, n: int = 3, width: int | None = None, length: int = 300) -> Fixture:
    pitch = int(scale)
    w = width if width is not None else pitch // 2
    polys = [Polygon.rect(k * pitch, 0, k * pitch + w, length) for k in range(n)]
    return Fixture("lines", _centered(polys, frame, frame), frame, frame, "mirror-x")


def _contact(scale: float, frame: int) -> Fixture:
    s = int(scale)
    return Fixture("contact", _centered([Polygon.rect(0, 0, s, s)], frame, frame), frame, frame, "c4")


def _comb(scale: float, frame: int, teeth: int = 4) -> Fixture:
    """A horizontal spine with teeth pointing up; ``scale`` is the tooth width and the gap."""
    w = int(scale)
    u = w  # spine thickness and the space between teeth
    right = 2 * (teeth - 1) * w + w
    pts = [(0, 0), (right, 0)]
    for k in range(teeth - 1, 0, -1):
        x0 = 2 * k * w
        pts += [(x0 + w, 4 * w), (x0, 4 * w), (x0, u), (x0 - w, u)]
    pts += [(w, 4 * w), (0, 4 * w)]
    return Fixture("comb", _centered([Polygon.from_coords(pts)], frame, frame), frame, frame, "mirror-x")


def _staircase(scale: float, frame: int) -> Fixture:
    u = int(scale)
    pts = [(0, 0), (3 * u, 0), (3 * u, u), (2 * u, u), (2 * u, 2 * u), (u, 2 * u), (u, 3 * u), (0, 3 * u)]
    return Fixture("staircase", _centered([Polygon.from_coords(pts)], frame, frame), frame, frame)


def _donut(scale: float, frame: int) -> Fixture:
    s = int(scale)
    t = s // 4
    outer = Polygon.rect(0, 0, s, s)
    hole = Polygon.rect(t, t, s - t, s - t).reversed()
    return Fixture("donut", _centered([outer, hole], frame, frame), frame, frame, "c4")


def _square_and_lines(scale: float, frame: int) -> Fixture:
    """A square above three parallel horizontal lines; the convergence regression layout."""
    u = int(scale)  # line pitch
    w = u // 2
    side = int(1.2 * u)
    length = 3 * u
    polys = [Polygon.rect((length - side) // 2, 0, (length - side) // 2 + side, side)]
    y = side + int(0.6 * u)
    for k in range(3):
        polys.append(Polygon.rect(0, y + k * u, length, y + k * u + w))
    return Fixture("square-and-lines", _centered(polys, frame, frame), frame, frame, "mirror-x")


def _two_lines(scale: float, frame: int, width: int = 60, length: int = 200) -> Fixture:
    """Two collinear lines facing tip to tip across a gap of ``scale``.

    Line-end pullback drives the tips towards each other, so without rule
    gating the gap closes below the spacing rule.
    """
    gap = int(scale)
    polys = [Polygon.rect(0, 0, length, width), Polygon.rect(length + gap, 0, 2 * length + gap, width)]
    return Fixture("two-lines", _centered(polys, frame, frame), frame, frame, "mirror-x")


_FAMILIES = {
    "square": (_square, 400),
    "lines": (_lines, 120),
    "contact": (_contact, 80),
    "comb": (_comb, 50),
    "staircase": (_staircase, 80),
    "donut": (_donut, 240),
    "square-and-lines": (_square_and_lines, 100),
    "two-lines": (_two_lines, 44),
}

FIXTURE_NAMES = tuple(_FAMILIES)


def make_fixture(name: str, scale: float | None = None, frame: int = 512, **kw) -> Fixture:
    """Build a named fixture. ``scale`` is the family's characteristic length in nm.

    square: side; lines: pitch (width = pitch / 2); contact: side; comb: tooth width;
    staircase: step; donut: outer side; square-and-lines: line pitch; two-lines: gap.
    """
    if name not in _FAMILIES:
        raise ConfigError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURE_NAMES)}")
    fn, default = _FAMILIES[name]
    fx = fn(default if scale is None else scale, frame, **kw)
    for p in fx.polygons:
        xs = [v.x for v in p.vertices]
        ys = [v.y for v in p.vertices]
        if min(xs) < 0 or min(ys) < 0 or max(xs) > frame - 1 or max(ys) > frame - 1:
            raise ConfigError(f"fixture {name!r} at scale {scale} does not fit a {frame} px frame")
    return fx


def random_manhattan_layout(rng: np.random.Generator, size: int = 128, max_shapes: int = 4) -> list[Polygon]:
    """Random non-overlapping rectilinear polygons (rects, L/U shapes, skylines, donuts)."""
    polys: list[Polygon] = []
    boxes: list[tuple[int, int, int, int]] = []
    for _ in range(int(rng.integers(1, max_shapes + 1)) * 4):
        if len(polys) >= max_shapes:
            break
        w, h = int(rng.integers(6, size // 2)), int(rng.integers(6, size // 2))
        x0, y0 = int(rng.integers(1, size - w - 1)), int(rng.integers(1, size - h - 1))
        box = (x0 - 2, y0 - 2, x0 + w + 2, y0 + h + 2)
        if any(not (box[2] <= b[0] or b[2] <= box[0] or box[3] <= b[1] or b[3] <= box[1]) for b in boxes):
            continue
        kind = rng.choice(["rect", "skyline", "donut", "skyline"])
        if kind == "donut" and w >= 10 and h >= 10:
            tx, ty = int(rng.integers(2, w // 2 - 2)), int(rng.integers(2, h // 2 - 2))
            polys.append(Polygon.rect(x0, y0, x0 + w, y0 + h))
            polys.append(Polygon.rect(x0 + tx, y0 + ty, x0 + w - tx, y0 + h - ty).reversed())
        elif kind == "skyline" and w >= 6:
            polys.append(_skyline(rng, x0, y0, w, h))
        else:
            polys.append(Polygon.rect(x0, y0, x0 + w, y0 + h))
        boxes.append(box)
    return polys


def _skyline(rng: np.random.Generator, x0: int, y0: int, w: int, h: int) -> Polygon:
    ncol = int(rng.integers(1, min(5, w // 2) + 1))
    cuts = sorted(set(rng.choice(np.arange(1, w), size=ncol - 1, replace=False).tolist())) if ncol > 1 else []
    xs = [x0] + [x0 + c for c in cuts] + [x0 + w]
    heights = []
    for _ in range(len(xs) - 1):
        hh = int(rng.integers(1, h + 1))
        while heights and hh == heights[-1]:
            hh = int(rng.integers(1, h + 1))
        heights.append(hh)
    pts = [(x0, y0), (x0 + w, y0)]
    for k in range(len(heights) - 1, -1, -1):
        pts.append((xs[k + 1], y0 + heights[k]))
        pts.append((xs[k], y0 + heights[k]))
    return Polygon.from_coords(pts)


# ---------------------------------------------------------------------------
# oracles


def oracle_rasterize(polygons, W: int, H: int) -> np.ndarray:
    """Even-odd test of every lattice point ``(x, y)`` against the polygon edges.

    A downward ray from the point crosses a horizontal edge at height ``ye``
    when ``ye < y`` and ``min(xa, xb) <= x < max(xa, xb)``.
    """
    yy, xx = np.mgrid[0:H, 0:W]
    parity = np.zeros((H, W), dtype=bool)
    for poly in polygons:
        pts = [(float(v.x), float(v.y)) for v in poly.vertices]
        for k in range(len(pts)):
            (xa, ya), (xb, yb) = pts[k], pts[(k + 1) % len(pts)]
            if ya != yb:
                continue
            parity ^= (xx >= min(xa, xb)) & (xx < max(xa, xb)) & (yy > ya)
    return parity.astype(np.uint8)


def oracle_convolve(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Direct periodic convolution; the kernel centre sits at index ``K // 2``."""
    H, W = image.shape
    K = kernel.shape[0]
    c = K // 2
    out = np.zeros((H, W), dtype=np.complex128)
    for dy in range(K):
        for dx in range(K):
            tap = kernel[dy, dx]
            if tap != 0:
                out += tap * np.roll(np.roll(image, dy - c, axis=0), dx - c, axis=1)
    return out


def oracle_intensity(mask: np.ndarray, kernels: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of squared coherent images by direct convolution."""
    total = np.zeros(mask.shape)
    for h, w in zip(kernels, weights):
        total += w * np.abs(oracle_convolve(mask.astype(np.complex128), h)) ** 2
    return total


def oracle_fd_gradient(loss_fn, M: np.ndarray, pixels, epsilon: float = 1e-4) -> np.ndarray:
    """Central differences ``(L(M + e) - L(M - e)) / 2e`` at each ``(y, x)`` in ``pixels``."""
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    M = np.array(M, dtype=np.float64)
    out = np.zeros(len(pixels))
    for k, (y, x) in enumerate(pixels):
        orig = M[y, x]
        M[y, x] = orig + epsilon
        up = loss_fn(M)
        M[y, x] = orig - epsilon
        down = loss_fn(M)
        M[y, x] = orig
        out[k] = (up - down) / (2 * epsilon)
    return out


def _inside_oracle(px: float, py: float, edges) -> bool:
    crossings = 0
    for (xa, ya), (xb, yb) in edges:
        if xa == xb and min(ya, yb) <= py < max(ya, yb) and px < xa:
            crossings += 1
    return crossings % 2 == 1


def oracle_check_pairs(segset, radius: float) -> set[tuple[int, int, str]]:
    """Brute-force facing-pair enumeration: ``{(a, b, kind)}`` with ``a < b``."""
    edges = []
    for k in range(len(segset.rings)):
        pts = []
        for i in segset.rings[k]:
            for p in segset.coords[i]:
                q = (float(p[0]), float(p[1]))
                if not pts or pts[-1] != q:
                    pts.append(q)
        if pts and pts[0] == pts[-1]:
            pts.pop()
        edges += [(pts[j], pts[(j + 1) % len(pts)]) for j in range(len(pts))]
    out = set()
    n = len(segset.coords)
    for a in range(n):
        (ax0, ay0), (ax1, ay1) = segset.coords[a]
        va = segset.velocities[a]
        for b in range(a + 1, n):
            (bx0, by0), (bx1, by1) = segset.coords[b]
            vb = segset.velocities[b]
            if va[0] != -vb[0] or va[1] != -vb[1]:
                continue
            if ay0 == ay1:  # horizontal
                lo, hi = max(min(ax0, ax1), min(bx0, bx1)), min(max(ax0, ax1), max(bx0, bx1))
                d = (by0 - ay0) * va[1]
                probe = ((lo + hi) / 2, (ay0 + by0) / 2)
            else:
                lo, hi = max(min(ay0, ay1), min(by0, by1)), min(max(ay0, ay1), max(by0, by1))
                d = (bx0 - ax0) * va[0]
                probe = ((ax0 + bx0) / 2, (lo + hi) / 2)
            if hi <= lo or d == 0 or abs(d) > radius:
                continue
            inside = _inside_oracle(probe[0], probe[1], edges)
            if d > 0 and not inside:
                out.add((a, b, "spacing"))
            elif d < 0 and inside:
                out.add((a, b, "width"))
    return out

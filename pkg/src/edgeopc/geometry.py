"""Manhattan layouts and their learnable edge-segment representation.

Coordinates are nanometers on a 1 nm grid, y pointing up. A polygon is a
closed ring of vertices; counter-clockwise rings are filled, clockwise rings
are holes. Every segment carries a direction (along the edge, in ring order)
and a velocity, the outward normal ``(dy, -dx)`` of that direction, which for
both winding senses points away from the filled material.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import GeometryError


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __iter__(self):
        yield self.x
        yield self.y


@dataclass
class Polygon:
    """Closed Manhattan ring. The closing edge is implicit."""

    vertices: list[Point]

    def __post_init__(self):
        verts = [v if isinstance(v, Point) else Point(float(v[0]), float(v[1])) for v in self.vertices]
        if len(verts) > 1 and verts[0] == verts[-1]:
            verts = verts[:-1]
        self.vertices = verts

    @classmethod
    def from_coords(cls, coords: Iterable[Sequence[float]]) -> "Polygon":
        return cls([Point(float(x), float(y)) for x, y in coords])

    @classmethod
    def rect(cls, x0: float, y0: float, x1: float, y1: float) -> "Polygon":
        """Counter-clockwise rectangle with corners (x0, y0) and (x1, y1)."""
        return cls.from_coords([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])

    def as_array(self) -> np.ndarray:
        return np.array([[v.x, v.y] for v in self.vertices], dtype=np.float64)

    def edges(self) -> list[tuple[Point, Point]]:
        n = len(self.vertices)
        return [(self.vertices[i], self.vertices[(i + 1) % n]) for i in range(n)]

    def signed_area(self) -> float:
        a = self.as_array()
        x, y = a[:, 0], a[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    @property
    def is_ccw(self) -> bool:
        return self.signed_area() > 0

    def reversed(self) -> "Polygon":
        return Polygon(list(reversed(self.vertices)))

    def translated(self, dx: float, dy: float) -> "Polygon":
        return Polygon([Point(v.x + dx, v.y + dy) for v in self.vertices])

    def bbox(self) -> tuple[float, float, float, float]:
        a = self.as_array()
        return float(a[:, 0].min()), float(a[:, 1].min()), float(a[:, 0].max()), float(a[:, 1].max())


def validate_polygon(poly: Polygon) -> None:
    """Raise GeometryError unless ``poly`` is a simple Manhattan ring."""
    verts = poly.vertices
    n = len(verts)
    if n < 4:
        raise GeometryError(f"polygon needs at least 4 vertices, got {n}")
    if not all(math.isfinite(v.x) and math.isfinite(v.y) for v in verts):
        raise GeometryError("polygon has non-finite coordinates")
    horiz = []
    for a, b in poly.edges():
        if a == b:
            raise GeometryError(f"degenerate zero-length edge at ({a.x}, {a.y})")
        if a.x != b.x and a.y != b.y:
            raise GeometryError(f"non-Manhattan edge ({a.x}, {a.y}) -> ({b.x}, {b.y})")
        horiz.append(a.y == b.y)
    for i in range(n):
        if horiz[i] == horiz[(i + 1) % n]:
            raise GeometryError("consecutive edges must alternate horizontal and vertical")
    if not _is_simple(poly):
        raise GeometryError("polygon ring self-intersects")


def _is_simple(poly: Polygon) -> bool:
    edges = poly.edges()
    n = len(edges)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _axis_segments_touch(edges[i], edges[j]):
                return False
    return True


def _axis_segments_touch(e1, e2) -> bool:
    (a, b), (c, d) = e1, e2
    ax0, ax1 = sorted((a.x, b.x))
    ay0, ay1 = sorted((a.y, b.y))
    cx0, cx1 = sorted((c.x, d.x))
    cy0, cy1 = sorted((c.y, d.y))
    return ax0 <= cx1 and cx0 <= ax1 and ay0 <= cy1 and cy0 <= ay1


def orient_rings(polygons: Sequence[Polygon]) -> list[Polygon]:
    """Rewind rings by nesting depth: even depth CCW (filled), odd depth CW (hole)."""
    out = []
    for i, p in enumerate(polygons):
        probe = p.vertices[0]
        depth = sum(
            1 for j, q in enumerate(polygons) if j != i and _point_in_ring(probe.x, probe.y, q.as_array())
        )
        want_ccw = depth % 2 == 0
        out.append(p if p.is_ccw == want_ccw else p.reversed())
    return out


def _point_in_ring(px: float, py: float, ring: np.ndarray) -> bool:
    inside = False
    n = len(ring)
    for k in range(n):
        x0, y0 = ring[k]
        x1, y1 = ring[(k + 1) % n]
        if (y0 > py) != (y1 > py):
            xc = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            if px < xc:
                inside = not inside
    return inside


@dataclass
class Segment:
    """A single edge segment, as seen through ``SegmentSet.segment(i)``."""

    start: Point
    end: Point
    direction: tuple[float, float]
    velocity: tuple[float, float]
    is_corner: bool
    polygon_id: int
    order_in_ring: int


@dataclass
class SegmentSet:
    """Learnable segment coordinates plus the fixed per-segment metadata.

    ``coords[i] = [[x1, y1], [x2, y2]]``. ``rings[k]`` lists the segment
    indices of polygon ``k`` in ring order; ``edge_ids[i]`` is the index of
    the original polygon edge segment ``i`` was cut from.
    """

    coords: np.ndarray
    directions: np.ndarray
    velocities: np.ndarray
    corner_start: np.ndarray
    corner_end: np.ndarray
    polygon_ids: np.ndarray
    edge_ids: np.ndarray
    rings: list[np.ndarray]
    ring_tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ring_tags:
            self.ring_tags = ["main"] * len(self.rings)

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    @property
    def corner_flags(self) -> np.ndarray:
        return self.corner_start | self.corner_end

    @property
    def is_horizontal(self) -> np.ndarray:
        return self.directions[:, 1] == 0

    def replace(self, coords: np.ndarray) -> "SegmentSet":
        """Same structure, new coordinates."""
        return SegmentSet(
            coords=np.asarray(coords, dtype=np.float64),
            directions=self.directions,
            velocities=self.velocities,
            corner_start=self.corner_start,
            corner_end=self.corner_end,
            polygon_ids=self.polygon_ids,
            edge_ids=self.edge_ids,
            rings=self.rings,
            ring_tags=self.ring_tags,
        )

    def segment(self, i: int) -> Segment:
        (x1, y1), (x2, y2) = self.coords[i]
        ring = self.rings[self.polygon_ids[i]]
        order = int(np.nonzero(ring == i)[0][0])
        return Segment(
            start=Point(float(x1), float(y1)),
            end=Point(float(x2), float(y2)),
            direction=(float(self.directions[i, 0]), float(self.directions[i, 1])),
            velocity=(float(self.velocities[i, 0]), float(self.velocities[i, 1])),
            is_corner=bool(self.corner_flags[i]),
            polygon_id=int(self.polygon_ids[i]),
            order_in_ring=order,
        )

    def offsets(self) -> np.ndarray:
        """Signed perpendicular position of every segment along its velocity axis."""
        return np.einsum("ij,ij->i", self.coords[:, 0, :], self.velocities)

    def ring_vertices(self, k: int) -> np.ndarray:
        """Closed boundary of ring ``k``: segment endpoints in ring order.

        Consecutive duplicates are removed. Neighbouring segments of one edge
        that moved by different amounts are joined by the implicit jog between
        ``end`` of one and ``start`` of the next.
        """
        pts = self.coords[self.rings[k]].reshape(-1, 2)
        keep = np.ones(len(pts), dtype=bool)
        keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
        pts = pts[keep]
        if len(pts) > 1 and np.all(pts[0] == pts[-1]):
            pts = pts[:-1]
        return pts

    def ring_edges(self) -> np.ndarray:
        """All boundary edges, shape [E, 2, 2], including implicit jogs."""
        out = []
        for k in range(len(self.rings)):
            v = self.ring_vertices(k)
            if len(v) < 2:
                continue
            out.append(np.stack([v, np.roll(v, -1, axis=0)], axis=1))
        if not out:
            return np.zeros((0, 2, 2))
        return np.concatenate(out, axis=0)

    def subset_rings(self, keep: Sequence[int]) -> "SegmentSet":
        """Drop every ring not listed in ``keep``; segment indices are renumbered."""
        keep = list(keep)
        old = np.concatenate([self.rings[k] for k in keep]) if keep else np.zeros(0, dtype=np.int64)
        remap = {int(o): n for n, o in enumerate(old)}
        rings = [np.array([remap[int(i)] for i in self.rings[k]], dtype=np.int64) for k in keep]
        poly_ids = np.zeros(len(old), dtype=np.int64)
        for n, ring in enumerate(rings):
            poly_ids[ring] = n
        return SegmentSet(
            coords=self.coords[old].copy(),
            directions=self.directions[old],
            velocities=self.velocities[old],
            corner_start=self.corner_start[old],
            corner_end=self.corner_end[old],
            polygon_ids=poly_ids,
            edge_ids=self.edge_ids[old],
            rings=rings,
            ring_tags=[self.ring_tags[k] for k in keep],
        )


def concat_segsets(a: SegmentSet, b: SegmentSet) -> SegmentSet:
    n = len(a)
    return SegmentSet(
        coords=np.concatenate([a.coords, b.coords]),
        directions=np.concatenate([a.directions, b.directions]),
        velocities=np.concatenate([a.velocities, b.velocities]),
        corner_start=np.concatenate([a.corner_start, b.corner_start]),
        corner_end=np.concatenate([a.corner_end, b.corner_end]),
        polygon_ids=np.concatenate([a.polygon_ids, b.polygon_ids + len(a.rings)]),
        edge_ids=np.concatenate([a.edge_ids, b.edge_ids]),
        rings=list(a.rings) + [r + n for r in b.rings],
        ring_tags=list(a.ring_tags) + list(b.ring_tags),
    )


def empty_segset() -> SegmentSet:
    return SegmentSet(
        coords=np.zeros((0, 2, 2)),
        directions=np.zeros((0, 2)),
        velocities=np.zeros((0, 2)),
        corner_start=np.zeros(0, dtype=bool),
        corner_end=np.zeros(0, dtype=bool),
        polygon_ids=np.zeros(0, dtype=np.int64),
        edge_ids=np.zeros(0, dtype=np.int64),
        rings=[],
    )


def split_edge(length: float, seg_length: float, min_length: float = 0.0) -> list[float]:
    """Breakpoints (distances from the edge start) partitioning one edge.

    Edges up to ``2 * seg_length`` are cut once at their midpoint. Longer
    edges get ``seg_length`` pieces laid out symmetrically about the midpoint;
    each end remainder (between half and one and a half ``seg_length``) is
    kept whole or, if longer than ``seg_length``, cut at its own midpoint.
    Pieces shorter than ``min_length`` are then folded into their shorter
    neighbour, ties going to the preceding piece.
    """
    if length <= 0:
        raise GeometryError("degenerate zero-length edge")
    if seg_length <= 0:
        raise GeometryError("seg_length must be positive")
    mid = length / 2.0
    if length <= 2 * seg_length:
        cuts = [0.0, mid, length]
    else:
        steps = int(math.floor(length / (2 * seg_length)))
        inner = mid - (steps - 0.5) * seg_length
        cuts = [0.0]
        if inner > seg_length:
            cuts.append(inner / 2.0)
        cuts.extend(mid + (i - 0.5) * seg_length for i in range(-(steps - 1), steps + 1))
        if inner > seg_length:
            cuts.append(length - inner / 2.0)
        cuts.append(length)
    return _merge_short(cuts, min_length)


def _merge_short(cuts: list[float], min_length: float) -> list[float]:
    cuts = list(cuts)
    while len(cuts) > 2:
        lens = [b - a for a, b in zip(cuts[:-1], cuts[1:])]
        short = [i for i, L in enumerate(lens) if L < min_length]
        if not short:
            break
        i = min(short, key=lambda k: (lens[k], k))
        if i == 0:
            del cuts[1]
        elif i == len(lens) - 1:
            del cuts[-2]
        elif lens[i - 1] <= lens[i + 1]:
            del cuts[i]
        else:
            del cuts[i + 1]
    return cuts


def segment_edges(polygons: Sequence[Polygon], seg_length: float, min_length: float = 0.0,
                  tags: Sequence[str] | None = None) -> SegmentSet:
    """Cut every polygon edge into learnable segments.

    The first and last segment of each original edge are flagged as corner
    segments. Directions follow ring order; velocities are outward normals.
    """
    if seg_length <= 0:
        raise GeometryError("seg_length must be positive")
    coords, dirs, cstart, cend, pids, eids, rings = [], [], [], [], [], [], []
    edge_base = 0
    for pid, poly in enumerate(polygons):
        validate_polygon(poly)
        ring = []
        for e, (a, b) in enumerate(poly.edges()):
            dx, dy = b.x - a.x, b.y - a.y
            length = abs(dx) + abs(dy)
            d = (math.copysign(1.0, dx) if dx else 0.0, math.copysign(1.0, dy) if dy else 0.0)
            cuts = split_edge(length, seg_length, min_length)
            nseg = len(cuts) - 1
            for k in range(nseg):
                t0, t1 = cuts[k], cuts[k + 1]
                ring.append(len(coords))
                coords.append([[a.x + d[0] * t0, a.y + d[1] * t0], [a.x + d[0] * t1, a.y + d[1] * t1]])
                dirs.append(d)
                cstart.append(k == 0)
                cend.append(k == nseg - 1)
                pids.append(pid)
                eids.append(edge_base + e)
        edge_base += len(poly.vertices)
        rings.append(np.array(ring, dtype=np.int64))
    if not coords:
        return empty_segset()
    directions = np.array(dirs, dtype=np.float64)
    segset = SegmentSet(
        coords=np.array(coords, dtype=np.float64),
        directions=directions,
        velocities=np.zeros_like(directions),
        corner_start=np.array(cstart, dtype=bool),
        corner_end=np.array(cend, dtype=bool),
        polygon_ids=np.array(pids, dtype=np.int64),
        edge_ids=np.array(eids, dtype=np.int64),
        rings=rings,
        ring_tags=list(tags) if tags is not None else [],
    )
    return assign_velocities(segset, polygons)


def assign_velocities(segset: SegmentSet, polygons: Sequence[Polygon]) -> SegmentSet:
    """Set every velocity to the outward unit normal of its segment."""
    for poly in polygons:
        if not _is_simple(poly):
            raise GeometryError("cannot decide the interior of a self-intersecting ring")
    d = segset.directions
    v = np.stack([d[:, 1], -d[:, 0]], axis=1) + 0.0
    out = segset.replace(segset.coords)
    out.velocities = v
    return out


def ste_round(x: np.ndarray | SegmentSet):
    """Round half away from zero (forward half of the straight-through estimator)."""
    if isinstance(x, SegmentSet):
        return x.replace(ste_round(x.coords))
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5) + 0.0


def ste_round_backward(grad: np.ndarray) -> np.ndarray:
    """Backward half of the straight-through estimator: identity."""
    return grad


def corner_pairs(segset: SegmentSet) -> list[tuple[int, int]]:
    """(last segment of edge k, first segment of edge k+1) for every ring corner."""
    pairs = []
    for ring in segset.rings:
        n = len(ring)
        for k in range(n):
            a, b = int(ring[k]), int(ring[(k + 1) % n])
            if segset.edge_ids[a] != segset.edge_ids[b]:
                pairs.append((a, b))
    return pairs


def merge_corners(rounded: SegmentSet) -> SegmentSet:
    """Reconnect the two segments meeting at each original polygon corner.

    The shared corner becomes (x of the vertical segment, y of the horizontal
    one); it replaces the end of the first segment and the start of the
    second in ring order.
    """
    out = rounded.coords.copy()
    horiz = rounded.is_horizontal
    for a, b in corner_pairs(rounded):
        if horiz[a] == horiz[b]:
            raise GeometryError(f"corner segments {a} and {b} are parallel and cannot intersect")
        v, h = (a, b) if not horiz[a] else (b, a)
        p = (out[v, 0, 0], out[h, 0, 1])
        out[a, 1] = p
        out[b, 0] = p
    return rounded.replace(out)


def merge_corners_backward(grad: np.ndarray) -> np.ndarray:
    """Gradients pass straight through corner merging."""
    return grad


def ring_is_closed(vertices: np.ndarray) -> bool:
    """True when a vertex loop is rectilinear and every vertex has degree 2."""
    if len(vertices) < 4:
        return False
    nxt = np.roll(vertices, -1, axis=0)
    step = nxt - vertices
    if np.any((step[:, 0] != 0) & (step[:, 1] != 0)):
        return False
    keys = [tuple(v) for v in vertices]
    return len(set(keys)) == len(keys)


def segset_to_polygons(merged: SegmentSet) -> list[Polygon]:
    """Export merged rings as polygons, dropping collinear vertices."""
    polys = []
    for k in range(len(merged.rings)):
        v = merged.ring_vertices(k)
        if len(v) < 4:
            continue
        prev = np.roll(v, 1, axis=0)
        nxt = np.roll(v, -1, axis=0)
        cross = (v[:, 0] - prev[:, 0]) * (nxt[:, 1] - v[:, 1]) - (v[:, 1] - prev[:, 1]) * (nxt[:, 0] - v[:, 0])
        v = v[cross != 0]
        if len(v) >= 4:
            polys.append(Polygon.from_coords(v.tolist()))
    return polys

"""Mask rule handling: check-pair extraction, velocity gating, and an independent checker.

Two deliberately separate code paths live here. ``extract_check_pairs`` and
``gate_gradients`` work on segments and feed the optimizer.
``check_violations`` re-derives the mask outline from scratch (maximal
edges, winding-number inside test) and is the acceptance oracle.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError
from .geometry import SegmentSet


@dataclass(frozen=True)
class MrcRuleSet:
    min_width: float = 40.0
    min_spacing: float = 40.0
    eol_spacing: float = 45.0
    notch_spacing: float = 45.0
    jog_spacing: float = 45.0
    beta: float = 50.0
    # edges shorter than this count as line ends (both corners convex) or jogs (mixed)
    eol_width: float = 50.0
    # assist features are sub-resolution by design and get their own width floor
    sraf_min_width: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ConfigError(f"rule constant {k} must be positive, got {v}")

    @property
    def largest(self) -> float:
        return max(self.min_width, self.min_spacing, self.eol_spacing, self.notch_spacing, self.jog_spacing)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MrcRuleSet":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown rule names: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "MrcRuleSet":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read rule file {path}: {exc}") from exc


@dataclass(frozen=True)
class CheckPair:
    """Two facing segments, or a segment facing a fixed line (``seg_b == -1``).

    Fixed partners are jogs between neighbouring segments of one edge and
    the far ends of corner segments; ``fixed`` holds their position on
    ``axis``. A ``corner_jog`` entry has ``members = (corner segment, its
    collinear neighbour)``: while the corner segment is shorter than the
    rule, the two may not step apart so that it sticks out.
    """

    seg_a: int
    seg_b: int
    kind: str  # "spacing" or "width"
    axis: str  # "x" or "y": the axis the gap is measured along
    rule: str
    required: float
    fixed: float | None = None
    members: tuple[int, int] | None = None


def _edge_kinds(segset: SegmentSet, rules: MrcRuleSet) -> tuple[np.ndarray, np.ndarray]:
    """Per segment: kind of the current maximal outline edge it lies on, and that edge's length."""
    n = len(segset)
    kinds = np.array(["edge"] * n, dtype=object)
    lengths = np.zeros(n)
    for k, ring in enumerate(segset.rings):
        v = segset.ring_vertices(k)
        m = len(v)
        if m < 4:
            continue
        prev, nxt = np.roll(v, 1, axis=0), np.roll(v, -1, axis=0)
        d_in, d_out = v - prev, nxt - v
        turn = d_in[:, 0] * d_out[:, 1] - d_in[:, 1] * d_out[:, 0]
        corners = np.nonzero(turn != 0)[0]
        if len(corners) < 2:
            continue
        for ci in range(len(corners)):
            a, b = corners[ci], corners[(ci + 1) % len(corners)]
            pa, pb = v[a], v[b]
            length = float(np.abs(pb - pa).sum())
            convex_a, convex_b = turn[a] > 0, turn[b] > 0
            if length < rules.eol_width and convex_a and convex_b:
                kind = "eol"
            elif length < rules.eol_width and convex_a != convex_b:
                kind = "jog"
            else:
                kind = "edge"
            horiz = pa[1] == pb[1]
            lo, hi = sorted((pa[0], pb[0])) if horiz else sorted((pa[1], pb[1]))
            for i in ring:
                c = segset.coords[i]
                if segset.is_horizontal[i] != horiz:
                    continue
                if horiz and c[0, 1] == pa[1] and lo <= min(c[:, 0]) and max(c[:, 0]) <= hi:
                    kinds[i], lengths[i] = kind, length
                elif not horiz and c[0, 0] == pa[0] and lo <= min(c[:, 1]) and max(c[:, 1]) <= hi:
                    kinds[i], lengths[i] = kind, length
    return kinds, lengths


def _even_odd(px: np.ndarray, py: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Even-odd inside test of many points against boundary edges (ray towards +x)."""
    inside = np.zeros(len(px), dtype=bool)
    vert = edges[edges[:, 0, 0] == edges[:, 1, 0]]
    for (x, y0), (_, y1) in vert:
        lo, hi = min(y0, y1), max(y0, y1)
        inside ^= (py >= lo) & (py < hi) & (px < x)
    return inside


def _jogs(segset: SegmentSet) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Connector edges between consecutive segments of a ring: (start, end, ring)."""
    out = []
    for k, ring in enumerate(segset.rings):
        n = len(ring)
        for t in range(n):
            i, j = ring[t], ring[(t + 1) % n]
            a, b = segset.coords[i, 1], segset.coords[j, 0]
            if np.any(a != b):
                out.append((a, b, k))
    return out


def _corner_length_pairs(segset: SegmentSet, rules: MrcRuleSet) -> list[CheckPair]:
    """Width constraints on the length of corner segments.

    A corner segment's length is set by the position of the perpendicular
    segment it meets. When its far end is a jog the corner segment is the
    side of a step whose width is that length (``corner_length``). When it
    is still collinear with its neighbour, a jog would appear if the two
    stepped apart (``corner_jog``).
    """
    out = []
    c = segset.coords
    horiz = segset.is_horizontal
    eid = segset.edge_ids
    for ring, tag in zip(segset.rings, segset.ring_tags):
        req = rules.sraf_min_width if tag == "sraf" else rules.min_width
        n = len(ring)
        for t in range(n):
            a, b = int(ring[t]), int(ring[(t + 1) % n])
            if eid[a] == eid[b]:
                continue
            prev, nxt = int(ring[t - 1]), int(ring[(t + 2) % n])
            # a ends at the corner, b starts there; each one's position sets the other's length
            if eid[prev] == eid[a] and prev != a:
                far = float(c[a, 0, 0 if horiz[a] else 1])
                axis = "x" if horiz[a] else "y"
                if np.any(c[prev, 1] != c[a, 0]):
                    out.append(CheckPair(b, -1, "width", axis, "corner_length", req, far))
                else:
                    out.append(CheckPair(b, -1, "width", axis, "corner_jog", req, far, (a, prev)))
            if eid[nxt] == eid[b] and nxt != b:
                far = float(c[b, 1, 0 if horiz[b] else 1])
                axis = "x" if horiz[b] else "y"
                if np.any(c[b, 1] != c[nxt, 0]):
                    out.append(CheckPair(a, -1, "width", axis, "corner_length", req, far))
                else:
                    out.append(CheckPair(a, -1, "width", axis, "corner_jog", req, far, (b, nxt)))
    return out


def extract_check_pairs(segset: SegmentSet, rules: MrcRuleSet, search_radius: float | None = None,
                        fixed_partners: bool = True) -> list[CheckPair]:
    """Facing parallel segment pairs within ``search_radius`` (default twice the largest rule).

    Exterior between the pair makes it a spacing pair, interior a width pair;
    the region type is confirmed at the middle of the overlap. Pairs with no
    overlap along the segments are dropped. With ``fixed_partners`` the
    jogs of the current outline also take part (paired with segments only),
    and corner segments get a minimum-length constraint.
    """
    n = len(segset)
    if n == 0:
        return []
    radius = 2 * rules.largest if search_radius is None else search_radius
    c = segset.coords
    horiz = segset.is_horizontal
    perp = np.where(horiz, c[:, 0, 1], c[:, 0, 0])
    along = np.where(horiz[:, None], c[:, :, 0], c[:, :, 1])
    sign = np.where(horiz, segset.velocities[:, 1], segset.velocities[:, 0])
    ring_of = segset.polygon_ids.copy()
    kinds, _ = _edge_kinds(segset, rules)
    kinds = list(kinds)
    if fixed_partners:
        for a, b, k in _jogs(segset):
            d = b - a
            jh = d[1] == 0
            horiz = np.append(horiz, jh)
            perp = np.append(perp, a[1] if jh else a[0])
            along = np.vstack([along, [[a[0], b[0]]] if jh else [[a[1], b[1]]]])
            # outward normal (dy, -dx) of the traversal direction
            sign = np.append(sign, -np.sign(d[0]) if jh else np.sign(d[1]))
            ring_of = np.append(ring_of, k)
            kinds.append("jog")
    lo, hi = along.min(axis=1), along.max(axis=1)
    edges = segset.ring_edges()
    m = len(perp)

    ia, ib = np.triu_indices(m, k=1)
    same = horiz[ia] == horiz[ib]
    opposed = sign[ia] == -sign[ib]
    overlap = np.minimum(hi[ia], hi[ib]) - np.maximum(lo[ia], lo[ib])
    sep = (perp[ib] - perp[ia]) * sign[ia]
    sel = same & opposed & (overlap > 0) & (np.abs(sep) <= radius) & (sep != 0) & (ia < n)
    ia, ib, sep = ia[sel], ib[sel], sep[sel]
    pairs = []
    if len(ia):
        mid_along = (np.maximum(lo[ia], lo[ib]) + np.minimum(hi[ia], hi[ib])) / 2
        mid_perp = (perp[ia] + perp[ib]) / 2
        h = horiz[ia]
        inside = _even_odd(np.where(h, mid_along, mid_perp), np.where(h, mid_perp, mid_along), edges)
        for a, b, s, ins in zip(ia, ib, sep, inside):
            a, b = int(a), int(b)
            axis = "y" if horiz[a] else "x"
            seg_b, fixed = (b, None) if b < n else (-1, float(perp[b]))
            if s > 0 and not ins:
                rule, req = "min_spacing", rules.min_spacing
                if ring_of[a] == ring_of[b]:
                    rule, req = "notch_spacing", max(req, rules.notch_spacing)
                for k in (kinds[a], kinds[b]):
                    if k == "eol" and rules.eol_spacing > req:
                        rule, req = "eol_spacing", rules.eol_spacing
                    elif k == "jog" and rules.jog_spacing > req:
                        rule, req = "jog_spacing", rules.jog_spacing
                pairs.append(CheckPair(a, seg_b, "spacing", axis, rule, req, fixed))
            elif s < 0 and ins:
                if segset.ring_tags[segset.polygon_ids[a]] == "sraf":
                    pairs.append(CheckPair(a, seg_b, "width", axis, "sraf_min_width", rules.sraf_min_width, fixed))
                else:
                    pairs.append(CheckPair(a, seg_b, "width", axis, "min_width", rules.min_width, fixed))
    if fixed_partners:
        pairs += _corner_length_pairs(segset, rules)
    return pairs


def gate_factor(proj: float | np.ndarray, d_const: float, beta: float):
    """``sigmoid(beta * (proj - D))``: 0.5 at the rule value, ~1 once clear of it."""
    return expit(beta * (np.asarray(proj, dtype=np.float64) - d_const))


def velocity_gate(v, delta, d_const: float, beta: float, axis: str | None = None) -> np.ndarray:
    """Scale velocity ``v`` by the gate evaluated on the projection of ``delta``.

    ``axis`` selects the projection; by default it is the axis of ``v``.
    """
    if d_const <= 0 or beta <= 0:
        raise ConfigError("rule constant and beta must be positive")
    v = np.asarray(v, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if axis is None:
        axis = "x" if v[0] != 0 else "y"
    proj = abs(delta[0] if axis == "x" else delta[1])
    return v * float(gate_factor(proj, d_const, beta))


def gate_gradients(scalar_grad: np.ndarray, segset: SegmentSet, pairs: list[CheckPair],
                   rules: MrcRuleSet, lr: float, clip: float | None, margin: float = 1.0):
    """Apply the rule gate to per-segment gradients along the velocities.

    A segment is gated only by pairs whose gap its own proposed motion would
    shrink (outward for spacing, inward for width), and a short corner
    segment only against sticking out past its collinear neighbour. The gate is evaluated on
    the look-ahead gap, i.e. the current gap after every member's proposed
    move, against the rule value plus a rounding allowance of ``margin`` for
    two moving sides or none for a fixed partner. Several pairs compose by
    the minimum. Returns the gated gradients and the number of segments
    gated below 0.5.
    """
    g = np.asarray(scalar_grad, dtype=np.float64)
    tau = np.ones(len(g))
    if not pairs:
        return g.copy(), 0
    move = -lr * g
    if clip is not None:
        move = np.clip(move, -clip, clip)
    c = segset.coords
    horiz = segset.is_horizontal
    perp = np.where(horiz, c[:, 0, 1], c[:, 0, 0])
    sign = np.where(horiz, segset.velocities[:, 1], segset.velocities[:, 0])
    shift = move * sign  # signed motion of each segment along its axis
    for p in pairs:
        a, b = p.seg_a, p.seg_b
        if p.members is not None:
            side = np.sign(p.fixed - perp[a])
            if side == 0:
                continue
            length = (p.fixed - perp[a]) * side - shift[a] * side
            t = float(gate_factor(length, p.required, rules.beta))
            k, nb = p.members
            # k sticks out of its edge when it moves outward more than its neighbour
            if move[k] > move[nb]:
                if move[k] > 0:
                    tau[k] = min(tau[k], t)
                if move[nb] < 0:
                    tau[nb] = min(tau[nb], t)
            continue
        if b < 0:
            side = np.sign(p.fixed - perp[a])
            if side == 0:
                continue
            da, db = -shift[a] * side, 0.0
            gap = (p.fixed - perp[a]) * side
            allowance = 0.0
        else:
            side = np.sign(perp[b] - perp[a])
            da, db = -shift[a] * side, shift[b] * side
            gap = (perp[b] - perp[a]) * side
            allowance = margin
        t = float(gate_factor(gap + da + db, p.required + allowance, rules.beta))
        if da < 0:
            tau[a] = min(tau[a], t)
        if db < 0:
            tau[b] = min(tau[b], t)
    return g * tau, int(np.count_nonzero(tau < 0.5))


# ---------------------------------------------------------------------------
# independent checker


@dataclass
class Violation:
    kind: str
    rule: str
    segments: list
    measured: float
    required: float

    def to_dict(self) -> dict:
        return asdict(self)


def _outline(segset: SegmentSet) -> tuple[list[list[tuple[int, int]]], list[str]]:
    """Rings as lists of integer corner points, collinear and repeated points dropped, plus ring tags."""
    rings, tags = [], []
    for ring, tag in zip(segset.rings, segset.ring_tags):
        pts = []
        for i in ring:
            for p in segset.coords[i]:
                q = (int(round(p[0])), int(round(p[1])))
                if not pts or pts[-1] != q:
                    pts.append(q)
        if len(pts) > 1 and pts[0] == pts[-1]:
            pts.pop()
        changed = True
        while changed and len(pts) >= 3:
            changed = False
            for k in range(len(pts)):
                a, b, c = pts[k - 1], pts[k], pts[(k + 1) % len(pts)]
                if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) == 0:
                    del pts[k]
                    changed = True
                    break
        if len(pts) >= 4:
            rings.append(pts)
            tags.append(tag)
    return rings, tags


def _winding(px: float, py: float, rings) -> int:
    total = 0
    for pts in rings:
        for k in range(len(pts)):
            (x0, y0), (x1, y1) = pts[k], pts[(k + 1) % len(pts)]
            if x0 != x1:
                continue
            if y0 <= py < y1 and px < x0:
                total += 1
            elif y1 <= py < y0 and px < x0:
                total -= 1
    return total


def check_violations(mask_geometry: SegmentSet, rules: MrcRuleSet) -> list[Violation]:
    """Brute-force width and spacing check of the outline described by ``mask_geometry``.

    Every pair of parallel, opposite-facing outline edges that overlap is
    measured (projection metric). Spacing applies across exterior, width
    across interior (assist-feature rings use ``sraf_min_width``); notch
    spacing within one ring, line-end and jog
    spacing when either edge is short with two convex, or one convex and
    one concave, corners.
    """
    rings, tags = _outline(mask_geometry)
    edges = []
    for r, pts in enumerate(rings):
        m = len(pts)
        for k in range(m):
            a, b = pts[k], pts[(k + 1) % m]
            before, after = pts[k - 1], pts[(k + 2) % m]
            turn_a = (a[0] - before[0]) * (b[1] - a[1]) - (a[1] - before[1]) * (b[0] - a[0])
            turn_b = (b[0] - a[0]) * (after[1] - b[1]) - (b[1] - a[1]) * (after[0] - b[0])
            length = abs(b[0] - a[0]) + abs(b[1] - a[1])
            short = length < rules.eol_width
            if short and turn_a > 0 and turn_b > 0:
                kind = "eol"
            elif short and (turn_a > 0) != (turn_b > 0):
                kind = "jog"
            else:
                kind = "edge"
            normal = (b[1] - a[1], a[0] - b[0])
            normal = (int(np.sign(normal[0])), int(np.sign(normal[1])))
            edges.append((r, a, b, normal, kind))
    found = []
    for i in range(len(edges)):
        ri, ai, bi, ni, ki = edges[i]
        for j in range(i + 1, len(edges)):
            rj, aj, bj, nj, kj = edges[j]
            if ni != (-nj[0], -nj[1]):
                continue
            if ni[0] == 0:  # horizontal edges, gap along y
                ov_lo, ov_hi = max(min(ai[0], bi[0]), min(aj[0], bj[0])), min(max(ai[0], bi[0]), max(aj[0], bj[0]))
                dist = (aj[1] - ai[1]) * ni[1]
                probe = ((ov_lo + ov_hi) / 2, (ai[1] + aj[1]) / 2)
            else:
                ov_lo, ov_hi = max(min(ai[1], bi[1]), min(aj[1], bj[1])), min(max(ai[1], bi[1]), max(aj[1], bj[1]))
                dist = (aj[0] - ai[0]) * ni[0]
                probe = ((ai[0] + aj[0]) / 2, (ov_lo + ov_hi) / 2)
            if ov_hi <= ov_lo or dist == 0:
                continue
            filled = _winding(probe[0], probe[1], rings) != 0
            seg = [[list(ai), list(bi)], [list(aj), list(bj)]]
            if dist > 0 and not filled:
                rule, req = "min_spacing", rules.min_spacing
                if ri == rj and rules.notch_spacing > req:
                    rule, req = "notch_spacing", rules.notch_spacing
                for k in (ki, kj):
                    if k == "eol" and rules.eol_spacing > req:
                        rule, req = "eol_spacing", rules.eol_spacing
                    elif k == "jog" and rules.jog_spacing > req:
                        rule, req = "jog_spacing", rules.jog_spacing
                if dist < req:
                    found.append(Violation("spacing", rule, seg, float(dist), float(req)))
            elif dist < 0 and filled:
                rule, req = ("sraf_min_width", rules.sraf_min_width) if tags[ri] == "sraf" else ("min_width", rules.min_width)
                if -dist < req:
                    found.append(Violation("width", rule, seg, float(-dist), float(req)))
    return found

"""Collinear segment merging and short-segment removal."""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

from .geometry import Intrinsics, LineSegment2D
from .unionfind import UnionFind

MERGE_ANGLE_DEG = 1.0
MERGE_GAP_RATIO = 0.05
MIN_LENGTH_RATIO = 0.05


def _direction_angle(seg: LineSegment2D) -> float:
    """Undirected direction in [0, pi)."""
    return math.atan2(seg.q[1] - seg.p[1], seg.q[0] - seg.p[0]) % math.pi


def _angle_diff(a: float, b: float) -> float:
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def _min_endpoint_distance(a: LineSegment2D, b: LineSegment2D) -> float:
    return min(math.dist(u, v) for u in (a.p, a.q) for v in (b.p, b.q))


def mergeable(a: LineSegment2D, b: LineSegment2D, max_gap: float, max_angle_deg: float = MERGE_ANGLE_DEG) -> bool:
    return (_angle_diff(_direction_angle(a), _direction_angle(b)) < math.radians(max_angle_deg)
            and _min_endpoint_distance(a, b) < max_gap)


def _merge_group(group: list[LineSegment2D]) -> LineSegment2D:
    group = sorted(group, key=lambda s: (s.p, s.q))
    pts = np.array([pt for s in group for pt in (s.p, s.q)], dtype=float)
    scatter = np.zeros((2, 2))
    for s in group:
        d = np.subtract(s.q, s.p) / s.length
        scatter += s.length * np.outer(d, d)
    _, vecs = np.linalg.eigh(scatter)
    d = vecs[:, -1]
    c = pts.mean(axis=0)
    t = (pts - c) @ d
    a, b = c + t.min() * d, c + t.max() * d
    p, q = sorted([(float(a[0]), float(a[1])), (float(b[0]), float(b[1]))])
    return LineSegment2D(group[0].frame_id, p, q)


def _leftmost_key(s: LineSegment2D):
    return (min(s.p, s.q), max(s.p, s.q))


def merge_segments(segments, K: Intrinsics, *, max_angle_deg: float = MERGE_ANGLE_DEG,
                   gap_ratio: float = MERGE_GAP_RATIO, return_origin: bool = False):
    """Merge one frame's segments transitively until no mergeable pair remains.

    Two segments are mergeable when their directions differ by less than
    ``max_angle_deg`` and some pair of endpoints is closer than
    ``gap_ratio * min(w, h)``.  Output is sorted by leftmost endpoint.
    """
    segments = list(segments)
    if len({s.frame_id for s in segments}) > 1:
        raise ValueError("merge_segments expects segments from a single frame")
    max_gap = gap_ratio * K.min_side
    current = segments
    origin: list[tuple[int, ...]] = [(i,) for i in range(len(segments))]
    while True:
        n = len(current)
        uf = UnionFind(n)
        for i in range(n):
            for j in range(i + 1, n):
                if mergeable(current[i], current[j], max_gap, max_angle_deg):
                    uf.union(i, j)
        groups = uf.groups()
        if all(len(g) == 1 for g in groups):
            break
        merged, new_origin = [], []
        for g in groups:
            merged.append(current[g[0]] if len(g) == 1 else _merge_group([current[k] for k in g]))
            new_origin.append(tuple(sorted(i for k in g for i in origin[k])))
        current, origin = merged, new_origin
    order = sorted(range(len(current)), key=lambda k: _leftmost_key(current[k]))
    out = [current[k] for k in order]
    if return_origin:
        return out, [origin[k] for k in order]
    return out


def filter_short(segments, K: Intrinsics, ratio: float = MIN_LENGTH_RATIO) -> list[LineSegment2D]:
    threshold = ratio * K.min_side
    return [s for s in segments if s.length >= threshold]


def preprocess_segments(segments, K: Intrinsics, *, max_angle_deg: float = MERGE_ANGLE_DEG,
                        gap_ratio: float = MERGE_GAP_RATIO, min_length_ratio: float = MIN_LENGTH_RATIO):
    """Merge then filter every frame; returns (segments, origin indices into the input list)."""
    by_frame: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(segments):
        by_frame[int(s.frame_id)].append(i)
    threshold = min_length_ratio * K.min_side
    out, origin = [], []
    for fid in sorted(by_frame):
        idx = by_frame[fid]
        merged, org = merge_segments([segments[i] for i in idx], K, max_angle_deg=max_angle_deg,
                                     gap_ratio=gap_ratio, return_origin=True)
        for s, o in zip(merged, org):
            if s.length >= threshold:
                out.append(s)
                origin.append(tuple(idx[k] for k in o))
    return out, origin

"""Detection of coplanar Manhattan line pairs from per-frame normal maps."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .errors import EmptyQuadError, NoDataError
from .geometry import Intrinsics, LineSegment2D, ManhattanFrame, third_axis

JUNCTION = "junction"
ORTHOGONAL = "orthogonal"
PARALLEL = "parallel"
FLOOR = "floor"
KINDS = (JUNCTION, ORTHOGONAL, PARALLEL, FLOOR)

JUNCTION_RATIO = 0.1
NORMAL_ANGLE_DEG = 20.0
DEVIATION_DEG = 5.0
FLOOR_ANGLE_DEG = 25.0


@dataclass
class CoplanarityRelation:
    """Pairwise relation between two tracks observed in one frame, or the floor relation.

    For pairwise kinds ``observations`` holds the two (frame_id, segment)
    observations and ``tracks`` their two track ids.  For the floor it holds
    every floor observation and ``tracks`` every floor track.
    """

    kind: str
    tracks: tuple[int, ...]
    observations: tuple[tuple[int, int], ...]
    normal_axis: int
    plane_normal: np.ndarray = field(repr=False, default=None)

    @property
    def frame_id(self) -> Optional[int]:
        return None if self.kind == FLOOR else self.observations[0][0]

    def check(self, track_labels: Mapping[int, int], frame: ManhattanFrame) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown relation kind {self.kind!r}")
        if self.kind != FLOOR and (len(self.tracks) != 2 or self.tracks[0] == self.tracks[1]):
            raise ValueError("pairwise relation needs two distinct tracks")
        n = frame.axis(self.normal_axis)
        for t in self.tracks:
            if abs(n @ frame.axis(track_labels[t])) >= 1e-9:
                raise ValueError(f"plane normal not orthogonal to track {t}")


@dataclass
class FloorMask:
    frame_id: int
    mask: np.ndarray  # (h, w) bool


# ---------------------------------------------------------------- quads


def _row_spans(points: np.ndarray, shape: tuple[int, int]):
    """Rows and inclusive column ranges of pixel centers inside the convex hull of ``points``."""
    pts = np.asarray(points, dtype=float)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        raise EmptyQuadError("quad is degenerate") from None
    if hull.volume < 1.0:
        raise EmptyQuadError(f"quad area {hull.volume:.3g} px^2 below 1")
    h, w = shape
    r0 = max(int(math.floor(pts[:, 1].min())), 0)
    r1 = min(int(math.ceil(pts[:, 1].max())), h)
    rows = np.arange(r0, r1)
    y = rows + 0.5
    lo = np.full(len(rows), -np.inf)
    hi = np.full(len(rows), np.inf)
    for a, b, c in hull.equations:
        # a x + b y + c <= tol for x = column + 0.5
        rhs = -(b * y + c) + 1e-9
        if a > 0:
            hi = np.minimum(hi, rhs / a)
        elif a < 0:
            lo = np.maximum(lo, rhs / a)
        else:
            lo = np.where(rhs >= 0, lo, np.inf)
    c0 = np.maximum(np.ceil(lo - 0.5), 0)
    c1 = np.minimum(np.floor(hi - 0.5), w - 1)
    keep = c1 >= c0
    return rows[keep], c0[keep].astype(np.int64), c1[keep].astype(np.int64)


def quad_pixels(points: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of pixels whose centers lie in the convex hull of ``points``."""
    rows, c0, c1 = _row_spans(points, shape)
    counts = c1 - c0 + 1
    rr = np.repeat(rows, counts)
    start = np.repeat(c0 - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    cc = start + np.arange(counts.sum())
    return rr, cc


def _deviation(n: np.ndarray, avg: np.ndarray) -> np.ndarray:
    """Angles (degrees) between unit rows of ``n`` and unit ``avg``, accurate near zero."""
    d = np.sqrt(np.einsum("ij,ij->i", n - avg, n - avg))
    s = np.sqrt(np.einsum("ij,ij->i", n + avg, n + avg))
    return np.degrees(2.0 * np.arctan2(d, s))


def quad_normal_stats(a: LineSegment2D, b: LineSegment2D, normal_map: np.ndarray, R) -> tuple[np.ndarray, float]:
    """Average global-frame normal inside the quad spanned by two segments, and mean deviation (degrees)."""
    pts = np.array([a.p, a.q, b.p, b.q], dtype=float)
    rows, cols = quad_pixels(pts, normal_map.shape[:2])
    n = normal_map[rows, cols].astype(np.float64)
    n = n[np.linalg.norm(n, axis=1) > 0.5]
    if len(n) == 0:
        raise EmptyQuadError("no valid normals inside the quad")
    n = n @ np.asarray(R, dtype=float)  # camera -> global: R^T n
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    avg = n.mean(axis=0)
    norm = np.linalg.norm(avg)
    if norm == 0:
        raise EmptyQuadError("quad normals cancel out")
    avg /= norm
    return avg, float(_deviation(n, avg).mean())


# With rho = |mean of unit normals| = mean cos(t):
#   (1 - cos t) / t <= 0.72462 on [0, pi]    =>  mean t >= (1 - rho) / 0.72462
#   t <= pi * sqrt((1 - cos t) / 2), Jensen  =>  mean t <= pi * sqrt((1 - rho) / 2)
# so the per-pixel pass is only needed when the threshold falls between the two.
_ANGLE_BOUND = 0.72462


class FrameNormals:
    """One frame's normals in the global frame with row prefix sums for fast quad averages."""

    def __init__(self, normal_map: np.ndarray, R):
        n = np.asarray(normal_map, dtype=np.float64)
        norm = np.sqrt(np.einsum("ijk,ijk->ij", n, n))
        valid = norm > 0.5
        g = n @ np.asarray(R, dtype=float)  # rows are R^T n; rotation keeps the norm
        g /= np.where(valid, norm, 1.0)[..., None]
        self.shape = n.shape[:2]
        self.normals = g
        self.valid = valid
        h, w = self.shape
        self.sum = np.zeros((h, w + 1, 3))
        np.cumsum(g, axis=1, out=self.sum[:, 1:])
        self.count = np.zeros((h, w + 1))
        np.cumsum(valid, axis=1, out=self.count[:, 1:])

    def floor_mask(self, up, angle_deg: float = FLOOR_ANGLE_DEG, dilate: bool = True) -> np.ndarray:
        mask = self.valid & (self.normals @ np.asarray(up, dtype=float) > math.cos(math.radians(angle_deg)))
        return _dilate(mask) if dilate else mask

    def average(self, a: LineSegment2D, b: LineSegment2D):
        """(mean of unit normals, valid pixel count, row spans) over the quad."""
        spans = _row_spans(np.array([a.p, a.q, b.p, b.q], dtype=float), self.shape)
        rows, c0, c1 = spans
        total = (self.sum[rows, c1 + 1] - self.sum[rows, c0]).sum(axis=0)
        cnt = float((self.count[rows, c1 + 1] - self.count[rows, c0]).sum())
        if cnt == 0:
            raise EmptyQuadError("no valid normals inside the quad")
        return total / cnt, cnt, spans

    def deviation(self, spans, avg: np.ndarray) -> float:
        rows, c0, c1 = spans
        counts = c1 - c0 + 1
        rr = np.repeat(rows, counts)
        cc = np.repeat(c0 - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts) + np.arange(counts.sum())
        ok = self.valid[rr, cc]
        return float(_deviation(self.normals[rr[ok], cc[ok]], avg).mean())


def _axis_angle_deg(n: np.ndarray, v: np.ndarray) -> float:
    """Angle between a normal and an axis, ignoring the axis sign."""
    return math.degrees(math.atan2(np.linalg.norm(np.cross(n, v)), abs(n @ v)))


# ---------------------------------------------------------------- pair detectors


def _tracked_by_frame(segments, labels, track_of) -> dict[int, list[int]]:
    by_frame: dict[int, list[int]] = defaultdict(list)
    for k, s in enumerate(segments):
        if labels[k] >= 0 and track_of[k] >= 0:
            by_frame[int(s.frame_id)].append(k)
    return dict(sorted(by_frame.items()))


def _pairs(idx: list[int], labels, track_of, same_label: bool):
    """Index pairs (a < b) of one frame's tracked segments lying in distinct tracks."""
    for x in range(len(idx)):
        for y in range(x + 1, len(idx)):
            a, b = idx[x], idx[y]
            if track_of[a] != track_of[b] and (labels[a] == labels[b]) == same_label:
                yield a, b


def _relation(kind, fid, a, b, track_of, axis, frame) -> CoplanarityRelation:
    if track_of[b] < track_of[a]:
        a, b = b, a
    return CoplanarityRelation(kind, (int(track_of[a]), int(track_of[b])), ((fid, a), (fid, b)), int(axis),
                               frame.axis(axis))


def detect_junction(segments, labels, track_of, K: Intrinsics, frame: ManhattanFrame,
                    ratio: float = JUNCTION_RATIO) -> list[CoplanarityRelation]:
    labels, track_of = np.asarray(labels), np.asarray(track_of)
    thresh = ratio * K.min_side
    out = []
    for fid, idx in _tracked_by_frame(segments, labels, track_of).items():
        for a, b in _pairs(idx, labels, track_of, same_label=False):
            sa, sb = segments[a], segments[b]
            d = min(math.dist(u, v) for u in (sa.p, sa.q) for v in (sb.p, sb.q))
            if d < thresh:
                out.append(_relation(JUNCTION, fid, a, b, track_of, third_axis(labels[a], labels[b]), frame))
    return out


def _normal_test(sa, sb, fn: FrameNormals, frame, candidates, angle_deg, dev_deg) -> Optional[int]:
    try:
        mean, _, spans = fn.average(sa, sb)
    except EmptyQuadError:
        return None
    rho = float(np.linalg.norm(mean))
    if rho == 0 or (1.0 - rho) / _ANGLE_BOUND >= math.radians(dev_deg):
        return None  # the mean angle cannot be below the threshold
    avg = mean / rho
    angles = [_axis_angle_deg(avg, frame.axis(c)) for c in candidates]
    k = int(np.argmin(angles))
    if angles[k] >= angle_deg:
        return None
    if math.pi * math.sqrt(max(1.0 - rho, 0.0) / 2.0) < math.radians(dev_deg):
        return candidates[k]
    if fn.deviation(spans, avg) >= dev_deg:
        return None
    return candidates[k]


def _orthogonal_in_frame(fid, idx, fn, segments, labels, track_of, frame, angle_deg, dev_deg):
    out = []
    for a, b in _pairs(idx, labels, track_of, same_label=False):
        c = third_axis(labels[a], labels[b])
        hit = _normal_test(segments[a], segments[b], fn, frame, [c], angle_deg, dev_deg)
        if hit is not None:
            out.append(_relation(ORTHOGONAL, fid, a, b, track_of, hit, frame))
    return out


def _parallel_in_frame(fid, idx, fn, segments, labels, track_of, frame, angle_deg, dev_deg):
    out = []
    for a, b in _pairs(idx, labels, track_of, same_label=True):
        cands = [k for k in range(3) if k != labels[a]]
        hit = _normal_test(segments[a], segments[b], fn, frame, cands, angle_deg, dev_deg)
        if hit is not None:
            out.append(_relation(PARALLEL, fid, a, b, track_of, hit, frame))
    return out


def _frame_normals(normal_maps, rotations, frame_pos, fid) -> FrameNormals:
    pos = fid if frame_pos is None else frame_pos[fid]
    try:
        nmap = normal_maps[fid]
    except KeyError:
        raise NoDataError(f"frame {fid}: no normal map") from None
    return FrameNormals(nmap, rotations[pos])


def detect_orthogonal(segments, labels, track_of, normal_maps: Mapping, rotations, frame: ManhattanFrame,
                      frame_pos: Optional[dict] = None, angle_deg: float = NORMAL_ANGLE_DEG,
                      dev_deg: float = DEVIATION_DEG) -> list[CoplanarityRelation]:
    labels, track_of = np.asarray(labels), np.asarray(track_of)
    out = []
    for fid, idx in _tracked_by_frame(segments, labels, track_of).items():
        fn = _frame_normals(normal_maps, rotations, frame_pos, fid)
        out += _orthogonal_in_frame(fid, idx, fn, segments, labels, track_of, frame, angle_deg, dev_deg)
    return out


def detect_parallel(segments, labels, track_of, normal_maps: Mapping, rotations, frame: ManhattanFrame,
                    frame_pos: Optional[dict] = None, angle_deg: float = NORMAL_ANGLE_DEG,
                    dev_deg: float = DEVIATION_DEG) -> list[CoplanarityRelation]:
    labels, track_of = np.asarray(labels), np.asarray(track_of)
    out = []
    for fid, idx in _tracked_by_frame(segments, labels, track_of).items():
        fn = _frame_normals(normal_maps, rotations, frame_pos, fid)
        out += _parallel_in_frame(fid, idx, fn, segments, labels, track_of, frame, angle_deg, dev_deg)
    return out


# ---------------------------------------------------------------- floor


def up_axis(frame: ManhattanFrame, gravity) -> int:
    """Index of the Manhattan axis closest to the up direction."""
    g = np.asarray(gravity, dtype=float)
    return int(np.argmax(np.abs(frame.matrix @ g)))


def _signed_up(frame: ManhattanFrame, gravity) -> tuple[int, np.ndarray]:
    vert = up_axis(frame, gravity)
    up = frame.axis(vert)
    return vert, (-up if up @ np.asarray(gravity, dtype=float) < 0 else up)


def _dilate(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool))


def floor_mask(normal_map: np.ndarray, R, up, angle_deg: float = FLOOR_ANGLE_DEG, dilate: bool = True) -> np.ndarray:
    """Pixels whose global normal is within ``angle_deg`` of ``up``, dilated once by a 3x3 square."""
    n = normal_map.astype(np.float64)
    norm = np.linalg.norm(n, axis=2)
    up_cam = np.asarray(R, dtype=float) @ np.asarray(up, dtype=float)  # global up in camera frame
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (n @ up_cam) / norm
    mask = (norm > 0.5) & (cos > math.cos(math.radians(angle_deg)))
    return _dilate(mask) if dilate else mask


def segment_pixels(seg: LineSegment2D, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Pixels visited by a segment sampled at half-pixel spacing, clipped to the image."""
    n = max(int(math.ceil(seg.length * 2)), 1) + 1
    t = np.linspace(0.0, 1.0, n)
    x = seg.p[0] + t * (seg.q[0] - seg.p[0])
    y = seg.p[1] + t * (seg.q[1] - seg.p[1])
    h, w = shape
    cols = np.clip(np.floor(x).astype(np.int64), 0, w - 1)
    rows = np.clip(np.floor(y).astype(np.int64), 0, h - 1)
    return rows, cols


def _floor_in_frame(candidates, mask, segments) -> list[int]:
    out = []
    for k in candidates:
        rows, cols = segment_pixels(segments[k], mask.shape)
        if np.all(mask[rows, cols]):
            out.append(k)
    return out


def _floor_relation(floor_segs, segments, track_of, vert, frame) -> Optional[CoplanarityRelation]:
    obs = sorted((int(track_of[k]), segments[k].frame_id, k) for k in floor_segs if track_of[k] >= 0)
    tracks = tuple(sorted({t for t, _, _ in obs}))
    if len(tracks) < 2:
        return None
    return CoplanarityRelation(FLOOR, tracks, tuple((f, k) for _, f, k in obs), vert, frame.axis(vert))


def _floor_candidates(segments, labels, vert) -> dict[int, list[int]]:
    by_frame: dict[int, list[int]] = defaultdict(list)
    for k, s in enumerate(segments):
        if labels[k] >= 0 and labels[k] != vert:
            by_frame[int(s.frame_id)].append(k)
    return by_frame


def detect_floor(segments, labels, track_of, normal_maps: Mapping, rotations, frame: ManhattanFrame, gravity,
                 frame_pos: Optional[dict] = None, angle_deg: float = FLOOR_ANGLE_DEG,
                 keep_masks: bool = False):
    """Floor segments per frame and the single relation tying all floor tracks.

    Returns ``(relation or None, floor segment indices, masks)``; masks are
    only collected with ``keep_masks``.
    """
    labels, track_of = np.asarray(labels), np.asarray(track_of)
    vert, up = _signed_up(frame, gravity)
    floor_segs: list[int] = []
    masks: list[FloorMask] = []
    for fid, cands in sorted(_floor_candidates(segments, labels, vert).items()):
        pos = fid if frame_pos is None else frame_pos[fid]
        mask = floor_mask(normal_maps[fid], rotations[pos], up, angle_deg)
        if keep_masks:
            masks.append(FloorMask(fid, mask))
        floor_segs += _floor_in_frame(cands, mask, segments)
    return _floor_relation(floor_segs, segments, track_of, vert, frame), floor_segs, masks


def detect_all(segments, labels, track_of, K: Intrinsics, normal_maps: Mapping, rotations, frame: ManhattanFrame,
               gravity, frame_pos: Optional[dict] = None, kinds: Sequence[str] = KINDS,
               junction_ratio: float = JUNCTION_RATIO, angle_deg: float = NORMAL_ANGLE_DEG,
               dev_deg: float = DEVIATION_DEG, floor_deg: float = FLOOR_ANGLE_DEG) -> list[CoplanarityRelation]:
    """Run the selected detectors, visiting each frame's normal map once.

    Output order: junction, orthogonal, parallel relations by frame, then
    the floor relation.  Equivalent to calling the individual detectors.
    """
    labels = np.asarray(labels)
    track_of = np.asarray(track_of)
    unknown = set(kinds) - set(KINDS)
    if unknown:
        raise ValueError(f"unknown relation kinds {sorted(unknown)}")
    out: dict[str, list[CoplanarityRelation]] = {k: [] for k in KINDS}
    if JUNCTION in kinds:
        out[JUNCTION] = detect_junction(segments, labels, track_of, K, frame, junction_ratio)
    need_quads = ORTHOGONAL in kinds or PARALLEL in kinds
    tracked = _tracked_by_frame(segments, labels, track_of) if need_quads else {}
    vert, up = _signed_up(frame, gravity)
    floor_cands = _floor_candidates(segments, labels, vert) if FLOOR in kinds else {}
    floor_segs: list[int] = []
    for fid in sorted(set(tracked) | set(floor_cands)):
        fn = _frame_normals(normal_maps, rotations, frame_pos, fid)
        idx = tracked.get(fid, [])
        if ORTHOGONAL in kinds:
            out[ORTHOGONAL] += _orthogonal_in_frame(fid, idx, fn, segments, labels, track_of, frame,
                                                    angle_deg, dev_deg)
        if PARALLEL in kinds:
            out[PARALLEL] += _parallel_in_frame(fid, idx, fn, segments, labels, track_of, frame,
                                                angle_deg, dev_deg)
        if fid in floor_cands:
            floor_segs += _floor_in_frame(floor_cands[fid], fn.floor_mask(up, floor_deg), segments)
    rels = out[JUNCTION] + out[ORTHOGONAL] + out[PARALLEL]
    if FLOOR in kinds:
        rel = _floor_relation(floor_segs, segments, track_of, vert, frame)
        if rel is not None:
            rels.append(rel)
    return rels


# ---------------------------------------------------------------- records


def relations_to_record(relations: Sequence[CoplanarityRelation]) -> list[dict]:
    return [{"kind": r.kind, "tracks": list(r.tracks), "observations": [list(o) for o in r.observations],
             "normal_axis": r.normal_axis} for r in relations]


def relations_from_record(rec: list[dict], frame: ManhattanFrame) -> list[CoplanarityRelation]:
    return [CoplanarityRelation(r["kind"], tuple(int(t) for t in r["tracks"]),
                                tuple((int(f), int(s)) for f, s in r["observations"]), int(r["normal_axis"]),
                                frame.axis(int(r["normal_axis"])))
            for r in rec]


def write_relations_csv(relations: Sequence[CoplanarityRelation], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "frame_id", "track_a", "track_b", "normal_axis"])
        for r in relations:
            if r.kind == FLOOR:
                for t in r.tracks:
                    w.writerow([r.kind, "", t, "", r.normal_axis])
            else:
                w.writerow([r.kind, r.frame_id, r.tracks[0], r.tracks[1], r.normal_axis])

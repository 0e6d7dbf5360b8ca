"""Matching Manhattan segments between nearby frames and grouping them into tracks."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateWarpError, InsufficientDataError
from .geometry import Intrinsics, LineSegment2D, axes_within
from .unionfind import UnionFind

PAIR_ANGLE_DEG = 2.0
MATCH_DIST_RATIO = 0.05
MATCH_ANGLE_DEG = 1.0
WARP_EPS = 1e-12


@dataclass
class LineTrack:
    track_id: int
    label: int
    observations: list[tuple[int, int]]  # (frame_id, segment index), sorted by frame

    def __post_init__(self):
        frames = [f for f, _ in self.observations]
        if len(frames) < 2:
            raise ValueError("a track needs at least two observations")
        if len(set(frames)) != len(frames):
            raise ValueError("a track observes each frame at most once")

    @property
    def segments(self) -> list[int]:
        return [s for _, s in self.observations]

    @property
    def frames(self) -> list[int]:
        return [f for f, _ in self.observations]


@dataclass
class PairMatch:
    frames: tuple[int, int]
    matches: list[tuple[int, int]]  # (segment in first frame, segment in second frame)
    homography: np.ndarray
    distances: list[float] = field(default_factory=list)


def candidate_pairs(rotations, max_angle_deg: float = PAIR_ANGLE_DEG) -> list[tuple[int, int]]:
    """Unordered frame-position pairs whose optical axes differ by less than ``max_angle_deg``."""
    return axes_within(rotations, max_angle_deg)


def _normalize_h(H: np.ndarray) -> np.ndarray:
    H = H * (math.sqrt(3.0) / np.linalg.norm(H))
    return -H if H[2, 2] < 0 else H


def _hartley(pts: np.ndarray):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return T


def homography_dlt(src: np.ndarray, dst: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    if len(src) < 4 or len(src) != len(dst):
        raise InsufficientDataError(f"homography needs at least 4 correspondences, got {len(src)}")
    Ts, Td = _hartley(src), _hartley(dst)
    a = np.hstack([src, np.ones((len(src), 1))]) @ Ts.T
    b = np.hstack([dst, np.ones((len(dst), 1))]) @ Td.T
    w = np.ones(len(src)) if weights is None else np.sqrt(weights)
    rows = []
    for (x, y, _), (u, v, _), wk in zip(a, b, w):
        rows.append(wk * np.array([-x, -y, -1, 0, 0, 0, u * x, u * y, u]))
        rows.append(wk * np.array([0, 0, 0, -x, -y, -1, v * x, v * y, v]))
    _, _, vt = np.linalg.svd(np.array(rows))
    Hn = vt[-1].reshape(3, 3)
    return _normalize_h(np.linalg.inv(Td) @ Hn @ Ts)


def transfer(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    h = np.hstack([pts, np.ones((len(pts), 1))]) @ H.T
    scale = np.abs(h).max(axis=1)
    if np.any(np.abs(h[:, 2]) <= WARP_EPS * np.maximum(scale, 1.0)):
        raise DegenerateWarpError("point warped to infinity")
    return h[:, :2] / h[:, 2:3]


def pair_homography(i: int, j: int, K: Intrinsics, rotations, matches=None, robust_iters: int = 10,
                    huber_px: float = 2.0) -> np.ndarray:
    """Homography from frame position ``i`` to ``j``.

    Without correspondences this is the pure-rotation map ``K R_j R_i^T K^-1``.
    With ``matches = (src, dst)`` point arrays it is a DLT fit refined by
    iteratively reweighted least squares with Huber weights.
    """
    if matches is None:
        R = np.asarray(rotations, dtype=float)
        return _normalize_h(K.K @ R[j] @ R[i].T @ K.K_inv)
    src, dst = matches
    H = homography_dlt(src, dst)
    for _ in range(robust_iters):
        err = np.linalg.norm(transfer(H, src) - np.asarray(dst, float), axis=1)
        w = np.where(err <= huber_px, 1.0, huber_px / np.maximum(err, 1e-300))
        H = homography_dlt(src, dst, w)
    return H


def _line_through(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    l = np.cross([p[0], p[1], 1.0], [q[0], q[1], 1.0])
    return l / math.hypot(l[0], l[1])


def _dist_to_line(pts: np.ndarray, l: np.ndarray) -> np.ndarray:
    return np.abs(pts @ l[:2] + l[2])


def segment_distance(a: LineSegment2D, b: LineSegment2D, H: np.ndarray) -> float:
    """Smallest of the four endpoint-to-line distances after warping ``a`` by ``H``."""
    wa = transfer(H, [a.p, a.q])
    pb = np.array([b.p, b.q], dtype=float)
    d1 = _dist_to_line(wa, _line_through(pb[0], pb[1]))
    d2 = _dist_to_line(pb, _line_through(wa[0], wa[1]))
    return float(min(d1.min(), d2.min()))


def _direction(p, q) -> float:
    return math.atan2(q[1] - p[1], q[0] - p[0]) % math.pi


def _angle_diff(a: float, b: float) -> float:
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def _score_matrix(sa, sb, H, labels_a, labels_b, max_dist, max_angle):
    """Distances for admissible (a, b) pairs, +inf elsewhere."""
    D = np.full((len(sa), len(sb)), np.inf)
    dir_b = [_direction(s.p, s.q) for s in sb]
    lines_b = [_line_through(np.asarray(s.p, float), np.asarray(s.q, float)) for s in sb]
    pts_b = [np.array([s.p, s.q], dtype=float) for s in sb]
    for r, a in enumerate(sa):
        try:
            wa = transfer(H, [a.p, a.q])
        except DegenerateWarpError:
            continue
        if np.allclose(wa[0], wa[1]):
            continue
        dir_a = _direction(wa[0], wa[1])
        line_a = _line_through(wa[0], wa[1])
        for c in range(len(sb)):
            if labels_a[r] != labels_b[c]:
                continue
            if _angle_diff(dir_a, dir_b[c]) >= max_angle:
                continue
            d = min(_dist_to_line(wa, lines_b[c]).min(), _dist_to_line(pts_b[c], line_a).min())
            if d < max_dist:
                D[r, c] = d
    return D


def match_pair(i: int, j: int, segments: Sequence[LineSegment2D], labels, H: np.ndarray, K: Intrinsics,
               frame_of: Optional[dict] = None, dist_ratio: float = MATCH_DIST_RATIO,
               angle_deg: float = MATCH_ANGLE_DEG) -> PairMatch:
    """Mutual-nearest matching of labeled segments between frames ``i`` and ``j``.

    ``i`` and ``j`` are frame ids; ``H`` maps frame ``i`` pixels into frame
    ``j``.  The distance is always measured in the lower frame id, so
    ``match_pair(j, i, ..., inv(H))`` returns the same pairs swapped.
    """
    labels = np.asarray(labels)
    if j < i:
        res = match_pair(j, i, segments, labels, np.linalg.inv(H), K, frame_of, dist_ratio, angle_deg)
        return PairMatch((i, j), [(b, a) for a, b in res.matches], _normalize_h(H), res.distances)
    if frame_of is None:
        frame_of = defaultdict(list)
        for k, s in enumerate(segments):
            frame_of[s.frame_id].append(k)
    ia = [k for k in frame_of.get(i, []) if labels[k] >= 0]
    ib = [k for k in frame_of.get(j, []) if labels[k] >= 0]
    matches: list[tuple[int, int]] = []
    dists: list[float] = []
    if ia and ib:
        D = _score_matrix([segments[k] for k in ia], [segments[k] for k in ib], H,
                          labels[ia], labels[ib], dist_ratio * K.min_side, math.radians(angle_deg))
        # argmin returns the first minimum, i.e. the smaller segment index on ties
        best_b = np.argmin(D, axis=1)
        best_a = np.argmin(D, axis=0)
        for r, c in enumerate(best_b):
            if np.isfinite(D[r, c]) and best_a[c] == r:
                matches.append((ia[r], ib[c]))
                dists.append(float(D[r, c]))
    return PairMatch((i, j), matches, _normalize_h(H), dists)


def match_all(segments, labels, K: Intrinsics, rotations, frame_ids: Sequence[int],
              max_pair_deg: float = PAIR_ANGLE_DEG, dist_ratio: float = MATCH_DIST_RATIO,
              angle_deg: float = MATCH_ANGLE_DEG) -> list[PairMatch]:
    frame_of: dict[int, list[int]] = defaultdict(list)
    for k, s in enumerate(segments):
        frame_of[s.frame_id].append(k)
    out = []
    for pi, pj in candidate_pairs(rotations, max_pair_deg):
        H = pair_homography(pi, pj, K, rotations)
        out.append(match_pair(frame_ids[pi], frame_ids[pj], segments, labels, H, K, frame_of,
                              dist_ratio, angle_deg))
    return out


def form_tracks(pair_matches: Sequence[PairMatch], segments: Sequence[LineSegment2D], labels) -> list[LineTrack]:
    """Group matches into tracks with at most one observation per frame.

    Edges are merged from strongest (smallest distance) to weakest and an
    edge is skipped when it would put two observations of one frame into a
    track, so conflicting components lose their weakest edges.  Without
    conflicts this is plain connected components.
    """
    edges = []
    for pm in pair_matches:
        dists = pm.distances or [0.0] * len(pm.matches)
        for (a, b), d in zip(pm.matches, dists):
            a, b = min(a, b), max(a, b)
            edges.append((d, a, b))
    edges = sorted(set(edges))
    n = len(segments)
    uf = UnionFind(n)
    frames: dict[int, set[int]] = {}
    for d, a, b in edges:
        ra, rb = uf.find(a), uf.find(b)
        if ra == rb:
            continue
        fa = frames.get(ra, {segments[a].frame_id})
        fb = frames.get(rb, {segments[b].frame_id})
        if fa & fb:
            continue
        uf.union(a, b)
        frames.pop(ra, None)
        frames.pop(rb, None)
        frames[uf.find(a)] = fa | fb
    labels = np.asarray(labels)
    tracks = []
    for g in uf.groups():
        if len(g) < 2:
            continue
        obs = sorted((segments[k].frame_id, k) for k in g)
        tracks.append(LineTrack(len(tracks), int(labels[g[0]]), obs))
    return tracks


def track_index(tracks: Sequence[LineTrack], n_segments: int) -> np.ndarray:
    """Per-segment track id, -1 for segments outside any track."""
    out = np.full(n_segments, -1, dtype=np.int64)
    for t in tracks:
        out[t.segments] = t.track_id
    return out


def tracks_to_record(tracks: Sequence[LineTrack]) -> list[dict]:
    return [{"track_id": t.track_id, "label": t.label, "observations": [list(o) for o in t.observations]}
            for t in tracks]


def tracks_from_record(rec: list[dict]) -> list[LineTrack]:
    return [LineTrack(int(r["track_id"]), int(r["label"]), [(int(f), int(s)) for f, s in r["observations"]])
            for r in rec]


def write_tracks_csv(tracks: Sequence[LineTrack], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["track_id", "frame_id", "segment_index", "label"])
        for t in tracks:
            for f, s in t.observations:
                w.writerow([t.track_id, f, s, t.label])

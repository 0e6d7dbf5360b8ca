"""Bundle adjustment of Manhattan lines, camera poses and intrinsics.

A line is ``{Lambda + t A}`` with ``A`` a fixed Manhattan direction and
``Lambda`` its closest point to the origin.  Its image in camera ``(R, T)``
is the homogeneous line ``l = K^-T R ((Lambda - T) x A)``, which is the
line through the projections of any two of its points.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .coplanarity import FLOOR, CoplanarityRelation
from .errors import BehindCameraError, NumericError
from .geometry import Intrinsics, LineSegment2D, ManhattanFrame, exp_so3, nearest_rotation, skew
from .linear_sfm import LinearSolution
from .tracking import LineTrack

log = logging.getLogger(__name__)

W_REPROJ = 1.0
W_GEOM = 1e4
MAX_ITER = 200
REL_TOL = 1e-10
FOCAL_BOUNDS = (0.5, 2.0)


@dataclass
class Line3D:
    track_id: int
    label: int
    lam: np.ndarray  # closest point to the origin
    direction: np.ndarray  # unit Manhattan direction

    def project_perpendicular(self) -> None:
        self.lam = self.lam - (self.lam @ self.direction) * self.direction


def init_from_linear(solution: LinearSolution, tracks: Sequence[LineTrack], frame: ManhattanFrame) -> list[Line3D]:
    """Fit each track's mid-points with a line along its Manhattan direction."""
    lines = []
    for t in sorted(tracks, key=lambda t: t.track_id):
        pts = [solution.point(t.track_id, f) for f in t.frames if (t.track_id, f) in solution.depths]
        if not pts:
            continue
        A = frame.axis(t.label)
        c = np.mean(pts, axis=0)
        lines.append(Line3D(t.track_id, t.label, c - (c @ A) * A, A.copy()))
    return lines


# ---------------------------------------------------------------- residuals


def residual_colinearity(line: Line3D) -> float:
    return float(line.direction @ line.lam)


def residual_coplanarity(a: Line3D, b: Line3D, normal: np.ndarray) -> float:
    return float((a.lam - b.lam) @ normal)


def image_line(lam, A, R, T, K: Intrinsics) -> np.ndarray:
    return K.K_inv.T @ (np.asarray(R) @ np.cross(np.asarray(lam) - np.asarray(T), A))


def _endpoint_distances(l: np.ndarray, seg: LineSegment2D) -> np.ndarray:
    n = math.hypot(l[0], l[1])
    if n < 1e-300:
        raise NumericError("projected line is degenerate")
    e = np.array([[seg.p[0], seg.p[1], 1.0], [seg.q[0], seg.q[1], 1.0]])
    return e @ l / n


def residual_reprojection(line: Line3D, seg: LineSegment2D, R, T, K: Intrinsics) -> float:
    """Mean distance (px) of the observed endpoints to the projected line.

    For endpoints on the same side this equals the average distance over
    the whole segment; otherwise the endpoint mean is used (see
    :func:`endpoints_same_side`).
    """
    d = _endpoint_distances(image_line(line.lam, line.direction, R, T, K), seg)
    return float(np.abs(d).mean())


def endpoints_same_side(line: Line3D, seg: LineSegment2D, R, T, K: Intrinsics) -> bool:
    d = _endpoint_distances(image_line(line.lam, line.direction, R, T, K), seg)
    return bool(d[0] * d[1] >= 0)


def check_in_front(line: Line3D, seg: LineSegment2D, R, T, K: Intrinsics) -> None:
    """Raise when the 3D line point seen at the segment mid-point lies behind the camera."""
    ray = np.asarray(R).T @ (K.K_inv @ np.array([*seg.midpoint, 1.0]))
    ray /= np.linalg.norm(ray)
    A = line.direction
    w = np.asarray(T) - line.lam
    # closest points between the ray T + s ray and the line lam + t A
    b = ray @ A
    denom = 1.0 - b * b
    if denom < 1e-12:
        raise BehindCameraError("line is parallel to the viewing ray")
    s = (b * (A @ w) - ray @ w) / denom
    if s <= 0:
        raise BehindCameraError(f"track {line.track_id} lies behind the camera")


def reprojection_jacobian(lam, A, R, T, K: Intrinsics, seg: LineSegment2D):
    """Residual and gradients w.r.t. Lambda, T, rotation increment (right) and (fx, fy, cx, cy)."""
    lam, A, R, T = (np.asarray(v, dtype=float) for v in (lam, A, R, T))
    m = np.cross(lam - T, A)
    w = R @ m
    fx, fy, cx, cy = K.fx, K.fy, K.cx, K.cy
    l = np.array([w[0] / fx, w[1] / fy, -cx * w[0] / fx - cy * w[1] / fy + w[2]])
    n = math.hypot(l[0], l[1])
    if n < 1e-300:
        raise NumericError("projected line is degenerate")
    e = np.array([[seg.p[0], seg.p[1], 1.0], [seg.q[0], seg.q[1], 1.0]])
    s = e @ l
    d = s / n
    sign = np.where(d >= 0, 1.0, -1.0)
    r = float(np.abs(d).mean())
    l01 = np.array([l[0], l[1], 0.0])
    # d(d_k)/dl for both endpoints, combined with the abs signs
    dl = (sign[:, None] * (e / n - np.outer(s, l01) / n**3)).mean(axis=0)
    KiT = K.K_inv.T
    dm = (dl @ KiT) @ R  # gradient w.r.t. m
    g_lam = dm @ (-skew(A))
    g_T = -g_lam
    g_rot = -(dl @ KiT) @ R @ skew(m)
    dfx = np.array([-w[0] / fx**2, 0.0, cx * w[0] / fx**2])
    dfy = np.array([0.0, -w[1] / fy**2, cy * w[1] / fy**2])
    dcx = np.array([0.0, 0.0, -w[0] / fx])
    dcy = np.array([0.0, 0.0, -w[1] / fy])
    g_K = np.array([dl @ dfx, dl @ dfy, dl @ dcx, dl @ dcy])
    return r, g_lam, g_T, g_rot, g_K


# ---------------------------------------------------------------- problem


@dataclass
class BAObservation:
    line: int  # index into lines
    frame: int  # index into cameras
    segment: LineSegment2D
    segment_index: int = -1


@dataclass
class BAProblem:
    lines: list[Line3D]
    frame_ids: list[int]
    rotations: np.ndarray  # (n, 3, 3)
    translations: np.ndarray  # (n, 3)
    intrinsics: Intrinsics
    observations: list[BAObservation]
    coplanar: list[tuple[int, int, np.ndarray]]  # (line a, line b, plane normal)
    gauge_frame: int = 0
    w_reproj: float = W_REPROJ
    w_geom: float = W_GEOM
    dropped: list[int] = field(default_factory=list)

    def copy(self) -> "BAProblem":
        return BAProblem([Line3D(l.track_id, l.label, l.lam.copy(), l.direction.copy()) for l in self.lines],
                         list(self.frame_ids), self.rotations.copy(), self.translations.copy(), self.intrinsics,
                         list(self.observations), list(self.coplanar), self.gauge_frame, self.w_reproj,
                         self.w_geom, list(self.dropped))


def build_problem(solution: LinearSolution, tracks: Sequence[LineTrack], relations: Sequence[CoplanarityRelation],
                  segments, K: Intrinsics, rotations, frame: ManhattanFrame, frame_pos: Optional[dict] = None,
                  w_reproj: float = W_REPROJ, w_geom: float = W_GEOM) -> BAProblem:
    lines = init_from_linear(solution, tracks, frame)
    line_of = {l.track_id: k for k, l in enumerate(lines)}
    frames = [f for f, r in zip(solution.frame_ids, solution.registered) if r]
    cam_of = {f: k for k, f in enumerate(frames)}
    R = np.array([rotations[f if frame_pos is None else frame_pos[f]] for f in frames], dtype=float)
    T = np.array([solution.translations[solution.frame_ids.index(f)] for f in frames], dtype=float)
    obs, dropped = [], []
    for (tid, fid), seg_idx in sorted(solution.observation_segments.items()):
        if tid not in line_of or fid not in cam_of:
            continue
        o = BAObservation(line_of[tid], cam_of[fid], segments[seg_idx], seg_idx)
        try:
            check_in_front(lines[o.line], o.segment, R[o.frame], T[o.frame], K)
        except BehindCameraError as exc:
            log.warning("dropping observation of track %d in frame %d: %s", tid, fid, exc)
            dropped.append(seg_idx)
            continue
        obs.append(o)
    cop: dict[tuple[int, int, int], np.ndarray] = {}
    for rel in relations:
        ids = [line_of[t] for t in rel.tracks if t in line_of]
        pairs = list(zip(ids[:-1], ids[1:])) if rel.kind == FLOOR else ([tuple(ids)] if len(ids) == 2 else [])
        for a, b in pairs:
            a, b = min(a, b), max(a, b)
            cop.setdefault((a, b, rel.normal_axis), frame.axis(rel.normal_axis))
    coplanar = [(a, b, n) for (a, b, _), n in sorted(cop.items(), key=lambda kv: kv[0])]
    gauge = cam_of[frames[0]]
    return BAProblem(lines, frames, R, T, K, obs, coplanar, gauge, w_reproj, w_geom, dropped)


class _Layout:
    """Column layout of the free variables for one phase."""

    def __init__(self, problem: BAProblem, phase: int):
        self.n_lines = len(problem.lines)
        self.cams = [k for k in range(len(problem.frame_ids)) if k != problem.gauge_frame]
        self.t_col = {k: 3 * self.n_lines + 3 * j for j, k in enumerate(self.cams)}
        n = 3 * self.n_lines + 3 * len(self.cams)
        self.r_col: dict[int, int] = {}
        if phase >= 2:
            for j, k in enumerate(self.cams):
                self.r_col[k] = n + 3 * j
            n += 3 * len(self.cams)
        self.k_col = n if phase >= 3 else None
        if phase >= 3:
            n += 4
        self.n = n


def residual_vector(problem: BAProblem) -> np.ndarray:
    """Weighted residuals: reprojection, then colinearity, then coplanarity."""
    sw_r, sw_g = math.sqrt(problem.w_reproj), math.sqrt(problem.w_geom)
    K = problem.intrinsics
    rep = np.empty(len(problem.observations))
    for k, o in enumerate(problem.observations):
        line = problem.lines[o.line]
        d = _endpoint_distances(image_line(line.lam, line.direction, problem.rotations[o.frame],
                                           problem.translations[o.frame], K), o.segment)
        rep[k] = np.abs(d).mean()
    col = np.array([residual_colinearity(l) for l in problem.lines])
    cop = np.array([residual_coplanarity(problem.lines[a], problem.lines[b], n) for a, b, n in problem.coplanar])
    r = np.concatenate([sw_r * rep, sw_g * col, sw_g * cop])
    if not np.all(np.isfinite(r)):
        bad = int(np.flatnonzero(~np.isfinite(r))[0])
        if bad < len(rep):
            o = problem.observations[bad]
            raise NumericError(f"non-finite reprojection residual: track {problem.lines[o.line].track_id}, "
                               f"frame {problem.frame_ids[o.frame]}")
        raise NumericError(f"non-finite geometric residual at row {bad}")
    return r


def total_cost(problem: BAProblem) -> float:
    r = residual_vector(problem)
    return float(r @ r)


def jacobian(problem: BAProblem, layout: _Layout) -> sp.csr_matrix:
    sw_r, sw_g = math.sqrt(problem.w_reproj), math.sqrt(problem.w_geom)
    K = problem.intrinsics
    n_obs = len(problem.observations)
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []

    def put(r: int, c: int, v) -> None:
        rows.extend([r] * len(v))
        cols.extend(range(c, c + len(v)))
        vals.extend(v)

    for k, o in enumerate(problem.observations):
        line = problem.lines[o.line]
        _, g_lam, g_T, g_rot, g_K = reprojection_jacobian(line.lam, line.direction, problem.rotations[o.frame],
                                                          problem.translations[o.frame], K, o.segment)
        put(k, 3 * o.line, sw_r * g_lam)
        c = layout.t_col.get(o.frame)
        if c is not None:
            put(k, c, sw_r * g_T)
        c = layout.r_col.get(o.frame)
        if c is not None:
            put(k, c, sw_r * g_rot)
        if layout.k_col is not None:
            put(k, layout.k_col, sw_r * g_K)
    for i, line in enumerate(problem.lines):
        put(n_obs + i, 3 * i, sw_g * line.direction)
    base = n_obs + layout.n_lines
    for i, (a, b, n) in enumerate(problem.coplanar):
        put(base + i, 3 * a, sw_g * n)
        put(base + i, 3 * b, -sw_g * n)
    shape = (n_obs + layout.n_lines + len(problem.coplanar), layout.n)
    return sp.csr_matrix((vals, (rows, cols)), shape=shape)


def apply_step(problem: BAProblem, layout: _Layout, step: np.ndarray, K0: Intrinsics) -> BAProblem:
    out = problem.copy()
    for i, line in enumerate(out.lines):
        line.lam = line.lam + step[3 * i : 3 * i + 3]
        line.project_perpendicular()
    for k, c in layout.t_col.items():
        out.translations[k] = out.translations[k] + step[c : c + 3]
    for k, c in layout.r_col.items():
        out.rotations[k] = nearest_rotation(out.rotations[k] @ exp_so3(step[c : c + 3]))
    if layout.k_col is not None:
        fx, fy, cx, cy = np.array([out.intrinsics.fx, out.intrinsics.fy, out.intrinsics.cx, out.intrinsics.cy]) \
            + step[layout.k_col : layout.k_col + 4]
        lo, hi = FOCAL_BOUNDS
        fx = float(np.clip(fx, lo * K0.fx, hi * K0.fx))
        fy = float(np.clip(fy, lo * K0.fy, hi * K0.fy))
        # keep the principal point inside the image so the intrinsics stay valid
        cx = float(np.clip(cx, 0.01 * K0.width, 0.99 * K0.width))
        cy = float(np.clip(cy, 0.01 * K0.height, 0.99 * K0.height))
        out.intrinsics = out.intrinsics.with_params(fx=fx, fy=fy, cx=cx, cy=cy)
    return out


@dataclass
class CostEntry:
    phase: int
    iteration: int
    cost: float
    damping: float
    accepted: bool


def optimize_phase(problem: BAProblem, phase: int, log_entries: list[CostEntry], K0: Intrinsics,
                   max_iter: int = MAX_ITER, rel_tol: float = REL_TOL, initial_damping: float = 1e-4) -> BAProblem:
    layout = _Layout(problem, phase)
    r = residual_vector(problem)
    cost = float(r @ r)
    log_entries.append(CostEntry(phase, 0, cost, initial_damping, True))
    mu = initial_damping
    for it in range(1, max_iter + 1):
        if cost == 0.0:
            break
        J = jacobian(problem, layout)
        H = (J.T @ J).tocsc()
        g = J.T @ r
        diag = H.diagonal()
        D = sp.diags(np.maximum(diag, 1e-12 * max(float(diag.max()), 1e-300)))
        accepted = False
        while mu < 1e16:
            try:
                step = splu((H + mu * D).tocsc()).solve(-g)
            except RuntimeError:
                mu *= 10
                continue
            if not np.all(np.isfinite(step)):
                mu *= 10
                continue
            cand = apply_step(problem, layout, step, K0)
            r_new = residual_vector(cand)
            new_cost = float(r_new @ r_new)
            if new_cost < cost:
                accepted = True
                break
            log_entries.append(CostEntry(phase, it, new_cost, mu, False))
            mu *= 10
        if not accepted:
            break
        decrease = (cost - new_cost) / cost
        problem, r, cost = cand, r_new, new_cost
        log_entries.append(CostEntry(phase, it, cost, mu, True))
        mu = max(mu / 10, 1e-15)
        if decrease < rel_tol:
            break
    return problem


@dataclass
class BAResult:
    problem: BAProblem
    cost_log: list[CostEntry]
    initial_reprojection: float
    final_reprojection: float
    opposite_side: int  # observations whose endpoints straddle the projected line

    def to_record(self) -> dict:
        p = self.problem
        return {
            "frame_ids": [int(f) for f in p.frame_ids],
            "rotations": p.rotations.reshape(-1, 9).tolist(),
            "translations": p.translations.tolist(),
            "intrinsics": p.intrinsics.to_dict(),
            "lines": [{"track_id": l.track_id, "label": l.label, "lambda": l.lam.tolist(),
                       "direction": l.direction.tolist()} for l in p.lines],
            "observations": [[o.line, o.frame, o.segment_index] for o in p.observations],
            "coplanar": [[a, b, n.tolist()] for a, b, n in p.coplanar],
            "gauge_frame": p.gauge_frame,
            "weights": [p.w_reproj, p.w_geom],
            "dropped": p.dropped,
            "cost_log": [[e.phase, e.iteration, e.cost, e.damping, e.accepted] for e in self.cost_log],
            "initial_reprojection": self.initial_reprojection,
            "final_reprojection": self.final_reprojection,
            "opposite_side": self.opposite_side,
        }

    @classmethod
    def from_record(cls, rec: dict, segments) -> "BAResult":
        lines = [Line3D(int(l["track_id"]), int(l["label"]), np.array(l["lambda"], dtype=float),
                        np.array(l["direction"], dtype=float)) for l in rec["lines"]]
        obs = [BAObservation(int(a), int(b), segments[int(s)], int(s)) for a, b, s in rec["observations"]]
        p = BAProblem(lines, [int(f) for f in rec["frame_ids"]],
                      np.array(rec["rotations"], dtype=float).reshape(-1, 3, 3),
                      np.array(rec["translations"], dtype=float).reshape(-1, 3),
                      Intrinsics.from_dict(rec["intrinsics"]), obs,
                      [(int(a), int(b), np.array(n, dtype=float)) for a, b, n in rec["coplanar"]],
                      int(rec["gauge_frame"]), float(rec["weights"][0]), float(rec["weights"][1]),
                      [int(d) for d in rec.get("dropped", [])])
        log_entries = [CostEntry(int(a), int(b), float(c), float(d), bool(e)) for a, b, c, d, e in rec["cost_log"]]
        return cls(p, log_entries, float(rec["initial_reprojection"]), float(rec["final_reprojection"]),
                   int(rec["opposite_side"]))


def mean_reprojection(problem: BAProblem) -> float:
    if not problem.observations:
        return 0.0
    K = problem.intrinsics
    return float(np.mean([residual_reprojection(problem.lines[o.line], o.segment, problem.rotations[o.frame],
                                                problem.translations[o.frame], K)
                          for o in problem.observations]))


def count_opposite_side(problem: BAProblem) -> int:
    return sum(not endpoints_same_side(problem.lines[o.line], o.segment, problem.rotations[o.frame],
                                       problem.translations[o.frame], problem.intrinsics)
               for o in problem.observations)


def optimize(problem: BAProblem, phases: Sequence[int] = (1, 2, 3), max_iter: int = MAX_ITER,
             rel_tol: float = REL_TOL) -> BAResult:
    """Run the requested phases in order; each phase frees more variables.

    Phase 1: lines and translations.  Phase 2: adds rotations.  Phase 3:
    adds (fx, fy, cx, cy).
    """
    for ph in phases:
        if ph not in (1, 2, 3):
            raise ValueError(f"unknown phase {ph}")
    K0 = problem.intrinsics
    entries: list[CostEntry] = []
    start = mean_reprojection(problem)
    for ph in phases:
        problem = optimize_phase(problem, ph, entries, K0, max_iter, rel_tol)
        log.info("bundle adjustment phase %d: cost %.6e", ph, [e for e in entries if e.accepted][-1].cost)
    return BAResult(problem, entries, start, mean_reprojection(problem), count_opposite_side(problem))


def write_cost_log(result: BAResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("phase,iteration,cost,damping,accepted\n")
        for e in result.cost_log:
            fh.write(f"{e.phase},{e.iteration},{e.cost!r},{e.damping!r},{int(e.accepted)}\n")

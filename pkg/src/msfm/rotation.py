"""Manhattan segment classification and rotation refinement.

The refinement objective, for rotations ``R_i`` (global -> camera) and
vanishing directions ``v``::

    sum_ij |n_ij(R_i) . v_ij|^2 + lam * sum_(i,j) in N ||R_i^T R_j - R0_i^T R0_j||_F^2

with ``n_ij = R_i^T m_ij`` the global interpretation-plane normal of a
segment whose camera-frame normal is ``m_ij``.  Rotations are updated on
the right, ``R <- R Exp(delta)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import NoDataError
from .geometry import (Intrinsics, ManhattanFrame, exp_so3, geodesic_angle, nearest_rotation, axes_within,
                       segment_arrays, skew)
from .manhattan import estimate_frame, manhattan_labels, segment_normals

log = logging.getLogger(__name__)

CLASSIFY_DEG = 85.0
NEIGHBOR_DEG = 10.0
LAMBDA = 0.1
DEGENERATE_CROSS = 1e-8


@dataclass
class ManhattanAssignment:
    labels: np.ndarray  # (n,) axis index or -1
    directions: np.ndarray  # (n, 3) assigned vanishing direction, NaN when unlabeled

    @property
    def n_labeled(self) -> int:
        return int(np.sum(self.labels >= 0))


@dataclass
class RefineResult:
    rotations: np.ndarray
    frame: ManhattanFrame
    cost_history: list[float] = field(default_factory=list)
    iterations: int = 0


def classify_segments(segments, K: Intrinsics, rotations, frame: ManhattanFrame,
                      frame_pos: Optional[dict] = None, threshold_deg: float = CLASSIFY_DEG) -> ManhattanAssignment:
    normals = segment_normals(segments, K, rotations, frame_pos)
    labels = manhattan_labels(normals, frame, threshold_deg)
    dirs = np.full((len(labels), 3), np.nan)
    dirs[labels >= 0] = frame.matrix[labels[labels >= 0]]
    return ManhattanAssignment(labels, dirs)


def build_neighbor_graph(rotations, max_angle_deg: float = NEIGHBOR_DEG) -> list[tuple[int, int]]:
    """Frame-position pairs whose optical axes differ by less than ``max_angle_deg``."""
    return axes_within(rotations, max_angle_deg)


class _Problem:
    """Residuals and Jacobian of the refinement objective."""

    def __init__(self, m_cam, seg_pos, seg_axis, pairs, R0, lam, free, optimize_frame):
        self.m_cam = m_cam
        self.seg_pos = seg_pos
        self.seg_axis = seg_axis
        self.pairs = list(pairs)
        self.C = np.array([R0[i].T @ R0[j] for i, j in self.pairs]).reshape(-1, 3, 3)
        self.sqrt_lam = math.sqrt(lam)
        self.free = list(free)
        self.col = {f: 3 * k for k, f in enumerate(self.free)}
        self.optimize_frame = optimize_frame
        self.n_params = 3 * len(self.free) + (3 if optimize_frame else 0)

    def residuals(self, R, V):
        n = np.einsum("kji,kj->ki", R[self.seg_pos], self.m_cam)  # R^T m
        r_data = np.einsum("ki,ki->k", n, V[self.seg_axis])
        if self.pairs:
            i, j = np.array(self.pairs).T
            E = np.einsum("kji,kjl->kil", R[i], R[j]) - self.C
            r_smooth = self.sqrt_lam * E.reshape(-1)
        else:
            r_smooth = np.zeros(0)
        return np.concatenate([r_data, r_smooth])

    def jacobian(self, R, V):
        ns = len(self.seg_pos)
        J = np.zeros((ns + 9 * len(self.pairs), self.n_params))
        n = np.einsum("kji,kj->ki", R[self.seg_pos], self.m_cam)
        g = np.cross(V[self.seg_axis], n)  # d r / d delta_i  and  d r / d phi
        for k, pos in enumerate(self.seg_pos):
            c = self.col.get(int(pos))
            if c is not None:
                J[k, c : c + 3] = g[k]
        if self.optimize_frame:
            J[:ns, -3:] = g
        E = [skew(e) for e in np.eye(3)]
        for p, (i, j) in enumerate(self.pairs):
            M = R[i].T @ R[j]
            rows = slice(ns + 9 * p, ns + 9 * p + 9)
            ci, cj = self.col.get(i), self.col.get(j)
            for a in range(3):
                if ci is not None:
                    J[rows, ci + a] = self.sqrt_lam * (-E[a] @ M).ravel()
                if cj is not None:
                    J[rows, cj + a] = self.sqrt_lam * (M @ E[a]).ravel()
        return J

    def update(self, R, V, step):
        R = R.copy()
        for f, c in self.col.items():
            R[f] = nearest_rotation(R[f] @ exp_so3(step[c : c + 3]))
        if self.optimize_frame:
            V = nearest_rotation(V @ exp_so3(step[-3:]).T)
        return R, V


def _camera_normals(segments, K: Intrinsics, sel: np.ndarray):
    _, P, Q, _ = segment_arrays([segments[k] for k in sel])
    Kinv = K.K_inv
    a = np.hstack([P, np.ones((len(P), 1))]) @ Kinv.T
    b = np.hstack([Q, np.ones((len(Q), 1))]) @ Kinv.T
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    m = np.cross(a, b)
    norm = np.linalg.norm(m, axis=1)
    return m, norm


def objective(segments, assignment: ManhattanAssignment, pairs, rotations, rotations0, K: Intrinsics,
              frame: ManhattanFrame, lam: float = LAMBDA, frame_pos: Optional[dict] = None) -> float:
    prob, _ = _setup(segments, assignment, pairs, rotations0, K, lam, frame_pos, (), False)
    r = prob.residuals(np.asarray(rotations, dtype=float), frame.matrix)
    return float(r @ r)


def _setup(segments, assignment, pairs, rotations0, K, lam, frame_pos, fixed, optimize_frame):
    sel = np.flatnonzero(assignment.labels >= 0)
    if len(sel) == 0:
        raise NoDataError("no Manhattan-labeled segments to refine against")
    m, norm = _camera_normals(segments, K, sel)
    keep = norm >= DEGENERATE_CROSS
    sel, m, norm = sel[keep], m[keep], norm[keep]
    m = m / norm[:, None]
    fids = np.array([segments[k].frame_id for k in sel], dtype=np.int64)
    pos = fids if frame_pos is None else np.array([frame_pos[int(f)] for f in fids], dtype=np.int64)
    R0 = np.asarray(rotations0, dtype=float)
    free = [f for f in range(len(R0)) if f not in set(fixed)]
    return _Problem(m, pos, assignment.labels[sel], pairs, R0, lam, free, optimize_frame), sel


def refine_rotations(segments, assignment: ManhattanAssignment, graph: Sequence[tuple[int, int]], rotations0,
                     K: Intrinsics, frame: ManhattanFrame, lam: float = LAMBDA, frame_pos: Optional[dict] = None,
                     fixed: Sequence[int] = (0,), optimize_frame: bool = False, max_iter: int = 100,
                     rel_tol: float = 1e-10, initial_damping: float = 1e-4) -> RefineResult:
    """Damped Gauss-Newton on the refinement objective.

    Frame positions in ``fixed`` keep their initial rotation (gauge).  With
    ``optimize_frame`` the vanishing directions are estimated jointly with the
    rotations instead of being held fixed.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    prob, _ = _setup(segments, assignment, graph, rotations0, K, lam, frame_pos, fixed, optimize_frame)
    R = np.array(rotations0, dtype=float)
    V = frame.matrix.copy()
    r = prob.residuals(R, V)
    cost = float(r @ r)
    history = [cost]
    mu = initial_damping
    it = 0
    if prob.n_params == 0:
        return RefineResult(R, frame, history, 0)
    while it < max_iter and cost > 0:
        it += 1
        J = prob.jacobian(R, V)
        H = J.T @ J
        g = J.T @ r
        improved = False
        while mu < 1e16:
            try:
                step = np.linalg.solve(H + mu * np.eye(len(H)), -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            R_new, V_new = prob.update(R, V, step)
            r_new = prob.residuals(R_new, V_new)
            new_cost = float(r_new @ r_new)
            if new_cost < cost:
                improved = True
                break
            mu *= 10
        if not improved:
            break
        decrease = (cost - new_cost) / cost
        R, V, r, cost = R_new, V_new, r_new, new_cost
        history.append(cost)
        mu = max(mu / 10, 1e-15)
        if decrease < rel_tol:
            break
    return RefineResult(R, ManhattanFrame.from_matrix(V), history, it)


def align_frame(frame: ManhattanFrame, ref: ManhattanFrame) -> ManhattanFrame:
    """Permute and flip ``frame``'s axes to best match ``ref`` while staying right-handed."""
    F, G = frame.matrix, ref.matrix
    out = np.zeros((3, 3))
    used: set[int] = set()
    for k in np.argsort(-np.max(np.abs(G @ F.T), axis=1)):
        dots = G[k] @ F.T
        order = [j for j in np.argsort(-np.abs(dots)) if j not in used]
        j = order[0]
        used.add(j)
        out[k] = F[j] * (1.0 if dots[j] >= 0 else -1.0)
    out[1] = np.cross(out[2], out[0])
    return ManhattanFrame.from_matrix(out)


@dataclass
class RefineLoopResult:
    rotations: np.ndarray
    assignment: ManhattanAssignment
    frame: ManhattanFrame
    outer_iterations: int
    label_counts: list[int]
    cost_histories: list[list[float]]
    converged: bool


def refine_loop(segments, K: Intrinsics, frame: ManhattanFrame, rotations0, gravity=None,
                frame_pos: Optional[dict] = None, lam: float = LAMBDA, classify_deg: float = CLASSIFY_DEG,
                neighbor_deg: float = NEIGHBOR_DEG, max_outer: int = 10, fixed: Sequence[int] = (0,),
                reextract: bool = True) -> RefineLoopResult:
    """Alternate classification, frame re-extraction and rotation refinement until labels are stable.

    A label set that repeats an earlier round (a cycle, typically one segment
    flipping at the classification threshold) also ends the loop.
    """
    R0 = np.array(rotations0, dtype=float)
    R = R0.copy()
    graph = build_neighbor_graph(R0, neighbor_deg)
    assignment = classify_segments(segments, K, R, frame, frame_pos, classify_deg)
    counts = [assignment.n_labeled]
    histories = []
    seen = [assignment.labels.tobytes()]
    converged = False
    outer = 0
    while outer < max_outer:
        outer += 1
        res = refine_rotations(segments, assignment, graph, R0, K, frame, lam, frame_pos, fixed,
                               optimize_frame=True)
        # the smoothness prior always refers to the IMU rotations; only the start point moves
        R, frame = res.rotations, res.frame
        histories.append(res.cost_history)
        if reextract and gravity is not None:
            fresh = estimate_frame(segments, K, R, gravity, frame_pos)
            frame = align_frame(fresh, frame)
        new = classify_segments(segments, K, R, frame, frame_pos, classify_deg)
        counts.append(new.n_labeled)
        key = new.labels.tobytes()
        stable = key == seen[-1]
        if not stable and key in seen:
            log.info("label set repeats an earlier round; stopping")
            stable = True
        seen.append(key)
        assignment = new
        log.info("rotation refinement round %d: %d labeled, cost %.3e", outer, new.n_labeled, res.cost_history[-1])
        if stable:
            converged = True
            break
    return RefineLoopResult(R, assignment, frame, outer, counts, histories, converged)


def mean_rotation_error_deg(rotations, truth) -> float:
    return float(np.degrees(np.mean([geodesic_angle(a, b) for a, b in zip(rotations, truth)])))

"""Evaluation against synthetic ground truth."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .bundle import residual_reprojection
from .coplanarity import FLOOR, KINDS
from .errors import InvalidInputError
from .geometry import geodesic_angle
from .io import PipelineState

log = logging.getLogger(__name__)


@dataclass
class Similarity:
    scale: float
    rotation: np.ndarray
    offset: np.ndarray
    rmse: float
    dof: int = 7

    def apply(self, X) -> np.ndarray:
        return self.scale * np.asarray(X, dtype=float) @ self.rotation.T + self.offset


def _rotation_between(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit ``u`` to unit ``v``."""
    w = np.cross(u, v)
    c = float(u @ v)
    s = np.linalg.norm(w)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        # half turn about any axis orthogonal to u
        a = np.eye(3)[int(np.argmin(np.abs(u)))]
        a = a - (a @ u) * u
        a /= np.linalg.norm(a)
        return 2.0 * np.outer(a, a) - np.eye(3)
    k = w / s
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * Kx + (1 - c) * Kx @ Kx


def similarity_align(X, Y) -> Similarity:
    """Least-squares ``s, R, t`` with ``s R x + t ~ y`` (Umeyama).

    A collinear ``X`` leaves the rotation about the path axis free; then
    only the axis direction and scale are fitted (5 dof) and a warning is
    logged.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    Y = np.asarray(Y, dtype=float).reshape(-1, 3)
    if len(X) != len(Y) or len(X) < 2:
        raise InvalidInputError("need at least two corresponding points")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    if sx[0] == 0:
        raise InvalidInputError("all estimated points coincide")
    if len(X) >= 3 and sx[1] > 1e-9 * sx[0]:
        U, S, Vt = np.linalg.svd(Yc.T @ Xc)
        D = np.eye(3)
        D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
        R = U @ D @ Vt
        s = float(np.trace(np.diag(S) @ D) / np.sum(Xc**2))
        dof = 7
    else:
        log.warning("collinear camera path: rotation about the path axis is not observable")
        u = np.linalg.svd(Xc)[2][0]
        v = np.linalg.svd(Yc)[2][0] if np.any(Yc) else u
        a, b = Xc @ u, Yc @ v
        if a @ b < 0:
            v = -v
            b = -b
        R = _rotation_between(u, v)
        s = float(a @ b / (a @ a))
        dof = 5
    t = my - s * R @ mx
    Z = s * X @ R.T + t
    rmse = float(np.sqrt(np.mean(np.sum((Z - Y) ** 2, axis=1))))
    return Similarity(s, R, t, rmse, dof)


# ---------------------------------------------------------------- report


@dataclass
class EvaluationReport:
    rotation_error_before_deg: dict = field(default_factory=dict)  # mean / max
    rotation_error_after_deg: dict = field(default_factory=dict)
    translation_rmse_m: Optional[float] = None
    translation_rmse_ratio: Optional[float] = None  # of the scene diameter
    scene_diameter_m: Optional[float] = None
    alignment: dict = field(default_factory=dict)
    depth_relative_error: dict = field(default_factory=dict)  # mean / median / max
    coplanarity: dict = field(default_factory=dict)  # kind -> precision / recall / count
    reprojection_before: dict = field(default_factory=dict)  # mean / std (px)
    reprojection_after: dict = field(default_factory=dict)
    registered_ratio: Optional[float] = None
    stage_seconds: dict = field(default_factory=dict)
    absent: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _rot_stats(R, truth) -> dict:
    ang = np.degrees([geodesic_angle(a, b) for a, b in zip(R, truth)])
    return {"mean": float(np.mean(ang)), "max": float(np.max(ang))}


def _segment_gt_line(state: PipelineState, gt) -> np.ndarray:
    """Ground-truth 3D line of each preprocessed segment (majority over merged inputs)."""
    out = np.full(len(state.segments), -1, dtype=np.int64)
    for k, origin in enumerate(state.segment_origin or []):
        votes = Counter(int(gt.segment_line[i]) for i in origin)
        out[k] = min(votes, key=lambda l: (-votes[l], l))
    return out


def _track_gt_line(state: PipelineState, seg_line: np.ndarray) -> dict[int, int]:
    out = {}
    for t in state.tracks:
        votes = Counter(int(seg_line[s]) for _, s in t.observations)
        out[t.track_id] = min(votes, key=lambda l: (-votes[l], l))
    return out


def _gt_depth(gt, line: int, T: np.ndarray, ray: np.ndarray) -> float:
    """Depth along ``ray`` from ``T`` to the closest approach with a ground-truth line."""
    A, B = gt.lines[line]
    d = (B - A) / np.linalg.norm(B - A)
    w = T - A
    b = ray @ d
    denom = 1.0 - b * b
    return float((b * (d @ w) - ray @ w) / denom) if denom > 1e-12 else float("nan")


def coplanarity_scores(state: PipelineState, gt, seg_line: np.ndarray) -> dict:
    """Precision per kind; recall for the floor over tracked floor observations."""
    track_line = _track_gt_line(state, seg_line)
    # estimated axis k corresponds to the ground-truth axis it is closest to
    perm = [int(np.argmax(np.abs(np.asarray(gt.frame) @ state.frame.axis(k)))) for k in range(3)]
    out = {}
    for kind in KINDS:
        rels = [r for r in state.relations if r.kind == kind]
        if kind == FLOOR:
            obs = [(f, s) for r in rels for f, s in r.observations]
            correct = sum(gt.is_floor(int(seg_line[s])) for _, s in obs)
            tracked = {s for t in state.tracks for _, s in t.observations}
            truth = {s for s in tracked if seg_line[s] >= 0 and gt.is_floor(int(seg_line[s]))}
            found = {s for _, s in obs}
            out[kind] = {"count": len(obs), "precision": correct / len(obs) if obs else None,
                         "recall": len(found & truth) / len(truth) if truth else None}
        else:
            ok = sum(gt.coplanar(track_line[r.tracks[0]], track_line[r.tracks[1]], perm[r.normal_axis]) for r in rels)
            # pairwise recall has no ground-truth denominator independent of the detectors' own gating
            out[kind] = {"count": len(rels), "precision": ok / len(rels) if rels else None, "recall": None}
    return out


def evaluate(state: PipelineState, gt, initial_problem=None, timings: Optional[dict] = None) -> EvaluationReport:
    """Fill every available report field; missing inputs are listed in ``absent``."""
    rep = EvaluationReport(stage_seconds=dict(timings or {}))
    ds = state.dataset
    if ds is None:
        rep.absent.append("dataset")
        return rep
    rep.rotation_error_before_deg = _rot_stats(ds.rotations, gt.rotations)
    if state.rotations is not None:
        rep.rotation_error_after_deg = _rot_stats(state.rotations, gt.rotations)
    else:
        rep.absent.append("rotations")
    boxes = np.asarray(gt.room_boxes)
    corners = boxes.reshape(-1, 3)
    rep.scene_diameter_m = float(np.linalg.norm(corners.max(axis=0) - corners.min(axis=0)))
    seg_line = _segment_gt_line(state, gt) if state.segments is not None else None
    if state.relations is not None and state.tracks is not None and seg_line is not None:
        rep.coplanarity = coplanarity_scores(state, gt, seg_line)
    else:
        rep.absent.append("relations")
    sol = state.solution
    if sol is None:
        rep.absent.append("solution")
        return rep
    rep.registered_ratio = sol.registered_ratio
    m = sol.registered
    pos = {int(f): i for i, f in enumerate(ds.frame_ids)}
    Ttrue = np.array([gt.translations[pos[f]] for f in sol.frame_ids])
    if m.sum() >= 2:
        sim = similarity_align(sol.translations[m], Ttrue[m])
        rep.translation_rmse_m = sim.rmse
        rep.translation_rmse_ratio = sim.rmse / rep.scene_diameter_m
        rep.alignment = {"scale": sim.scale, "rotation": sim.rotation.tolist(), "offset": sim.offset.tolist(),
                         "dof": sim.dof}
        if seg_line is not None:
            rel = []
            for (t, f), lam in sorted(sol.depths.items()):
                i = sol.frame_ids.index(f)
                ray = sim.rotation @ sol.rays[(t, f)]
                true = _gt_depth(gt, int(seg_line[sol.observation_segments[(t, f)]]), Ttrue[i], ray)
                if np.isfinite(true) and true > 0:
                    rel.append(abs(sim.scale * lam - true) / true)
            if rel:
                rep.depth_relative_error = {"mean": float(np.mean(rel)), "median": float(np.median(rel)),
                                            "max": float(np.max(rel))}
    else:
        rep.absent.append("alignment")
    if state.ba is not None:
        p = state.ba.problem
        after = [residual_reprojection(p.lines[o.line], o.segment, p.rotations[o.frame], p.translations[o.frame],
                                       p.intrinsics) for o in p.observations]
        rep.reprojection_after = {"mean": float(np.mean(after)) if after else 0.0,
                                  "std": float(np.std(after)) if after else 0.0}
        if initial_problem is not None:
            q = initial_problem
            before = [residual_reprojection(q.lines[o.line], o.segment, q.rotations[o.frame],
                                            q.translations[o.frame], q.intrinsics) for o in q.observations]
            rep.reprojection_before = {"mean": float(np.mean(before)) if before else 0.0,
                                       "std": float(np.std(before)) if before else 0.0}
        else:
            rep.reprojection_before = {"mean": state.ba.initial_reprojection, "std": None}
    else:
        rep.absent.append("ba")
    return rep


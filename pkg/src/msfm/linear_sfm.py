"""Linear structure from motion over camera centers and per-observation depths.

Each tracked segment observation contributes a point ``P = T_i + lam * D``
where ``T_i`` is the camera center, ``D`` the unit global ray through the
segment mid-point and ``lam`` its depth.  Colinearity and coplanarity are
linear in ``(T, lam)``; depths are bounded below by ``eps``.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .coplanarity import FLOOR, CoplanarityRelation
from .errors import NumericError, UnderConstrainedError
from .geometry import Intrinsics, ManhattanFrame, other_axes, pixel_rays
from .tracking import LineTrack

log = logging.getLogger(__name__)

EPS_DEPTH = 1e-3
SCALE_WEIGHT = 1e6
KKT_TOL = 1e-8
RIDGE = 1e-12

COLINEARITY = "colinearity"
COPLANARITY = "coplanarity"
GAUGE = "gauge"


def viewing_ray(segment, K: Intrinsics, R) -> np.ndarray:
    """Unit global ray through the segment mid-point."""
    return pixel_rays(np.asarray(segment.midpoint, dtype=float).reshape(1, 2), K, R)[0]


@dataclass
class Observation:
    track: int
    frame_id: int
    segment: int
    ray: np.ndarray


@dataclass
class LinearSystem:
    """Sparse rows over the unknowns ``[T of non-gauge frames, depths]``.

    ``row_kind`` labels each row; the scale row is last.  ``frames`` lists
    the frame ids whose translations are solved, ``gauge_frame`` is pinned
    at the origin.
    """

    A: sp.csr_matrix
    b: np.ndarray
    row_kind: list[str]
    frames: list[int]
    gauge_frame: int
    observations: list[Observation]
    frame_col: dict[int, int]  # frame id -> first translation column (gauge frame absent)
    n_translation: int

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    @property
    def depth_slice(self) -> slice:
        return slice(self.n_translation, self.n_vars)


def _observations(tracks: Sequence[LineTrack], segments, K: Intrinsics, rotations, frame_pos) -> list[Observation]:
    obs = []
    for t in sorted(tracks, key=lambda t: t.track_id):
        for fid, seg in t.observations:
            pos = fid if frame_pos is None else frame_pos[fid]
            obs.append(Observation(t.track_id, int(fid), int(seg), viewing_ray(segments[seg], K, rotations[pos])))
    return obs


class _Rows:
    def __init__(self):
        self.r, self.c, self.v, self.kind = [], [], [], []

    def add(self, entries: dict[int, float], kind: str) -> None:
        row = len(self.kind)
        for col, val in entries.items():
            if val != 0.0:
                self.r.append(row)
                self.c.append(col)
                self.v.append(val)
        self.kind.append(kind)


def _point_terms(o: Observation, sign: float, n: np.ndarray, frame_col, dcol) -> dict[int, float]:
    """Coefficients of ``sign * (T + lam D) . n`` for one observation."""
    out: dict[int, float] = {}
    c = frame_col.get(o.frame_id)
    if c is not None:
        for k in range(3):
            out[c + k] = sign * n[k]
    out[dcol] = sign * float(o.ray @ n)
    return out


def _merge(a: dict[int, float], b: dict[int, float]) -> dict[int, float]:
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0.0) + v
    return out


def constraint_graph(tracks: Sequence[LineTrack], relations: Sequence[CoplanarityRelation], frame_ids):
    """Frame connectivity implied by tracks and relations.

    Nodes are frames followed by tracks; a track links every frame that
    observes it and relations link the tracks they bind.
    """
    frame_ids = [int(f) for f in frame_ids]
    fidx = {f: i for i, f in enumerate(frame_ids)}
    tidx = {t.track_id: len(frame_ids) + k for k, t in enumerate(tracks)}
    r, c = [], []
    for t in tracks:
        for f, _ in t.observations:
            r.append(fidx[f])
            c.append(tidx[t.track_id])
    for rel in relations:
        ts = [tidx[t] for t in rel.tracks if t in tidx]
        for a, b in zip(ts[:-1], ts[1:]):
            r.append(a)
            c.append(b)
    n = len(frame_ids) + len(tracks)
    G = sp.coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    n_comp, lab = connected_components(G, directed=False)
    return n_comp, lab[: len(frame_ids)], lab[len(frame_ids):]


def components(tracks, relations, frame_ids) -> list[list[int]]:
    """Frame-id groups that share constraints, largest first (ties by smallest frame id)."""
    _, flab, _ = constraint_graph(tracks, relations, frame_ids)
    groups: dict[int, list[int]] = defaultdict(list)
    for f, l in zip(frame_ids, flab):
        groups[int(l)].append(int(f))
    return sorted(groups.values(), key=lambda g: (-len(g), g[0]))


def assemble(tracks: Sequence[LineTrack], relations: Sequence[CoplanarityRelation], segments, K: Intrinsics,
             rotations, frame: ManhattanFrame, frame_ids=None, frame_pos: Optional[dict] = None,
             scale_weight: float = SCALE_WEIGHT) -> LinearSystem:
    """Colinearity, coplanarity and gauge rows over the given tracks.

    Only tracks and relations passed in are used; restricting them to one
    connected component is the caller's job (see :func:`solve_linear`).
    """
    tracks = sorted(tracks, key=lambda t: t.track_id)
    if not tracks:
        raise UnderConstrainedError("no tracks to constrain")
    obs = _observations(tracks, segments, K, rotations, frame_pos)
    used = sorted({o.frame_id for o in obs})
    if frame_ids is not None:
        order = {int(f): i for i, f in enumerate(frame_ids)}
        used = sorted(used, key=lambda f: order[f])
    gauge = used[0]
    frame_col = {f: 3 * k for k, f in enumerate(f for f in used if f != gauge)}
    n_t = 3 * (len(used) - 1)
    dcol = {(o.track, o.frame_id): n_t + k for k, o in enumerate(obs)}
    by_track: dict[int, list[Observation]] = defaultdict(list)
    for o in obs:
        by_track[o.track].append(o)
    label = {t.track_id: t.label for t in tracks}
    rows = _Rows()
    for tid, tobs in by_track.items():
        normals = [frame.axis(a) for a in other_axes(label[tid])]
        for x in range(len(tobs)):
            for y in range(x + 1, len(tobs)):
                oi, oj = tobs[x], tobs[y]
                for n in normals:
                    rows.add(_merge(_point_terms(oi, 1.0, n, frame_col, dcol[(tid, oi.frame_id)]),
                                    _point_terms(oj, -1.0, n, frame_col, dcol[(tid, oj.frame_id)])), COLINEARITY)
    seg_obs = {o.segment: o for o in obs}
    seen = set()
    for rel in relations:
        n = frame.axis(rel.normal_axis)
        members = [seg_obs[s] for _, s in rel.observations if s in seg_obs]
        if rel.kind == FLOOR:
            links = list(zip(members[:-1], members[1:]))
        else:
            if len(members) != 2:
                continue
            key = (members[0].frame_id, members[0].track, members[1].track, rel.normal_axis)
            if key in seen:
                continue  # the same pair found by several detectors in one frame
            seen.add(key)
            links = [(members[0], members[1])]
        for oa, ob in links:
            rows.add(_merge(_point_terms(oa, 1.0, n, frame_col, dcol[(oa.track, oa.frame_id)]),
                            _point_terms(ob, -1.0, n, frame_col, dcol[(ob.track, ob.frame_id)])), COPLANARITY)
    n_rows = len(rows.kind)
    n_vars = n_t + len(obs)
    # soft scale gauge: sqrt(w) * (mean depth - 1)
    w = np.sqrt(scale_weight)
    for k in range(len(obs)):
        rows.r.append(n_rows)
        rows.c.append(n_t + k)
        rows.v.append(w / len(obs))
    rows.kind.append(GAUGE)
    A = sp.csr_matrix((rows.v, (rows.r, rows.c)), shape=(n_rows + 1, n_vars))
    b = np.zeros(n_rows + 1)
    b[-1] = w
    return LinearSystem(A, b, rows.kind, used, gauge, obs, frame_col, n_t)


# ---------------------------------------------------------------- QP


@dataclass
class KKTResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)

    def to_dict(self) -> dict:
        return {"stationarity": self.stationarity, "primal": self.primal, "dual": self.dual,
                "complementarity": self.complementarity}


def kkt_from_gradient(grad: np.ndarray, x: np.ndarray, lower: np.ndarray, scale: float = 1.0,
                      primal_eq: float = 0.0) -> KKTResiduals:
    """KKT residuals for bound constraints ``x >= lower`` given the Lagrangian gradient.

    Stationarity and multiplier terms are divided by ``scale``.
    """
    scale = max(1.0, float(scale))
    bounded = np.isfinite(lower)
    gap = np.where(bounded, x - lower, np.inf)
    active = bounded & (gap <= 1e-12 * np.maximum(1.0, np.abs(lower)))
    free = ~active
    stat = float(np.abs(grad[free]).max(initial=0.0)) / scale
    dual = float(np.maximum(-grad[active], 0.0).max(initial=0.0)) / scale
    primal = max(float(np.maximum(lower[bounded] - x[bounded], 0.0).max(initial=0.0)), float(primal_eq))
    comp_terms = grad[bounded] * np.where(np.isfinite(gap[bounded]), gap[bounded], 0.0)
    comp = float(np.abs(comp_terms[active[bounded]]).max(initial=0.0)) / scale
    return KKTResiduals(stat, primal, dual, comp)


def kkt_residuals(H: sp.spmatrix, g: np.ndarray, x: np.ndarray, lower: np.ndarray) -> KKTResiduals:
    """KKT residuals of ``min 1/2 x'Hx + g'x  s.t. x >= lower`` (``-inf`` = unbounded).

    Stationarity and multiplier terms are scaled by ``max(1, |g|_inf)``.
    """
    return kkt_from_gradient(H @ x + g, x, np.asarray(lower, dtype=float), float(np.abs(g).max(initial=0.0)))


def _solve_free(H: sp.csc_matrix, g: np.ndarray, x: np.ndarray, free: np.ndarray,
                C: Optional[sp.csr_matrix] = None, d: Optional[np.ndarray] = None):
    """Minimizer over ``free`` variables with the others held at ``x`` and ``Cx = d``.

    Returns the new point and the equality multipliers.
    """
    fidx = np.flatnonzero(free)
    fixed = np.flatnonzero(~free)
    m = 0 if C is None else C.shape[0]
    out = x.copy()
    if len(fidx) == 0:
        return out, np.zeros(m)
    rhs = -g[fidx]
    if len(fixed):
        rhs = rhs - H[fidx][:, fixed] @ x[fixed]
    Hff = H[fidx][:, fidx]
    if m:
        Cf = C[:, fidx]
        eq = d - (C[:, fixed] @ x[fixed] if len(fixed) else 0.0)
        M = sp.bmat([[Hff, Cf.T], [Cf, None]], format="csc")
        rhs = np.concatenate([rhs, eq])
    else:
        M = Hff.tocsc()
    try:
        lu = splu(M)
        sol = lu.solve(rhs)
    except RuntimeError as exc:
        raise UnderConstrainedError(f"singular reduced system: {exc}") from None
    if not np.all(np.isfinite(sol)):
        raise NumericError("non-finite values in the reduced solve")
    # one step of iterative refinement keeps the stationarity residual near machine precision
    sol = sol + lu.solve(rhs - M @ sol)
    out[fidx] = sol[: len(fidx)]
    return out, sol[len(fidx):]


@dataclass
class QPResult:
    x: np.ndarray
    iterations: int
    kkt: KKTResiduals
    active: np.ndarray
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))


def solve_bounded_qp(H, g: np.ndarray, lower: np.ndarray, C=None, d=None, max_iter: int = 1000) -> QPResult:
    """Primal active-set method for ``min 1/2 x'Hx + g'x  s.t. x >= lower, Cx = d``.

    H must be positive definite on the null space of C.  Bounds set to
    ``-inf`` are absent.  The working set grows by the blocking bound and
    shrinks by the most negative multiplier (lowest index on ties), which
    keeps runs deterministic.
    """
    H = sp.csc_matrix(H)
    n = len(g)
    lower = np.asarray(lower, dtype=float)
    if C is not None:
        C = sp.csr_matrix(C)
        d = np.zeros(C.shape[0]) if d is None else np.asarray(d, dtype=float)
    bounded = np.isfinite(lower)
    scale = max(1.0, float(np.abs(g).max(initial=0.0)))
    working = np.zeros(n, dtype=bool)
    x, nu = _solve_free(H, g, np.zeros(n), np.ones(n, dtype=bool), C, d)
    # feasible start: clamp the violated bounds, then re-solve with them fixed
    viol = bounded & (x < lower)
    working |= viol
    if viol.any():
        x, nu = _solve_free(H, g, np.where(working, lower, x), ~working, C, d)
    it = 0
    while it < max_iter:
        it += 1
        viol = ~working & bounded & (x < lower)
        if viol.any():
            # the re-solve left the feasible set; fix those bounds as well
            working |= viol
            x, nu = _solve_free(H, g, np.where(working, lower, x), ~working, C, d)
            continue
        grad = H @ x + g
        if C is not None:
            grad = grad + C.T @ nu
        mult = np.where(working, grad, np.inf)
        k = int(np.argmin(mult))
        if not working.any() or mult[k] >= -1e-14 * scale:
            break
        working[k] = False
        target, nu_t = _solve_free(H, g, np.where(working, lower, x), ~working, C, d)
        step = target - x
        move = ~working & bounded & (step < 0)
        ratios = np.full(n, np.inf)
        ratios[move] = (lower[move] - x[move]) / step[move]
        alpha = min(1.0, max(float(ratios.min(initial=np.inf)), 0.0))
        if alpha < 1.0:
            x = x + alpha * step
            block = np.flatnonzero(move & (ratios <= alpha))
            x[block] = lower[block]
            working[block] = True
            x, nu = _solve_free(H, g, np.where(working, lower, x), ~working, C, d)
        else:
            x, nu = target, nu_t
    grad = H @ x + g
    eq = 0.0
    if C is not None:
        grad = grad + C.T @ nu
        eq = float(np.abs(C @ x - d).max(initial=0.0))
    return QPResult(x, it, kkt_from_gradient(grad, x, lower, scale, eq), working, nu)


# ---------------------------------------------------------------- solution


@dataclass
class LinearSolution:
    frame_ids: list[int]
    translations: np.ndarray  # (n_frames, 3); NaN for unregistered frames
    registered: np.ndarray  # (n_frames,) bool
    depths: dict[tuple[int, int], float]  # (track, frame_id) -> depth
    observation_segments: dict[tuple[int, int], int]  # (track, frame_id) -> segment index
    rays: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    kkt: dict = field(default_factory=dict)
    iterations: int = 0
    objective: float = 0.0
    components: list[list[int]] = field(default_factory=list)
    n_active: int = 0
    row_residuals: dict = field(default_factory=dict)

    @property
    def registered_ratio(self) -> float:
        return float(self.registered.mean()) if len(self.registered) else 0.0

    def point(self, track: int, frame_id: int) -> np.ndarray:
        i = self.frame_ids.index(frame_id)
        return self.translations[i] + self.depths[(track, frame_id)] * self.rays[(track, frame_id)]

    def to_record(self) -> dict:
        return {
            "frame_ids": [int(f) for f in self.frame_ids],
            "translations": [[None if not np.isfinite(v) else float(v) for v in t] for t in self.translations],
            "registered": [bool(r) for r in self.registered],
            "registered_ratio": self.registered_ratio,
            "depths": [{"track": t, "frame_id": f, "segment": self.observation_segments[(t, f)], "depth": d,
                        "ray": [float(v) for v in self.rays[(t, f)]]}
                       for (t, f), d in sorted(self.depths.items())],
            "kkt": self.kkt,
            "iterations": self.iterations,
            "objective": self.objective,
            "components": self.components,
            "n_active": self.n_active,
            "row_residuals": self.row_residuals,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LinearSolution":
        T = np.array([[np.nan if v is None else v for v in t] for t in rec["translations"]], dtype=float)
        T = T.reshape(-1, 3)
        depths, segs, rays = {}, {}, {}
        for d in rec["depths"]:
            key = (int(d["track"]), int(d["frame_id"]))
            depths[key] = float(d["depth"])
            segs[key] = int(d["segment"])
            rays[key] = np.array(d["ray"], dtype=float)
        return cls([int(f) for f in rec["frame_ids"]], T, np.array(rec["registered"], dtype=bool), depths, segs,
                   rays, dict(rec.get("kkt", {})), int(rec.get("iterations", 0)), float(rec.get("objective", 0.0)),
                   [list(map(int, c)) for c in rec.get("components", [])], int(rec.get("n_active", 0)),
                   dict(rec.get("row_residuals", {})))


def registered_ratio(solution: LinearSolution) -> float:
    return solution.registered_ratio


def _translation_rank_ok(system: LinearSystem) -> list[int]:
    """Frames whose translation columns are rank deficient in the assembled rows."""
    bad = []
    A = system.A.tocsc()
    for f, c in system.frame_col.items():
        block = A[:, c : c + 3]
        rows = np.unique(block.nonzero()[0])
        if len(rows) < 3 or np.linalg.matrix_rank(block[rows].toarray(), tol=1e-9) < 3:
            bad.append(f)
    return bad


def _solve_system(system: LinearSystem, eps_depth: float, scale_weight: float) -> QPResult:
    """Bounded least squares on the assembled rows.

    The dense scale row would fill every depth-depth entry of the normal
    matrix, so the mean depth is carried by an extra variable ``s`` tied to
    the depths by one equality; ``w (s - 1)^2`` replaces the soft row and
    the objective is unchanged.
    """
    A, b = system.A, system.b
    n = system.n_vars
    A0 = A[:-1]
    H = (A0.T @ A0).tocsc()
    # a relative ridge keeps the reduced systems factorizable when a component is only partly rigid
    ridge = RIDGE * max(1.0, float(H.diagonal().max(initial=0.0)))
    H = sp.block_diag([H + ridge * sp.identity(n), sp.csc_matrix([[scale_weight]])], format="csc")
    g = np.zeros(n + 1)
    g[:n] = -(A0.T @ b[:-1])
    g[n] = -scale_weight
    n_obs = n - system.n_translation
    C = sp.lil_matrix((1, n + 1))
    C[0, system.n_translation:n] = 1.0 / n_obs
    C[0, n] = -1.0
    lower = np.full(n + 1, -np.inf)
    lower[system.depth_slice] = eps_depth
    res = solve_bounded_qp(H, g, lower, C.tocsr(), np.zeros(1))
    x = res.x[:n]
    # report KKT on the original soft-row problem, gradient A'(Ax - b)
    grad = A.T @ (A @ x - b)
    scale = float(np.abs(A.T @ b).max(initial=0.0))
    kkt = kkt_from_gradient(grad, x, lower[:n], scale)
    return QPResult(x, res.iterations, kkt, res.active[:n], res.multipliers)


def solve_linear(tracks: Sequence[LineTrack], relations: Sequence[CoplanarityRelation], segments, K: Intrinsics,
                 rotations, frame: ManhattanFrame, frame_ids, frame_pos: Optional[dict] = None,
                 eps_depth: float = EPS_DEPTH, scale_weight: float = SCALE_WEIGHT) -> LinearSolution:
    """Solve the largest connected component; frames outside it stay unregistered."""
    frame_ids = [int(f) for f in frame_ids]
    comps = components(tracks, relations, frame_ids)
    comps = [c for c in comps if len(c) >= 2 or any(c[0] in t.frames for t in tracks)]
    if not tracks or not comps:
        raise UnderConstrainedError("no tracks to constrain")
    dropped: set[int] = set()
    while True:
        main = set(comps[0]) - dropped
        sub_tracks = _restrict_tracks(tracks, main)
        sub_rel = _restrict_relations(relations, sub_tracks)
        # components can split once frames are dropped
        sub_comps = components(sub_tracks, sub_rel, sorted(main, key=frame_ids.index))
        if not sub_tracks:
            raise UnderConstrainedError("no frame has a fully constrained translation")
        keep = set(sub_comps[0])
        if keep != main:
            comps = [sorted(keep, key=frame_ids.index)]
            dropped = set()
            continue
        system = assemble(sub_tracks, sub_rel, segments, K, rotations, frame, frame_ids, frame_pos, scale_weight)
        bad = _translation_rank_ok(system)
        if not bad:
            break
        log.info("dropping %d frames with under-constrained translation", len(bad))
        dropped |= set(bad)
    A, b = system.A, system.b
    res = _solve_system(system, eps_depth, scale_weight)
    x = res.x
    r = A @ x - b
    T = np.full((len(frame_ids), 3), np.nan)
    registered = np.zeros(len(frame_ids), dtype=bool)
    for f in system.frames:
        i = frame_ids.index(f)
        registered[i] = True
        c = system.frame_col.get(f)
        T[i] = np.zeros(3) if c is None else x[c : c + 3]
    depths, segs, rays = {}, {}, {}
    for k, o in enumerate(system.observations):
        key = (o.track, o.frame_id)
        depths[key] = float(x[system.n_translation + k])
        segs[key] = o.segment
        rays[key] = o.ray
    kinds = np.array(system.row_kind)
    row_res = {k: float(np.sqrt(np.mean(r[kinds == k] ** 2))) for k in (COLINEARITY, COPLANARITY, GAUGE)
               if np.any(kinds == k)}
    all_comps = components(tracks, relations, frame_ids)
    sol = LinearSolution(frame_ids, T, registered, depths, segs, rays, res.kkt.to_dict(), res.iterations,
                         float(r @ r), all_comps, int(res.active.sum()), row_res)
    log.info("linear SfM: %d/%d frames, %d depths, %d active bounds, KKT %.2e", registered.sum(), len(frame_ids),
             len(depths), sol.n_active, res.kkt.max)
    return sol


def _restrict_tracks(tracks, frames: set[int]) -> list[LineTrack]:
    out = []
    for t in tracks:
        obs = [(f, s) for f, s in t.observations if f in frames]
        if len(obs) >= 2:
            out.append(LineTrack(t.track_id, t.label, obs))
    return out


def _restrict_relations(relations, tracks) -> list[CoplanarityRelation]:
    segs = {s for t in tracks for s in t.segments}
    tids = {t.track_id for t in tracks}
    out = []
    for rel in relations:
        obs = tuple(o for o in rel.observations if o[1] in segs)
        if rel.kind == FLOOR:
            kept = tuple(t for t in rel.tracks if t in tids)
            if len(kept) >= 2 and len(obs) >= 2:
                out.append(CoplanarityRelation(rel.kind, kept, obs, rel.normal_axis, rel.plane_normal))
        elif len(obs) == 2:
            out.append(rel)
    return out

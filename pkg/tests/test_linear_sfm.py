import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from msfm.coplanarity import FLOOR, CoplanarityRelation
from msfm.errors import UnderConstrainedError
from msfm.geometry import Intrinsics, LineSegment2D, ManhattanFrame
from msfm.linear_sfm import (COLINEARITY, COPLANARITY, GAUGE, KKT_TOL, LinearSolution, _restrict_relations,
                             _restrict_tracks, assemble, components, kkt_residuals, solve_bounded_qp, solve_linear,
                             viewing_ray)
from msfm.metrics import _gt_depth, _segment_gt_line, evaluate
from msfm.pipeline import run_in_memory
from msfm.synth import SceneConfig, generate_scene
from msfm.tracking import LineTrack

K = Intrinsics(500.0, 500.0, 320.0, 200.0, 640, 400)
I3 = ManhattanFrame.from_matrix(np.eye(3))


# ---------------------------------------------------------------- QP


def enumerate_qp(H, g, lower):
    """Exhaustive active-set oracle for a small strictly convex bound-constrained QP."""
    n = len(g)
    best = None
    for r in range(n + 1):
        for act in itertools.combinations([k for k in range(n) if np.isfinite(lower[k])], r):
            act = list(act)
            free = [k for k in range(n) if k not in act]
            x = np.array(lower, dtype=float)
            x[free] = 0.0
            if free:
                rhs = -g[free] - H[np.ix_(free, act)] @ x[act]
                x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
            bounded = np.isfinite(lower)
            if np.any(x[bounded] < lower[bounded] - 1e-12):
                continue
            mult = (H @ x + g)[act]
            if np.any(mult < -1e-12):
                continue
            f = 0.5 * x @ H @ x + g @ x
            if best is None or f < best[0]:
                best = (f, x)
    return best[1]


def test_qp_matches_enumeration():
    rng = np.random.default_rng(0)
    n_active = 0
    for _ in range(200):
        M = rng.normal(size=(3, 3))
        H = M @ M.T + 0.1 * np.eye(3)
        g = rng.normal(size=3)
        lower = np.where(rng.uniform(size=3) < 0.8, rng.normal(scale=0.5, size=3), -np.inf)
        res = solve_bounded_qp(H, g, lower)
        np.testing.assert_allclose(res.x, enumerate_qp(H, g, lower), atol=1e-10)
        assert res.kkt.max < KKT_TOL
        n_active += res.active.sum()
    assert n_active > 50  # the sample exercises active bounds


def test_qp_clamped_depth_multiplier():
    # unconstrained minimizer x = (-1, 2, 0.5); the first variable clamps at 1e-3
    H = np.diag([2.0, 1.0, 4.0])
    g = -H @ np.array([-1.0, 2.0, 0.5])
    lower = np.array([1e-3, 1e-3, 1e-3])
    res = solve_bounded_qp(H, g, lower)
    np.testing.assert_allclose(res.x, [1e-3, 2.0, 0.5], atol=1e-12)
    assert res.active.tolist() == [True, False, False]
    grad = H @ res.x + g
    assert grad[0] > 0  # nonnegative multiplier
    kkt = kkt_residuals(sp.csc_matrix(H), g, res.x, lower)
    assert kkt.max < 1e-12


def test_qp_with_equality():
    H = np.eye(3)
    g = np.array([-1.0, -2.0, -3.0])
    C = np.array([[1.0, 1.0, 1.0]])
    res = solve_bounded_qp(H, g, np.array([0.0, 0.0, 2.9]), C, np.array([3.0]))
    assert res.x.sum() == pytest.approx(3.0, abs=1e-12)
    assert res.x[2] >= 2.9 - 1e-12
    assert res.kkt.max < 1e-10


# ---------------------------------------------------------------- assembly


LINES = [(0, np.array([-1.0, 0.0, 3.0]), np.array([1.0, 0.0, 3.0])),  # x-directed
         (1, np.array([0.5, -1.0, 3.5]), np.array([0.5, 1.0, 3.5])),  # y-directed
         (2, np.array([-0.6, 0.4, 2.5]), np.array([-0.6, 0.4, 4.5])),  # z-directed
         (0, np.array([-0.8, 0.7, 4.0]), np.array([0.9, 0.7, 4.0])),
         (1, np.array([-0.3, -0.9, 2.8]), np.array([-0.3, 0.6, 2.8])),
         (2, np.array([0.7, -0.5, 3.0]), np.array([0.7, -0.5, 5.0]))]


def centers(n_frames):
    return np.array([[0.2 * f, 0.05 * f * f, 0.0] for f in range(n_frames)])


def two_view_track(n_frames=2, lines=LINES[:1]):
    """Fronto-parallel Manhattan lines seen by cameras looking along +z from different centers."""
    segs, tracks = [], []
    for t, (label, A, B) in enumerate(lines):
        obs = []
        for f, T in enumerate(centers(n_frames)):
            pix = [K.K @ ((p - T) / (p - T)[2]) for p in (A, B)]
            obs.append((f, len(segs)))
            segs.append(LineSegment2D(f, tuple(pix[0][:2]), tuple(pix[1][:2])))
        tracks.append(LineTrack(t, label, obs))
    return segs, tracks, np.repeat(np.eye(3)[None], n_frames, axis=0)


def test_viewing_ray_principal_point():
    s = LineSegment2D(0, (300.0, 200.0), (340.0, 200.0))
    np.testing.assert_allclose(viewing_ray(s, K, np.eye(3)), [0, 0, 1], atol=1e-15)


@pytest.mark.parametrize("f", [2, 3, 5])
def test_colinearity_row_count(f):
    segs, tracks, R = two_view_track(f)
    sys_ = assemble(tracks, [], segs, K, R, I3)
    assert sys_.row_kind.count(COLINEARITY) == 2 * f * (f - 1) // 2
    assert sys_.row_kind[-1] == GAUGE
    assert np.diff(sys_.A.indptr)[:-1].max() <= 8


def test_floor_rows_are_chained():
    segs, tracks, R = two_view_track(4)
    segs = segs + [LineSegment2D(f, (10.0, 300.0 + f), (200.0, 310.0 + f)) for f in range(4)]
    tracks = tracks + [LineTrack(1, 1, [(f, 4 + f) for f in range(4)])]
    obs = tuple(sorted([(f, f) for f in range(4)] + [(f, 4 + f) for f in range(4)]))
    rel = CoplanarityRelation(FLOOR, (0, 1), obs, 2, I3.axis(2))
    sys_ = assemble(tracks, [rel], segs, K, R, I3)
    assert sys_.row_kind.count(COPLANARITY) == 7


def test_no_tracks():
    with pytest.raises(UnderConstrainedError):
        assemble([], [], [], K, [], I3)


def test_single_line_leaves_translation_free():
    segs, tracks, R = two_view_track(3, LINES[:1])
    with pytest.raises(UnderConstrainedError):
        solve_linear(tracks, [], segs, K, R, I3, [0, 1, 2])


def test_six_line_solution():
    segs, tracks, R = two_view_track(3, LINES)
    sol = solve_linear(tracks, [], segs, K, R, I3, [0, 1, 2])
    assert sol.registered_ratio == 1.0
    assert max(sol.kkt.values()) < KKT_TOL
    truth = {}
    for t, (_, A, B) in enumerate(LINES):
        for f, T in enumerate(centers(3)):
            ray = viewing_ray(segs[tracks[t].observations[f][1]], K, np.eye(3))
            # closest approach of the mid-point ray to the 3D line
            d = (B - A) / np.linalg.norm(B - A)
            w, b = T - A, ray @ d
            truth[(t, f)] = (b * (d @ w) - ray @ w) / (1 - b * b)
    s = 1.0 / np.mean(list(truth.values()))
    for key, lam in sol.depths.items():
        assert lam == pytest.approx(s * truth[key], rel=1e-7)  # the solver ridge biases by ~1e-8 here
    np.testing.assert_allclose(sol.translations, s * centers(3), atol=1e-7)


# ---------------------------------------------------------------- scenes


@pytest.fixture(scope="module")
def solved(small_scene):
    ds, gt = small_scene
    return ds, gt, run_in_memory(ds, stages=("preprocess", "frame", "rotations", "tracks", "relations", "solution"))


def test_noise_free_recovery(solved):
    ds, gt, state = solved
    sol = state.solution
    assert sol.registered_ratio == 1.0
    assert max(sol.kkt.values()) < KKT_TOL
    rep = evaluate(state, gt)
    assert rep.translation_rmse_ratio < 1e-6
    assert rep.depth_relative_error["max"] < 1e-6


def test_noise_free_rays_hit_ground_truth(solved):
    ds, gt, state = solved
    sol = state.solution
    seg_line = _segment_gt_line(state, gt)
    for (t, f), seg in list(sol.observation_segments.items())[:200]:
        i = list(ds.frame_ids).index(f)
        ray = sol.rays[(t, f)]
        lam = _gt_depth(gt, int(seg_line[seg]), gt.translations[i], ray)
        A, B = gt.lines[seg_line[seg]]
        d = (B - A) / np.linalg.norm(B - A)
        P = gt.translations[i] + lam * ray
        off = (P - A) - ((P - A) @ d) * d
        assert lam > 0 and np.linalg.norm(off) < 1e-9


def test_objective_not_above_ground_truth(solved):
    ds, gt, state = solved
    sol = state.solution
    pos = {int(f): i for i, f in enumerate(ds.frame_ids)}
    sys_ = assemble(state.tracks, state.relations, state.segments, ds.intrinsics, state.rotations, state.frame,
                    ds.frame_ids, pos)
    seg_line = _segment_gt_line(state, gt)
    Tg = gt.translations[pos[sys_.gauge_frame]]
    depths = np.array([_gt_depth(gt, int(seg_line[o.segment]), gt.translations[pos[o.frame_id]], o.ray)
                       for o in sys_.observations])
    s = 1.0 / depths.mean()
    x = np.zeros(sys_.n_vars)
    for f, c in sys_.frame_col.items():
        x[c : c + 3] = s * (gt.translations[pos[f]] - Tg)
    x[sys_.depth_slice] = s * depths
    r_gt = sys_.A @ x - sys_.b
    assert sol.objective <= r_gt @ r_gt + 1e-12


def test_zero_translation_scene():
    ds, gt = generate_scene(SceneConfig(n_frames=24, sweep_deg=36.0, width=320, height=200, n_wall_lines=60,
                                        n_floor_lines=15, radius=0.0, seed=3))
    state = run_in_memory(ds, stages=("preprocess", "frame", "rotations", "tracks", "relations", "solution"))
    T = state.solution.translations[state.solution.registered]
    assert np.abs(T - T[0]).max() < 1e-8


def test_disjoint_halves(solved):
    ds, gt, state = solved
    frames = [int(f) for f in ds.frame_ids[:6]] + [int(f) for f in ds.frame_ids[12:18]]
    second = [LineTrack(t.track_id + 10**6, t.label, t.observations)
              for t in _restrict_tracks(state.tracks, set(frames[6:]))]
    tracks = _restrict_tracks(state.tracks, set(frames[:6])) + second
    comps = components(tracks, [], frames)
    assert sorted(map(sorted, comps)) == [frames[:6], frames[6:]]
    pos = {int(f): i for i, f in enumerate(ds.frame_ids)}
    sol = solve_linear(tracks, [], state.segments, ds.intrinsics, state.rotations, state.frame, frames, pos)
    assert sol.registered_ratio == 0.5
    assert sol.registered.tolist() == [True] * 6 + [False] * 6


def test_solution_record_round_trip(solved):
    sol = solved[2].solution
    back = LinearSolution.from_record(sol.to_record())
    assert back.to_record() == sol.to_record()


def test_deterministic(solved):
    ds, gt, state = solved
    pos = {int(f): i for i, f in enumerate(ds.frame_ids)}
    again = solve_linear(state.tracks, state.relations, state.segments, ds.intrinsics, state.rotations, state.frame,
                         ds.frame_ids, pos)
    assert again.to_record() == state.solution.to_record()

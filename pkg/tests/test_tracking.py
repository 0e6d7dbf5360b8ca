import math
from collections import defaultdict

import numpy as np
import pytest

from msfm.errors import DegenerateWarpError, InsufficientDataError
from msfm.geometry import Intrinsics, LineSegment2D, exp_so3
from msfm.manhattan import estimate_frame
from msfm.preprocess import preprocess_segments
from msfm.rotation import classify_segments
from msfm.tracking import (LineTrack, PairMatch, candidate_pairs, form_tracks, homography_dlt, match_all, match_pair,
                           pair_homography, segment_distance, track_index, tracks_from_record, tracks_to_record,
                           transfer)

K = Intrinsics(500.0, 500.0, 320.0, 200.0, 640, 400)  # min side 400 -> 20 px gate


def pan(n, step_deg):
    base = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
    return np.array([base @ exp_so3([0, 0, math.radians(k * step_deg)]).T for k in range(n)])


# ---------------------------------------------------------------- pairs and homographies


def test_candidate_pairs_identical():
    assert len(candidate_pairs(np.repeat(np.eye(3)[None], 4, axis=0))) == 6


def test_candidate_pairs_one_degree_pan():
    pairs = candidate_pairs(pan(30, 1.0))
    assert pairs == [(i, i + 1) for i in range(29)]


def test_candidate_pairs_brute_force():
    rng = np.random.default_rng(0)
    R = np.array([exp_so3(rng.normal(scale=0.02, size=3)) for _ in range(40)])
    expected = [(i, j) for i in range(40) for j in range(i + 1, 40)
                if math.degrees(math.acos(np.clip(R[i, 2] @ R[j, 2], -1, 1))) < 2.0]
    assert candidate_pairs(R) == expected


def test_homography_identity_for_same_frame():
    R = pan(3, 1.0)
    H = pair_homography(1, 1, K, R)
    np.testing.assert_allclose(H, np.eye(3), atol=1e-12)
    assert np.linalg.norm(pair_homography(0, 1, K, R)) == pytest.approx(math.sqrt(3))


def test_homography_exact_for_pure_rotation(rng):
    R = np.array([exp_so3(rng.normal(scale=0.05, size=3)) for _ in range(2)])
    X = rng.uniform(-2, 2, size=(50, 3)) + [0, 0, 6]
    X = X @ R[0]  # camera-0 coordinates in front of the camera
    def proj(Rk):
        x = (X @ Rk.T) @ K.K.T
        return x[:, :2] / x[:, 2:]
    H = pair_homography(0, 1, K, R)
    assert np.abs(transfer(H, proj(R[0])) - proj(R[1])).max() < 1e-8


def test_homography_small_parallax(small_scene):
    ds, gt = small_scene
    i, j = 3, 4
    H = pair_homography(i, j, ds.intrinsics, gt.rotations)
    pts = gt.lines.reshape(-1, 3)
    def proj(k):
        x = (pts - gt.translations[k]) @ gt.rotations[k].T
        ok = x[:, 2] > 0.5
        x = x @ ds.intrinsics.K.T
        return x[:, :2] / x[:, 2:], ok
    a, oka = proj(i)
    b, okb = proj(j)
    m = oka & okb & (np.abs(a[:, 0]) < 2 * ds.intrinsics.width) & (np.abs(a[:, 1]) < 2 * ds.intrinsics.height)
    err = np.linalg.norm(transfer(H, a[m]) - b[m], axis=1)
    assert err.max() < 2.0


def test_dlt_recovers_homography(rng):
    Htrue = np.array([[1.01, 0.02, 3.0], [-0.01, 0.99, -2.0], [1e-5, 2e-5, 1.0]])
    src = rng.uniform(0, 600, size=(30, 2))
    dst = transfer(Htrue, src)
    H = homography_dlt(src, dst)
    np.testing.assert_allclose(transfer(H, src), dst, atol=1e-7)
    dst_noisy = dst.copy()
    dst_noisy[:3] += 50.0  # outliers
    plain = np.abs(transfer(homography_dlt(src, dst_noisy), src[3:]) - dst[3:]).max()
    Hr = pair_homography(0, 1, K, None, matches=(src, dst_noisy))
    assert np.abs(transfer(Hr, src[3:]) - dst[3:]).max() < 0.2 * plain


def test_dlt_needs_four_points():
    with pytest.raises(InsufficientDataError):
        pair_homography(0, 1, K, None, matches=(np.zeros((3, 2)), np.zeros((3, 2))))


# ---------------------------------------------------------------- distances


def seg(f, p, q):
    return LineSegment2D(f, p, q)


def test_distance_zero_on_same_line():
    assert segment_distance(seg(0, (0, 0), (10, 10)), seg(1, (20, 20), (40, 40)), np.eye(3)) == pytest.approx(0, abs=1e-12)


def test_distance_parallel_offset():
    assert segment_distance(seg(0, (0, 0), (100, 0)), seg(1, (10, 7), (90, 7)), np.eye(3)) == pytest.approx(7.0)


def test_distance_brute_force(rng):
    H = np.array([[1.0, 0.01, 2.0], [0.0, 1.0, -1.0], [1e-5, 0, 1.0]])
    for _ in range(50):
        a = seg(0, *rng.uniform(0, 600, size=(2, 2)))
        b = seg(1, *rng.uniform(0, 600, size=(2, 2)))
        wa = transfer(H, [a.p, a.q])
        pb = np.array([b.p, b.q])
        def dist(pts, p, q):
            n = np.array([-(q[1] - p[1]), q[0] - p[0]])
            n /= np.linalg.norm(n)
            return [abs((x - p) @ n) for x in pts]
        expected = min(dist(wa, pb[0], pb[1]) + dist(pb, wa[0], wa[1]))
        assert segment_distance(a, b, H) == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_distance_warp_to_infinity():
    H = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 0, -10.0]])
    with pytest.raises(DegenerateWarpError):
        segment_distance(seg(0, (10, 0), (20, 5)), seg(1, (0, 0), (5, 5)), H)


# ---------------------------------------------------------------- matching thresholds


def _match(b_segments, labels_b=None):
    a = seg(0, (100, 100), (300, 100))
    segs = [a] + b_segments
    labels = [0] + (labels_b or [0] * len(b_segments))
    return match_pair(0, 1, segs, labels, np.eye(3), K).matches


def test_distance_threshold_boundary():
    # gate is 0.05 * 400 = 20 px, strict
    assert _match([seg(1, (100, 119.99), (300, 119.99))]) == [(0, 1)]
    assert _match([seg(1, (100, 120.0), (300, 120.0))]) == []


def test_angle_threshold_boundary():
    def rotated(deg):
        t = math.radians(deg)
        c = np.array([200.0, 100.0])
        d = 100 * np.array([math.cos(t), math.sin(t)])
        return seg(1, tuple(c - d), tuple(c + d))
    assert _match([rotated(0.99)]) == [(0, 1)]
    assert _match([rotated(1.01)]) == []


def test_label_gating():
    assert _match([seg(1, (100, 105), (300, 105))], [1]) == []


def test_identical_candidates_tie_break():
    b = seg(1, (100, 105), (300, 105))
    assert _match([b, b]) == [(0, 1)]


def test_mutual_nearest():
    # a0 and a1 both prefer b; only the closer one gets it
    segs = [seg(0, (100, 100), (300, 100)), seg(0, (100, 110), (300, 110)), seg(1, (100, 103), (300, 103))]
    assert match_pair(0, 1, segs, [0, 0, 0], np.eye(3), K).matches == [(0, 2)]


def test_match_symmetry(small_scene):
    ds, gt = small_scene
    labels = gt.line_labels[gt.segment_line]
    for i, j in candidate_pairs(gt.rotations)[:10]:
        H = pair_homography(i, j, ds.intrinsics, gt.rotations)
        fi, fj = int(ds.frame_ids[i]), int(ds.frame_ids[j])
        ab = match_pair(fi, fj, ds.segments, labels, H, ds.intrinsics).matches
        ba = match_pair(fj, fi, ds.segments, labels, np.linalg.inv(H), ds.intrinsics).matches
        assert sorted(ab) == sorted((b, a) for a, b in ba)


# ---------------------------------------------------------------- tracks


def test_chain_forms_one_track():
    segs = [seg(f, (0, 0), (10, 0)) for f in range(3)]
    pms = [PairMatch((0, 1), [(0, 1)], np.eye(3), [1.0]), PairMatch((1, 2), [(1, 2)], np.eye(3), [1.0])]
    tracks = form_tracks(pms, segs, [0, 0, 0])
    assert len(tracks) == 1
    assert tracks[0].observations == [(0, 0), (1, 1), (2, 2)]


def test_conflict_is_split_on_weakest_edge():
    # frame 1 has segments 1 and 2; both link to segment 0 in frame 0
    segs = [seg(0, (0, 0), (10, 0)), seg(1, (0, 0), (10, 0)), seg(1, (0, 2), (10, 2)), seg(2, (0, 0), (10, 0))]
    pms = [PairMatch((0, 1), [(0, 1)], np.eye(3), [0.5]), PairMatch((2, 1), [(3, 2)], np.eye(3), [0.1]),
           PairMatch((0, 2), [(0, 3)], np.eye(3), [0.3])]
    tracks = form_tracks(pms, segs, [0] * 4)
    for t in tracks:
        assert len(set(t.frames)) == len(t.frames)
    assert [t.observations for t in tracks] == [[(0, 0), (1, 2), (2, 3)]]


def test_form_tracks_order_independent(rng):
    segs = [seg(f, (0, 0), (10, 0)) for f in range(6) for _ in range(3)]
    pms = []
    for _ in range(20):
        a, b = rng.choice(len(segs), size=2, replace=False)
        if segs[a].frame_id != segs[b].frame_id:
            pms.append(PairMatch((segs[a].frame_id, segs[b].frame_id), [(int(a), int(b))], np.eye(3),
                                 [float(rng.uniform())]))
    labels = [0] * len(segs)
    ref = [t.observations for t in form_tracks(pms, segs, labels)]
    for _ in range(5):
        order = rng.permutation(len(pms))
        assert [t.observations for t in form_tracks([pms[k] for k in order], segs, labels)] == ref
    for t in form_tracks(pms, segs, labels):
        assert len(t.observations) >= 2
        assert len(set(t.frames)) == len(t.frames)


def test_linetrack_invariants():
    with pytest.raises(ValueError):
        LineTrack(0, 0, [(0, 1)])
    with pytest.raises(ValueError):
        LineTrack(0, 0, [(0, 1), (0, 2)])


def test_record_round_trip():
    tracks = [LineTrack(0, 1, [(0, 3), (1, 7)]), LineTrack(1, 2, [(2, 4), (3, 5), (4, 6)])]
    assert tracks_from_record(tracks_to_record(tracks)) == tracks
    np.testing.assert_array_equal(track_index(tracks, 8), [-1, -1, -1, 0, 2 - 1, 1, 1, 0])


# ---------------------------------------------------------------- noise-free scene


@pytest.fixture(scope="module")
def matched_scene(small_scene):
    ds, gt = small_scene
    segs, origin = preprocess_segments(ds.segments, ds.intrinsics)
    frame = estimate_frame(segs, ds.intrinsics, ds.rotations, ds.gravity)
    labels = classify_segments(segs, ds.intrinsics, ds.rotations, frame).labels
    pms = match_all(segs, labels, ds.intrinsics, ds.rotations, ds.frame_ids)
    seg_line = np.array([gt.segment_line[o[0]] for o in origin])
    return ds, gt, segs, labels, pms, seg_line


def test_noise_free_matching_precision_recall(matched_scene):
    ds, gt, segs, labels, pms, seg_line = matched_scene
    by_frame = defaultdict(list)
    for k, s in enumerate(segs):
        if labels[k] >= 0:
            by_frame[s.frame_id].append(k)
    tp = fp = total = 0
    for pm in pms:
        i, j = pm.frames
        truth = {(a, b) for a in by_frame[i] for b in by_frame[j] if seg_line[a] == seg_line[b]}
        got = set(pm.matches)
        tp += len(got & truth)
        fp += len(got - truth)
        total += len(truth)
    assert fp == 0
    assert tp / total >= 0.95


def test_noise_free_tracks_follow_ground_truth(matched_scene):
    ds, gt, segs, labels, pms, seg_line = matched_scene
    tracks = form_tracks(pms, segs, labels)
    assert tracks
    for t in tracks:
        assert len({int(seg_line[s]) for s in t.segments}) == 1
        assert len({int(labels[s]) for s in t.segments}) == 1
        assert len(set(t.frames)) == len(t.frames)

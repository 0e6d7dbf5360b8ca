import math

import numpy as np
import pytest

from msfm.errors import NoDataError
from msfm.geometry import Intrinsics, LineSegment2D, ManhattanFrame, exp_so3, geodesic_angle
from msfm.manhattan import estimate_frame
from msfm.preprocess import preprocess_segments
from msfm.rotation import (ManhattanAssignment, _setup, build_neighbor_graph, classify_segments, mean_rotation_error_deg,
                           objective, refine_loop, refine_rotations)
from msfm.synth import SceneConfig, generate_scene

K = Intrinsics(500.0, 500.0, 320.0, 200.0, 640, 400)


def yaw(deg):
    return exp_so3([0.0, 0.0, math.radians(deg)])


def pan(n, step_deg):
    # cameras looking horizontally: camera z = world rotated about up
    base = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
    return np.array([base @ yaw(k * step_deg).T for k in range(n)])


def test_neighbor_graph_identical_is_complete():
    g = build_neighbor_graph(np.repeat(np.eye(3)[None], 5, axis=0))
    assert len(g) == 10
    assert all(i < j for i, j in g)


def test_neighbor_graph_15_deg_apart():
    assert build_neighbor_graph(pan(2, 15.0)) == []


def test_neighbor_graph_matches_brute_force():
    R = pan(120, 3.0)
    expected = []
    for i in range(120):
        for j in range(i + 1, 120):
            if math.degrees(math.acos(np.clip(R[i, 2] @ R[j, 2], -1, 1))) < 10.0:
                expected.append((i, j))
    assert build_neighbor_graph(R) == expected


def test_classification_rules():
    # horizontal segment through the principal point: plane normal is the camera y axis
    segs = [LineSegment2D(0, (220.0, 200.0), (420.0, 200.0))]
    c = math.sqrt(0.5)
    tilted = ManhattanFrame.from_matrix(np.array([[1.0, 0, 0], [0, c, c], [0, -c, c]]))
    a = classify_segments(segs, K, [np.eye(3)], tilted)  # 90 deg from v_x, 45 from v_y and v_z
    assert a.labels[0] == 0
    np.testing.assert_allclose(a.directions[0], [1, 0, 0])
    a = classify_segments(segs, K, [np.eye(3)], ManhattanFrame.from_matrix(np.eye(3)))  # orthogonal to v_x and v_z
    assert a.labels[0] == -1
    assert np.isnan(a.directions[0]).all()
    skew_frame = ManhattanFrame.from_matrix(exp_so3([0.4, 0.3, 0.2]))
    n = np.array([0.0, 1.0, 0.0])
    angles = np.degrees(np.arccos(np.abs(skew_frame.matrix @ n)))
    expected = [k for k in range(3) if angles[k] > 85 and all(angles[m] < 85 for m in range(3) if m != k)]
    assert classify_segments(segs, K, [np.eye(3)], skew_frame).labels[0] == (expected[0] if expected else -1)


def test_noise_free_labels_match_ground_truth(small_scene):
    ds, gt = small_scene
    frame = ManhattanFrame.from_matrix(gt.frame)
    a = classify_segments(ds.segments, ds.intrinsics, ds.rotations, frame)
    lab = a.labels >= 0
    assert lab.sum() > 0.8 * len(lab)
    np.testing.assert_array_equal(a.labels[lab], gt.line_labels[gt.segment_line[lab]])


def test_no_labels_is_an_error(small_scene):
    ds, gt = small_scene
    a = ManhattanAssignment(np.full(len(ds.segments), -1), np.full((len(ds.segments), 3), np.nan))
    with pytest.raises(NoDataError):
        refine_rotations(ds.segments, a, [], ds.rotations, ds.intrinsics, ManhattanFrame.from_matrix(gt.frame))


def test_exact_rotations_are_a_fixed_point(small_scene):
    ds, gt = small_scene
    frame = ManhattanFrame.from_matrix(gt.frame)
    a = classify_segments(ds.segments, ds.intrinsics, ds.rotations, frame)
    g = build_neighbor_graph(ds.rotations)
    assert objective(ds.segments, a, g, ds.rotations, ds.rotations, ds.intrinsics, frame) < 1e-20
    res = refine_rotations(ds.segments, a, g, ds.rotations, ds.intrinsics, frame)
    assert max(geodesic_angle(x, y) for x, y in zip(res.rotations, ds.rotations)) < 1e-10


@pytest.fixture(scope="module")
def drift_scene():
    cfg = SceneConfig(n_frames=40, sweep_deg=60.0, width=640, height=400, focal=320.0, n_wall_lines=300,
                      n_floor_lines=100, min_line_separation=0.1, pitch_deg=25.0, walk_std_deg=0.2, seed=5)
    ds, gt = generate_scene(cfg)
    segs, _ = preprocess_segments(ds.segments, ds.intrinsics)
    frame = estimate_frame(segs, ds.intrinsics, ds.rotations, ds.gravity)
    return ds, gt, segs, frame


def test_objective_monotone_and_frame0_fixed(drift_scene):
    ds, _, segs, frame = drift_scene
    a = classify_segments(segs, ds.intrinsics, ds.rotations, frame)
    g = build_neighbor_graph(ds.rotations)
    res = refine_rotations(segs, a, g, ds.rotations, ds.intrinsics, frame)
    assert np.all(np.diff(res.cost_history) <= 0)
    assert res.cost_history[-1] < res.cost_history[0]
    np.testing.assert_array_equal(res.rotations[0], ds.rotations[0])
    for R in res.rotations:
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)


def test_huge_lambda_preserves_relative_rotations(drift_scene):
    ds, _, segs, frame = drift_scene
    a = classify_segments(segs, ds.intrinsics, ds.rotations, frame)
    g = build_neighbor_graph(ds.rotations)
    R0 = ds.rotations
    res = refine_rotations(segs, a, g, R0, ds.intrinsics, frame, lam=1e9)
    for i, j in g:
        np.testing.assert_allclose(res.rotations[i].T @ res.rotations[j], R0[i].T @ R0[j], atol=1e-6)


def test_drift_reduced(drift_scene):
    ds, gt, segs, frame = drift_scene
    before = mean_rotation_error_deg(ds.rotations, gt.rotations)
    res = refine_loop(segs, ds.intrinsics, frame, ds.rotations, ds.gravity)
    after = mean_rotation_error_deg(res.rotations, gt.rotations)
    assert after < before / 3
    assert res.outer_iterations <= 10
    assert res.converged


@pytest.fixture(scope="module")
def acceptance_drift_scene():
    cfg = SceneConfig(n_wall_lines=600, n_floor_lines=300, min_line_separation=0.1, focal=400.0, pitch_deg=25.0,
                      walk_std_deg=0.2)
    ds, gt = generate_scene(cfg)
    segs, _ = preprocess_segments(ds.segments, ds.intrinsics)
    frame = estimate_frame(segs, ds.intrinsics, ds.rotations, ds.gravity)
    return ds, gt, segs, frame, refine_loop(segs, ds.intrinsics, frame, ds.rotations, ds.gravity)


def test_drift_loop_labels_equal_true_rotation_labels(acceptance_drift_scene):
    ds, gt, segs, _, res = acceptance_drift_scene
    truth = classify_segments(segs, ds.intrinsics, gt.rotations, ManhattanFrame.from_matrix(gt.frame))
    perm = np.array([int(np.argmax(np.abs(gt.frame @ res.frame.axis(k)))) for k in range(3)])
    lab = res.assignment.labels
    both = (lab >= 0) & (truth.labels >= 0)
    np.testing.assert_array_equal(perm[lab[both]], truth.labels[both])
    assert np.mean((lab >= 0) == (truth.labels >= 0)) > 0.995
    assert res.converged and res.outer_iterations <= 10


def test_drift_loop_label_count_non_decreasing(acceptance_drift_scene):
    res = acceptance_drift_scene[-1]
    counts = res.label_counts[:4]
    assert all(b >= a for a, b in zip(counts, counts[1:])), counts


def test_label_cycle_stops_loop():
    cfg = SceneConfig(n_wall_lines=600, n_floor_lines=300, min_line_separation=0.1, focal=400.0, pitch_deg=25.0,
                      walk_std_deg=0.2, seed=2)
    ds, _ = generate_scene(cfg)
    segs, _ = preprocess_segments(ds.segments, ds.intrinsics)
    frame = estimate_frame(segs, ds.intrinsics, ds.rotations, ds.gravity)
    res = refine_loop(segs, ds.intrinsics, frame, ds.rotations, ds.gravity)
    assert res.converged
    assert res.outer_iterations < 10


def test_noise_free_loop_converges_in_one_round(small_scene):
    ds, gt = small_scene
    res = refine_loop(ds.segments, ds.intrinsics, ManhattanFrame.from_matrix(gt.frame), ds.rotations, ds.gravity)
    assert res.outer_iterations == 1


@pytest.mark.parametrize("optimize_frame", [False, True])
def test_jacobian_matches_finite_differences(drift_scene, optimize_frame):
    ds, _, segs, frame = drift_scene
    rng = np.random.default_rng(7)
    a = classify_segments(segs, ds.intrinsics, ds.rotations, frame)
    g = build_neighbor_graph(ds.rotations)
    prob, _ = _setup(segs, a, g, ds.rotations, ds.intrinsics, 0.1, None, (0,), optimize_frame)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        R = np.array([r @ exp_so3(rng.normal(scale=0.02, size=3)) for r in ds.rotations])
        V = frame.matrix @ exp_so3(rng.normal(scale=0.02, size=3)).T
        J = prob.jacobian(R, V)
        k = rng.integers(prob.n_params)
        e = np.zeros(prob.n_params)
        e[k] = h
        num = (prob.residuals(*prob.update(R, V, e)) - prob.residuals(*prob.update(R, V, -e))) / (2 * h)
        worst = max(worst, np.linalg.norm(num - J[:, k]) / max(np.linalg.norm(J[:, k]), 1e-12))
    assert worst < 1e-5

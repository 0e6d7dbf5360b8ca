import json

import numpy as np
import pytest
from plyfile import PlyData

from msfm.errors import ExportError
from msfm.export import ExportedLine, export_model, line_extents, model_problem, write_ply
from msfm.io import PipelineState
from msfm.pipeline import run_in_memory


def _one_line():
    ends = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.5]])
    return ExportedLine(7, 2, ends[0], np.array([0.0, 0.0, 1.0]), ends)


def test_one_line_two_cameras(tmp_path):
    p = tmp_path / "m.ply"
    write_ply([_one_line()], np.array([[1.0, 0, 0], [2.0, 0, 0]]), p)
    ply = PlyData.read(str(p))
    v, e = ply["vertex"], ply["edge"]
    assert len(v) == 4 and len(e) == 1
    assert (e["vertex1"][0], e["vertex2"][0]) == (0, 1)
    np.testing.assert_array_equal(np.c_[v["x"], v["y"], v["z"]][:2], _one_line().endpoints)
    assert tuple(v[2])[3:] == (0, 255, 0)
    assert tuple(v[0])[3:] == (255, 255, 255)


def test_values_round_trip_exactly(tmp_path, rng):
    ends = rng.normal(size=(2, 3))
    line = ExportedLine(0, 0, ends[0], ends[1] - ends[0], ends)
    centers = rng.normal(size=(3, 3))
    write_ply([line], centers, tmp_path / "m.ply")
    v = PlyData.read(str(tmp_path / "m.ply"))["vertex"]
    xyz = np.c_[v["x"], v["y"], v["z"]]
    np.testing.assert_array_equal(xyz, np.vstack([ends, centers]))


@pytest.fixture(scope="module")
def solved(small_scene):
    ds, gt = small_scene
    return run_in_memory(ds), gt


def test_export_is_byte_identical(solved, tmp_path):
    state, _ = solved
    for fmt in ("ply", "json"):
        a = export_model(state, fmt, tmp_path / f"a.{fmt}").read_bytes()
        b = export_model(state, fmt, tmp_path / f"b.{fmt}").read_bytes()
        assert a == b


def test_ply_counts_match_model(solved, tmp_path):
    state, _ = solved
    problem = model_problem(state)
    lines = line_extents(problem)
    ply = PlyData.read(str(export_model(state, "ply", tmp_path / "m.ply")))
    assert len(ply["vertex"]) == 2 * len(lines) + len(problem.frame_ids)
    assert len(ply["edge"]) == len(lines)


def test_json_model(solved, tmp_path):
    state, _ = solved
    rec = json.loads(export_model(state, "json", tmp_path / "m.json").read_text())
    assert len(rec["cameras"]) == state.dataset.n_frames
    for l in rec["lines"]:
        e = np.array(l["endpoints"])
        d = np.array(l["direction"])
        # endpoints lie on the line
        seg = e[1] - e[0]
        assert np.linalg.norm(np.cross(seg, d)) <= 1e-9 * max(1.0, np.linalg.norm(seg))


def test_unsolved_state_raises(small_scene, tmp_path):
    ds, _ = small_scene
    with pytest.raises(ExportError):
        export_model(PipelineState(dataset=ds), "ply", tmp_path / "m.ply")
    state = run_in_memory(ds)
    with pytest.raises(ExportError):
        export_model(state, "obj", tmp_path / "m.obj")

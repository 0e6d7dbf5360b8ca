import json

import pytest

from msfm.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

SCENE = {"n_frames": 24, "sweep_deg": 36.0, "width": 320, "height": 200, "n_wall_lines": 60,
         "n_floor_lines": 15, "seed": 3}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene.json"
    scene.write_text(json.dumps(SCENE))
    assert main(["synth", "--scene", str(scene), "--out", str(root / "data")]) == EXIT_OK
    return root / "data"


def test_synth_writes_dataset(dataset):
    man = json.loads((dataset / "manifest.json").read_text())
    assert len(man["frames"]) == SCENE["n_frames"]
    assert (dataset / "ground_truth.json").exists()


def test_run_writes_all_outputs(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--dataset", str(dataset), "--out", str(out)]) == EXIT_OK
    for name in ("state.msfm", "report.json", "model.ply", "model.json", "rotation_cost.csv", "tracks.csv",
                 "relations.csv", "solution.json", "solution.csv", "ba_cost.csv", "timings.json"):
        assert (out / name).exists(), name
    rep = json.loads((out / "report.json").read_text())
    assert rep["registered_ratio"] == 1.0


def test_stage_by_stage_matches_run(dataset, tmp_path):
    st = str(tmp_path / "s.msfm")
    for cmd in (["preprocess", "--dataset", str(dataset)], ["frame"], ["refine-rotations"], ["track"],
                ["coplanarity"], ["solve"], ["ba", "--phase", "2"]):
        assert main([*cmd, "--state", st]) == EXIT_OK, cmd
    assert main(["export", "--state", st, "--format", "json"]) == EXIT_OK
    assert main(["evaluate", "--state", st]) == EXIT_OK
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["registered_ratio"] == 1.0
    phases = {line.split(",")[0] for line in (tmp_path / "ba_cost.csv").read_text().splitlines()[1:]}
    assert phases == {"1", "2"}


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["frame"])  # no --state
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["ba", "--state", "x", "--phase", "4"])
    assert e.value.code == EXIT_USAGE
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert main(["run", "--dataset", str(tmp_path), "--out", str(tmp_path / "o"), "--config", str(bad)]) == EXIT_USAGE


def test_data_errors(tmp_path):
    assert main(["run", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["frame", "--state", str(tmp_path / "missing.msfm")]) == EXIT_DATA
    assert main(["export", "--state", str(tmp_path / "missing.msfm")]) == EXIT_DATA


def test_stage_without_prerequisite(dataset, tmp_path):
    st = str(tmp_path / "s.msfm")
    assert main(["preprocess", "--dataset", str(dataset), "--state", st]) == EXIT_OK
    assert main(["solve", "--state", st]) == EXIT_DATA

"""Stage-by-stage pipeline driver with state persisted after every stage."""

from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import bundle, coplanarity, linear_sfm, manhattan, preprocess, rotation, tracking
from .config import PipelineConfig
from .errors import MsfmError, NoDataError, StageError
from .io import STAGES, PipelineState, load_dataset, save_state

log = logging.getLogger(__name__)


def _need(state: PipelineState, *names: str) -> None:
    flags = state.present()
    for n in names:
        if n == "dataset":
            if state.dataset is None:
                raise NoDataError("no dataset loaded")
        elif not flags[n]:
            raise NoDataError(f"stage '{n}' has not been run")


def _frame_pos(state: PipelineState) -> dict[int, int]:
    return {int(f): i for i, f in enumerate(state.dataset.frame_ids)}


def _clear_after(state: PipelineState, stage: str) -> None:
    """Drop outputs of every stage downstream of ``stage``."""
    later = STAGES[STAGES.index(stage) + 1 :]
    attrs = {"preprocess": ("segments", "segment_origin"), "frame": ("frame",), "rotations": ("rotations", "labels"),
             "tracks": ("tracks",), "relations": ("relations",), "solution": ("solution",), "ba": ("ba",)}
    for name in later:
        for a in attrs[name]:
            setattr(state, a, None)
        state.logs.pop(name, None)


# ---------------------------------------------------------------- stages


def stage_preprocess(state: PipelineState, cfg: PipelineConfig) -> None:
    _need(state, "dataset")
    ds = state.dataset
    segs, origin = preprocess.preprocess_segments(ds.segments, ds.intrinsics, max_angle_deg=cfg.merge_angle_deg,
                                                  gap_ratio=cfg.merge_gap_ratio, min_length_ratio=cfg.min_length_ratio)
    if not segs:
        raise NoDataError("no segments survive preprocessing")
    state.segments, state.segment_origin = segs, [tuple(int(i) for i in o) for o in origin]
    state.logs["preprocess"] = {"input": len(ds.segments), "output": len(segs)}


def stage_frame(state: PipelineState, cfg: PipelineConfig) -> None:
    _need(state, "dataset", "preprocess")
    ds = state.dataset
    state.frame = manhattan.estimate_frame(state.segments, ds.intrinsics, ds.rotations, ds.gravity, _frame_pos(state),
                                           refine_rounds=cfg.frame_refine_rounds, angle=cfg.vote_angle_rad,
                                           cone_deg=cfg.gravity_cone_deg, band_deg=cfg.ortho_band_deg)
    state.logs["frame"] = {"matrix": state.frame.matrix.tolist()}


def stage_rotations(state: PipelineState, cfg: PipelineConfig) -> None:
    _need(state, "dataset", "frame")
    ds = state.dataset
    pos = _frame_pos(state)
    if cfg.refine_rotations:
        res = rotation.refine_loop(state.segments, ds.intrinsics, state.frame, ds.rotations, ds.gravity, pos,
                                   cfg.smoothness_lambda, cfg.classify_deg, cfg.neighbor_deg, cfg.max_outer_iterations)
        state.rotations, state.labels, state.frame = res.rotations, res.assignment.labels, res.frame
        state.logs["rotations"] = {"outer_iterations": res.outer_iterations, "label_counts": res.label_counts,
                                   "cost_histories": res.cost_histories, "converged": res.converged}
    else:
        a = rotation.classify_segments(state.segments, ds.intrinsics, ds.rotations, state.frame, pos, cfg.classify_deg)
        state.rotations, state.labels = np.array(ds.rotations, dtype=float), a.labels
        state.logs["rotations"] = {"outer_iterations": 0, "label_counts": [a.n_labeled], "cost_histories": [],
                                   "converged": True}
    state.labels = np.asarray(state.labels, dtype=np.int64)


def stage_tracks(state: PipelineState, cfg: PipelineConfig) -> None:
    _need(state, "dataset", "rotations")
    ds = state.dataset
    pms = tracking.match_all(state.segments, state.labels, ds.intrinsics, state.rotations, ds.frame_ids,
                             cfg.pair_angle_deg, cfg.match_dist_ratio, cfg.match_angle_deg)
    state.tracks = tracking.form_tracks(pms, state.segments, state.labels)
    state.logs["tracks"] = {"pairs": len(pms), "matches": sum(len(p.matches) for p in pms),
                            "tracks": len(state.tracks)}


def stage_relations(state: PipelineState, cfg: PipelineConfig) -> None:
    _need(state, "dataset", "tracks")
    ds = state.dataset
    track_of = tracking.track_index(state.tracks, len(state.segments))
    state.relations = coplanarity.detect_all(state.segments, state.labels, track_of, ds.intrinsics, ds.normal_maps,
                                             state.rotations, state.frame, ds.gravity, _frame_pos(state),
                                             cfg.relation_kinds, cfg.junction_ratio, cfg.normal_angle_deg,
                                             cfg.deviation_deg, cfg.floor_angle_deg)
    counts = {k: 0 for k in coplanarity.KINDS}
    for r in state.relations:
        counts[r.kind] += 1
    state.logs["relations"] = counts


def stage_solution(state: PipelineState, cfg: PipelineConfig) -> None:
    _need(state, "dataset", "relations")
    ds = state.dataset
    state.solution = linear_sfm.solve_linear(state.tracks, state.relations, state.segments, ds.intrinsics,
                                             state.rotations, state.frame, ds.frame_ids, _frame_pos(state),
                                             cfg.eps_depth, cfg.scale_weight)
    sol = state.solution
    state.logs["solution"] = {"registered_ratio": sol.registered_ratio, "kkt": sol.kkt, "iterations": sol.iterations}


def build_ba_problem(state: PipelineState, cfg: PipelineConfig) -> bundle.BAProblem:
    _need(state, "dataset", "solution")
    ds = state.dataset
    return bundle.build_problem(state.solution, state.tracks, state.relations, state.segments, ds.intrinsics,
                                state.rotations, state.frame, _frame_pos(state), cfg.w_reproj, cfg.w_geom)


def stage_ba(state: PipelineState, cfg: PipelineConfig) -> None:
    problem = build_ba_problem(state, cfg)
    state.ba = bundle.optimize(problem, cfg.ba_phases, cfg.ba_max_iter, cfg.ba_rel_tol)
    state.logs["ba"] = {"initial_reprojection": state.ba.initial_reprojection,
                        "final_reprojection": state.ba.final_reprojection,
                        "dropped": len(problem.dropped)}


STAGE_FUNCS: dict[str, Callable[[PipelineState, PipelineConfig], None]] = {
    "preprocess": stage_preprocess,
    "frame": stage_frame,
    "rotations": stage_rotations,
    "tracks": stage_tracks,
    "relations": stage_relations,
    "solution": stage_solution,
    "ba": stage_ba,
}


def run_stage(state: PipelineState, name: str, cfg: PipelineConfig, state_path=None,
              timings: Optional[dict] = None) -> PipelineState:
    """Run one stage, then persist.  On failure the saved state is left untouched."""
    if name not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {name!r}")
    t0 = time.perf_counter()
    try:
        STAGE_FUNCS[name](state, cfg)
    except MsfmError as exc:
        raise StageError(name, exc) from exc
    _clear_after(state, name)
    if timings is not None:
        timings[name] = time.perf_counter() - t0
    log.info("stage %s done in %.2fs", name, time.perf_counter() - t0)
    if state_path is not None:
        save_state(state, state_path)
    return state


def run_pipeline(dataset_path, cfg: Optional[PipelineConfig] = None, state_path=None,
                 stages: Sequence[str] = STAGES, timings: Optional[dict] = None) -> PipelineState:
    """Load the dataset and run ``stages`` in order, saving after each one."""
    cfg = cfg or PipelineConfig()
    cfg.validate()
    t0 = time.perf_counter()
    try:
        ds = load_dataset(Path(dataset_path))
    except MsfmError as exc:
        raise StageError("load", exc) from exc
    if timings is not None:
        timings["load"] = time.perf_counter() - t0
    state = PipelineState(dataset=ds)
    for name in stages:
        run_stage(state, name, cfg, state_path, timings)
    return state


def run_in_memory(dataset, cfg: Optional[PipelineConfig] = None, stages: Sequence[str] = STAGES,
                  timings: Optional[dict] = None) -> PipelineState:
    """Same as :func:`run_pipeline` for an already loaded dataset, without persistence."""
    cfg = cfg or PipelineConfig()
    cfg.validate()
    state = PipelineState(dataset=dataset)
    for name in stages:
        run_stage(state, name, cfg, None, timings)
    return state

"""Model export: PLY (lines as edges, cameras as green vertices) and JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bundle import BAProblem, build_problem
from .errors import ExportError
from .io import PipelineState

LINE_COLOR = (255, 255, 255)
CAMERA_COLOR = (0, 255, 0)


@dataclass
class ExportedLine:
    track_id: int
    label: int
    lam: np.ndarray
    direction: np.ndarray
    endpoints: np.ndarray  # (2, 3)


def _ray(K, R, px) -> np.ndarray:
    d = np.asarray(R).T @ (K.K_inv @ np.array([px[0], px[1], 1.0]))
    return d / np.linalg.norm(d)


def _line_param(lam, A, T, ray) -> float:
    """Parameter along ``A`` of the point of the line closest to the ray from ``T``."""
    w = lam - T
    b = A @ ray
    denom = 1.0 - b * b
    if denom < 1e-12:
        return float(-(A @ w))
    return float((b * (ray @ w) - A @ w) / denom)


def line_extents(problem: BAProblem) -> list[ExportedLine]:
    """Clip every line to the span of its observed endpoints projected onto its direction."""
    ts: dict[int, list[float]] = {k: [] for k in range(len(problem.lines))}
    K = problem.intrinsics
    for o in problem.observations:
        line = problem.lines[o.line]
        R, T = problem.rotations[o.frame], problem.translations[o.frame]
        for px in (o.segment.p, o.segment.q):
            ts[o.line].append(_line_param(line.lam, line.direction, T, _ray(K, R, px)))
    out = []
    for k, line in enumerate(problem.lines):
        if not ts[k]:
            continue
        t0, t1 = min(ts[k]), max(ts[k])
        ends = np.array([line.lam + t0 * line.direction, line.lam + t1 * line.direction])
        out.append(ExportedLine(line.track_id, line.label, line.lam.copy(), line.direction.copy(), ends))
    return out


def model_problem(state: PipelineState) -> BAProblem:
    """The bundle-adjusted model when available, otherwise the linear one."""
    if state.ba is not None:
        return state.ba.problem
    if state.solution is None:
        raise ExportError("nothing solved yet: run the solve stage first")
    ds = state.dataset
    pos = {int(f): i for i, f in enumerate(ds.frame_ids)}
    return build_problem(state.solution, state.tracks, state.relations, state.segments, ds.intrinsics,
                         state.rotations, state.frame, pos)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_ply(lines: list[ExportedLine], centers: np.ndarray, path) -> None:
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    n_v = 2 * len(lines) + len(centers)
    rows = []
    for l in lines:
        for p in l.endpoints:
            rows.append(" ".join([_fmt(p[0]), _fmt(p[1]), _fmt(p[2]), *map(str, LINE_COLOR)]))
    for c in centers:
        rows.append(" ".join([_fmt(c[0]), _fmt(c[1]), _fmt(c[2]), *map(str, CAMERA_COLOR)]))
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n_v}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element edge {len(lines)}",
        "property int vertex1",
        "property int vertex2",
        "end_header",
    ]
    edges = [f"{2 * k} {2 * k + 1}" for k in range(len(lines))]
    Path(path).write_text("\n".join(header + rows + edges) + "\n")


def model_record(problem: BAProblem, lines: list[ExportedLine]) -> dict:
    K = problem.intrinsics
    return {
        "intrinsics": K.to_dict(),
        "cameras": [{"frame_id": int(f), "rotation": problem.rotations[k].tolist(),
                     "center": problem.translations[k].tolist()} for k, f in enumerate(problem.frame_ids)],
        "lines": [{"track_id": l.track_id, "label": l.label, "lambda": l.lam.tolist(),
                   "direction": l.direction.tolist(), "endpoints": l.endpoints.tolist()} for l in lines],
    }


def export_model(state: PipelineState, fmt: str, path) -> Path:
    if fmt not in ("ply", "json"):
        raise ExportError(f"unknown export format {fmt!r}")
    problem = model_problem(state)
    lines = line_extents(problem)
    if not lines and len(problem.frame_ids) == 0:
        raise ExportError("model is empty")
    path = Path(path)
    if fmt == "ply":
        write_ply(lines, problem.translations, path)
    else:
        path.write_text(json.dumps(model_record(problem, lines), indent=1, sort_keys=True) + "\n")
    return path

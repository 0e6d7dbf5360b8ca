"""Pipeline configuration: one JSON document, every threshold a named key."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from . import bundle, coplanarity, linear_sfm, manhattan, preprocess, rotation, tracking
from .errors import ConfigError


@dataclass
class PipelineConfig:
    # preprocessing
    merge_angle_deg: float = preprocess.MERGE_ANGLE_DEG
    merge_gap_ratio: float = preprocess.MERGE_GAP_RATIO
    min_length_ratio: float = preprocess.MIN_LENGTH_RATIO
    # Manhattan frame
    vote_angle_rad: float = manhattan.VOTE_ANGLE
    gravity_cone_deg: float = manhattan.GRAVITY_CONE_DEG
    ortho_band_deg: float = manhattan.ORTHO_BAND_DEG
    frame_refine_rounds: int = 3
    # rotation refinement
    refine_rotations: bool = True
    classify_deg: float = rotation.CLASSIFY_DEG
    neighbor_deg: float = rotation.NEIGHBOR_DEG
    smoothness_lambda: float = rotation.LAMBDA
    max_outer_iterations: int = 10
    # tracking
    pair_angle_deg: float = tracking.PAIR_ANGLE_DEG
    match_dist_ratio: float = tracking.MATCH_DIST_RATIO
    match_angle_deg: float = tracking.MATCH_ANGLE_DEG
    # coplanarity
    relation_kinds: tuple[str, ...] = coplanarity.KINDS
    junction_ratio: float = coplanarity.JUNCTION_RATIO
    normal_angle_deg: float = coplanarity.NORMAL_ANGLE_DEG
    deviation_deg: float = coplanarity.DEVIATION_DEG
    floor_angle_deg: float = coplanarity.FLOOR_ANGLE_DEG
    # linear SfM
    eps_depth: float = linear_sfm.EPS_DEPTH
    scale_weight: float = linear_sfm.SCALE_WEIGHT
    # bundle adjustment
    ba_phases: tuple[int, ...] = (1, 2, 3)
    w_reproj: float = bundle.W_REPROJ
    w_geom: float = bundle.W_GEOM
    ba_max_iter: int = bundle.MAX_ITER
    ba_rel_tol: float = bundle.REL_TOL

    def validate(self) -> None:
        positive = ("merge_angle_deg", "merge_gap_ratio", "vote_angle_rad", "classify_deg", "neighbor_deg",
                    "pair_angle_deg", "match_dist_ratio", "match_angle_deg", "junction_ratio", "normal_angle_deg",
                    "deviation_deg", "floor_angle_deg", "eps_depth", "scale_weight", "w_reproj", "w_geom",
                    "ba_rel_tol")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.min_length_ratio < 0 or self.smoothness_lambda < 0:
            raise ConfigError("min_length_ratio and smoothness_lambda must be non-negative")
        if self.max_outer_iterations < 1 or self.ba_max_iter < 1:
            raise ConfigError("iteration limits must be at least 1")
        bad = set(self.relation_kinds) - set(coplanarity.KINDS)
        if bad:
            raise ConfigError(f"unknown relation kinds: {sorted(bad)}")
        if not self.ba_phases or any(p not in (1, 2, 3) for p in self.ba_phases):
            raise ConfigError("ba_phases must be drawn from 1, 2, 3")
        if list(self.ba_phases) != sorted(self.ba_phases):
            raise ConfigError("ba_phases must be increasing")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["relation_kinds"] = list(self.relation_kinds)
        d["ba_phases"] = list(self.ba_phases)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "relation_kinds" in d:
            d["relation_kinds"] = tuple(str(k) for k in d["relation_kinds"])
        if "ba_phases" in d:
            d["ba_phases"] = tuple(int(p) for p in d["ba_phases"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def load_config(path: Optional[str | Path]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return PipelineConfig.from_dict(d)

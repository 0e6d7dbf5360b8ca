"""Dataset loading/saving, PFM normal maps and the binary pipeline state file."""

from __future__ import annotations

import csv
import json
import math
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np

from .errors import InvalidInputError, LoadError, StateVersionError
from .geometry import Intrinsics, LineSegment2D, ManhattanFrame, nearest_rotation

SEGMENTS_HEADER = ["frame_id", "px", "py", "qx", "qy"]
STATE_MAGIC = b"MSFM"
STATE_VERSION = 1
ORTHONORMAL_LOAD_TOL = 1e-6


# ---------------------------------------------------------------- PFM

def write_pfm(path, data: np.ndarray) -> None:
    """Write an (h, w, 3) float array as little-endian colour PFM."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 3 or data.shape[2] != 3:
        raise InvalidInputError("PFM writer expects an (h, w, 3) array")
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(b"PF\n%d %d\n-1.0\n" % (w, h))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def _read_pfm_header(fh) -> tuple[int, int, str]:
    tag = fh.readline().strip()
    if tag != b"PF":
        raise LoadError("not a colour PFM file")
    dims = fh.readline().split()
    scale = float(fh.readline().strip())
    w, h = int(dims[0]), int(dims[1])
    return w, h, "<" if scale < 0 else ">"


def read_pfm_size(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        w, h, _ = _read_pfm_header(fh)
    return w, h


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h, endian = _read_pfm_header(fh)
        raw = fh.read()
    if len(raw) != w * h * 12:
        raise LoadError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw, dtype=endian + "f4").reshape(h, w, 3)[::-1]
    return data.astype(np.float32)


def clean_normal_map(data: np.ndarray) -> np.ndarray:
    """Renormalize pixels that drifted off unit length; zero vectors stay zero (invalid)."""
    data = np.array(data, dtype=np.float32)
    norm = np.linalg.norm(data.astype(np.float64), axis=2)
    fix = (norm > 0) & (np.abs(norm - 1.0) > 1e-6)
    if np.any(fix):
        data[fix] = (data[fix] / norm[fix][:, None]).astype(np.float32)
    bad = ~np.isfinite(norm)
    data[bad] = 0.0
    return data


class NormalMapStore(Mapping):
    """Frame id -> (h, w, 3) camera-frame normal map, read lazily from PFM files."""

    def __init__(self, paths: dict[int, Path], cache_size: int = 4):
        self.paths = dict(paths)
        self._cache: dict[int, np.ndarray] = {}
        self._cache_size = cache_size

    def __getitem__(self, frame_id: int) -> np.ndarray:
        frame_id = int(frame_id)
        if frame_id not in self._cache:
            if frame_id not in self.paths:
                raise KeyError(frame_id)
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[frame_id] = clean_normal_map(read_pfm(self.paths[frame_id]))
        return self._cache[frame_id]

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self.paths))

    def __len__(self) -> int:
        return len(self.paths)


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    intrinsics: Intrinsics
    frame_ids: np.ndarray
    rotations: np.ndarray  # (n, 3, 3), global -> camera
    segments: list[LineSegment2D]
    normal_maps: Mapping = field(default_factory=dict)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    root: Optional[Path] = None

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1, 3, 3)
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        self._pos = {int(f): i for i, f in enumerate(self.frame_ids)}

    @property
    def n_frames(self) -> int:
        return len(self.frame_ids)

    def pos(self, frame_id: int) -> int:
        return self._pos[int(frame_id)]

    def validate(self) -> None:
        if np.any(np.diff(self.frame_ids) <= 0):
            raise LoadError("frame ids must be strictly increasing")
        for s in self.segments:
            if int(s.frame_id) not in self._pos:
                raise LoadError(f"segment references unknown frame {s.frame_id}")
            if not s.length > 0:
                raise LoadError(f"zero-length segment in frame {s.frame_id}")


def _fail(file: str, what: str) -> LoadError:
    return LoadError(f"{file}: {what}")


def _parse_rotation(values, frame_id) -> np.ndarray:
    R = np.asarray(values, dtype=float)
    if R.size != 9 or not np.all(np.isfinite(R)):
        raise _fail("manifest.json", f"frames[{frame_id}].rotation must hold 9 finite numbers")
    R = R.reshape(3, 3)
    if np.linalg.det(R) < 0:
        raise _fail("manifest.json", f"frames[{frame_id}].rotation: improper rotation")
    if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_LOAD_TOL:
        raise _fail("manifest.json", f"frames[{frame_id}].rotation: not orthonormal")
    return nearest_rotation(R)


def read_segments_csv(path) -> list[LineSegment2D]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"{path.name}: missing file")
    segs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SEGMENTS_HEADER:
            raise _fail(path.name, f"header must be {','.join(SEGMENTS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                fid = int(row[0])
                px, py, qx, qy = (float(v) for v in row[1:5])
            except (ValueError, IndexError):
                raise _fail(path.name, f"line {lineno}: malformed row") from None
            if not all(math.isfinite(v) for v in (px, py, qx, qy)):
                raise _fail(path.name, f"line {lineno}: non-finite coordinate")
            segs.append(LineSegment2D(fid, (px, py), (qx, qy)))
    return segs


def write_segments_csv(path, segments) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SEGMENTS_HEADER)
        for s in segments:
            w.writerow([int(s.frame_id), repr(s.p[0]), repr(s.p[1]), repr(s.q[0]), repr(s.q[1])])


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise LoadError(f"manifest.json: missing file in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise _fail("manifest.json", f"invalid JSON ({exc})") from None
    try:
        K = Intrinsics.from_dict(manifest["intrinsics"])
    except KeyError as exc:
        raise _fail("manifest.json", f"intrinsics.{exc.args[0]} missing") from None
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise _fail("manifest.json", f"intrinsics: {exc}") from None
    g = np.asarray(manifest.get("gravity", [0.0, 0.0, 1.0]), dtype=float)
    if g.shape != (3,) or not np.all(np.isfinite(g)) or np.linalg.norm(g) == 0:
        raise _fail("manifest.json", "gravity must be a non-zero 3-vector")
    frames = manifest.get("frames")
    if not isinstance(frames, list) or not frames:
        raise _fail("manifest.json", "frames must be a non-empty list")
    ids, rots, maps = [], [], {}
    for f in frames:
        if "id" not in f or "rotation" not in f:
            raise _fail("manifest.json", "each frame needs id and rotation")
        fid = int(f["id"])
        ids.append(fid)
        rots.append(_parse_rotation(f["rotation"], fid))
        rel = f.get("normal_map")
        if rel:
            npath = root / rel
            if not npath.exists():
                raise _fail("manifest.json", f"frame {fid}: normal map {rel} not found")
            try:
                size = read_pfm_size(npath)
            except (LoadError, ValueError, IndexError) as exc:
                raise _fail(rel, f"frame {fid}: unreadable normal map ({exc})") from None
            if size != (K.width, K.height):
                raise _fail(rel, f"frame {fid}: normal map is {size[0]}x{size[1]}, expected {K.width}x{K.height}")
            maps[fid] = npath
    segments = read_segments_csv(root / "segments.csv")
    ds = Dataset(K, np.array(ids), np.array(rots), segments, NormalMapStore(maps), g / np.linalg.norm(g), root)
    ds.validate()
    return ds


def save_dataset(ds: Dataset, path) -> Path:
    root = Path(path)
    (root / "normals").mkdir(parents=True, exist_ok=True)
    frames = []
    for i, fid in enumerate(ds.frame_ids):
        entry: dict[str, Any] = {"id": int(fid), "rotation": [float(v) for v in ds.rotations[i].ravel()]}
        if ds.normal_maps is not None and int(fid) in ds.normal_maps:
            rel = f"normals/{int(fid):06d}.pfm"
            write_pfm(root / rel, ds.normal_maps[int(fid)])
            entry["normal_map"] = rel
        frames.append(entry)
    manifest = {
        "intrinsics": ds.intrinsics.to_dict(),
        "gravity": [float(v) for v in ds.gravity],
        "frames": frames,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    write_segments_csv(root / "segments.csv", ds.segments)
    return root


# ---------------------------------------------------------------- state container

def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """MSFM magic, u32 version, u64 header length, JSON header, raw little-endian arrays."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"))
        b = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(struct.pack("<IQ", STATE_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc}") from None
    if len(raw) < 16 or raw[:4] != STATE_MAGIC:
        raise LoadError(f"{path}: not an MSFM state file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != STATE_VERSION:
        raise StateVersionError(f"{path}: state format version {version}, expected {STATE_VERSION}")
    if len(raw) < 16 + hlen:
        raise LoadError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise LoadError(f"{path}: corrupt header") from None
    body = memoryview(raw)[16 + hlen :]
    arrays = {}
    for e in header["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(body):
            raise LoadError(f"{path}: truncated array '{e['name']}'")
        arrays[e["name"]] = np.frombuffer(body[e["offset"] : end], dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays


# ---------------------------------------------------------------- pipeline state

STAGES = ("preprocess", "frame", "rotations", "tracks", "relations", "solution", "ba")


@dataclass
class PipelineState:
    """Dataset plus the output of every completed stage (``None`` = absent)."""

    dataset: Optional[Dataset] = None
    segments: Optional[list[LineSegment2D]] = None
    segment_origin: Optional[list[tuple[int, ...]]] = None
    frame: Optional[ManhattanFrame] = None
    rotations: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    tracks: Optional[list] = None
    relations: Optional[list] = None
    solution: Optional[Any] = None
    ba: Optional[Any] = None
    logs: dict = field(default_factory=dict)

    def present(self) -> dict[str, bool]:
        return {
            "preprocess": self.segments is not None,
            "frame": self.frame is not None,
            "rotations": self.rotations is not None and self.labels is not None,
            "tracks": self.tracks is not None,
            "relations": self.relations is not None,
            "solution": self.solution is not None,
            "ba": self.ba is not None,
        }

    def check(self) -> None:
        flags = self.present()
        seen_gap = None
        for name in STAGES:
            if flags[name] and seen_gap:
                raise LoadError(f"state has '{name}' output but prerequisite '{seen_gap}' is absent")
            if not flags[name] and seen_gap is None:
                seen_gap = name


def _segments_to_arrays(prefix, segs, arrays):
    from .geometry import segment_arrays

    f, P, Q, L = segment_arrays(segs)
    arrays[prefix + ".frame_id"] = f
    arrays[prefix + ".p"] = P
    arrays[prefix + ".q"] = Q
    arrays[prefix + ".label"] = L


def _segments_from_arrays(prefix, arrays) -> list[LineSegment2D]:
    from .geometry import Axis

    f, P, Q, L = (arrays[prefix + k] for k in (".frame_id", ".p", ".q", ".label"))
    return [
        LineSegment2D(int(f[i]), (float(P[i, 0]), float(P[i, 1])), (float(Q[i, 0]), float(Q[i, 1])),
                      None if L[i] < 0 else Axis(int(L[i])))
        for i in range(len(f))
    ]


def save_state(state: PipelineState, path) -> None:
    state.check()
    meta: dict[str, Any] = {"logs": state.logs}
    arrays: dict[str, np.ndarray] = {}
    ds = state.dataset
    if ds is not None:
        meta["dataset"] = {
            "root": None if ds.root is None else str(ds.root),
            "intrinsics": ds.intrinsics.to_dict(),
        }
        arrays["dataset.frame_ids"] = ds.frame_ids
        arrays["dataset.rotations"] = ds.rotations
        arrays["dataset.gravity"] = ds.gravity
        _segments_to_arrays("dataset.segments", ds.segments, arrays)
    if state.segments is not None:
        _segments_to_arrays("segments", state.segments, arrays)
        origin = state.segment_origin or [(i,) for i in range(len(state.segments))]
        arrays["segments.origin_len"] = np.array([len(o) for o in origin], dtype=np.int64)
        arrays["segments.origin"] = np.array([i for o in origin for i in o], dtype=np.int64)
    if state.frame is not None:
        arrays["frame"] = state.frame.matrix
    if state.rotations is not None:
        arrays["rotations"] = np.asarray(state.rotations, dtype=float)
    if state.labels is not None:
        arrays["labels"] = np.asarray(state.labels, dtype=np.int64)
    for name in ("tracks", "relations", "solution", "ba"):
        value = getattr(state, name)
        if value is None:
            continue
        sub_meta, sub_arrays = _record(name, value)
        meta[name] = sub_meta
        arrays.update({f"{name}.{k}": v for k, v in sub_arrays.items()})
    write_container(path, meta, arrays)


def _record(name, value) -> tuple[Any, dict]:
    """JSON record of a stage output; Python float repr round-trips exactly."""
    if name == "tracks":
        from .tracking import tracks_to_record

        return tracks_to_record(value), {}
    if name == "relations":
        from .coplanarity import relations_to_record

        return relations_to_record(value), {}
    return value.to_record(), {}


def load_state(path) -> PipelineState:
    meta, arrays = read_container(path)
    try:
        return _state_from(meta, arrays)
    except (KeyError, ValueError, IndexError, TypeError) as exc:
        raise LoadError(f"{path}: malformed state ({exc!r})") from None


def _state_from(meta, arrays) -> PipelineState:
    from .bundle import BAResult
    from .coplanarity import relations_from_record
    from .linear_sfm import LinearSolution
    from .tracking import tracks_from_record

    st = PipelineState(logs=meta.get("logs", {}))
    if "dataset" in meta:
        dm = meta["dataset"]
        root = None if dm["root"] is None else Path(dm["root"])
        maps: Mapping = {}
        if root is not None and (root / "manifest.json").exists():
            try:
                maps = load_dataset(root).normal_maps
            except LoadError:
                maps = {}
        st.dataset = Dataset(
            Intrinsics.from_dict(dm["intrinsics"]),
            arrays["dataset.frame_ids"],
            arrays["dataset.rotations"],
            _segments_from_arrays("dataset.segments", arrays),
            maps,
            arrays["dataset.gravity"],
            root,
        )
    if "segments.frame_id" in arrays:
        st.segments = _segments_from_arrays("segments", arrays)
        lens, flat = arrays["segments.origin_len"], arrays["segments.origin"]
        bounds = np.concatenate([[0], np.cumsum(lens)])
        st.segment_origin = [tuple(int(v) for v in flat[bounds[i] : bounds[i + 1]]) for i in range(len(lens))]
    if "frame" in arrays:
        st.frame = ManhattanFrame.from_matrix(arrays["frame"])
    st.rotations = arrays.get("rotations")
    st.labels = arrays.get("labels")

    if "tracks" in meta:
        st.tracks = tracks_from_record(meta["tracks"])
    if "relations" in meta:
        st.relations = relations_from_record(meta["relations"], st.frame)
    if "solution" in meta:
        st.solution = LinearSolution.from_record(meta["solution"])
    if "ba" in meta:
        st.ba = BAResult.from_record(meta["ba"], st.segments)
    st.check()
    return st


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def to_jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    return x


__all__ = [
    "Dataset",
    "NormalMapStore",
    "PipelineState",
    "load_dataset",
    "save_dataset",
    "load_state",
    "save_state",
    "read_pfm",
    "write_pfm",
    "read_segments_csv",
    "write_segments_csv",
]

"""Synthetic Manhattan-world rooms with exact ground truth.

Cameras sit on a small circle (a phone held at arm's length while the
body turns) and look outward.  Lines live on the walls and floor of one
or two axis-aligned boxes; normal maps are rendered analytically.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError
from .geometry import Axis, Intrinsics, LineSegment2D, exp_so3
from .io import Dataset, dump_json, save_dataset, to_jsonable

# face ids inside one room
FLOOR, WALL_XMIN, WALL_XMAX, WALL_YMIN, WALL_YMAX, CEILING = range(6)
FACE_AXIS = {FLOOR: 2, WALL_XMIN: 0, WALL_XMAX: 0, WALL_YMIN: 1, WALL_YMAX: 1, CEILING: 2}
NEAR_PLANE = 0.1


@dataclass
class SceneConfig:
    room_size: tuple[float, float, float] = (8.0, 6.0, 3.0)
    n_rooms: int = 1
    room_gap: float = 1.0
    n_wall_lines: int = 120
    n_floor_lines: int = 30
    min_line_separation: float = 0.4
    radius: float = 0.3
    n_frames: int = 120
    sweep_deg: float = 180.0
    camera_height: float = 1.5
    pitch_deg: float = 10.0
    width: int = 1280
    height: int = 800
    focal: Optional[float] = None
    walk_std_deg: float = 0.0
    white_std_deg: float = 0.0
    pixel_noise_std: float = 0.0
    normal_noise_std_deg: float = 0.0
    min_segment_px: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if len(self.room_size) != 3 or min(self.room_size) <= 0:
            raise ConfigError("room must have positive extent along every axis")
        if self.n_frames < 2:
            raise ConfigError("n_frames must be at least 2")
        if self.n_rooms not in (1, 2):
            raise ConfigError("n_rooms must be 1 or 2")
        if self.n_frames < 2 * self.n_rooms:
            raise ConfigError("each room needs at least two frames")
        stds = (self.walk_std_deg, self.white_std_deg, self.pixel_noise_std, self.normal_noise_std_deg)
        if min(stds) < 0 or self.radius < 0:
            raise ConfigError("noise levels and radius must be non-negative")
        if not 0 < self.camera_height < self.room_size[2]:
            raise ConfigError("camera must be inside the room")
        if self.radius >= min(self.room_size[:2]) / 2:
            raise ConfigError("camera circle leaves the room")

    @property
    def intrinsics(self) -> Intrinsics:
        f = self.focal if self.focal is not None else self.width / 2.0
        return Intrinsics(f, f, self.width / 2.0, self.height / 2.0, self.width, self.height)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        d = dict(d)
        if "room_size" in d:
            d["room_size"] = tuple(float(v) for v in d["room_size"])
        return cls(**d)


@dataclass
class GroundTruth:
    rotations: np.ndarray  # (n, 3, 3) true global->camera
    translations: np.ndarray  # (n, 3) camera centers
    frame: np.ndarray  # rows v_x, v_y, v_z
    lines: np.ndarray  # (m, 2, 3) endpoints
    line_labels: np.ndarray  # (m,) Manhattan axis
    line_faces: np.ndarray  # (m,) room * 6 + face
    line_rooms: np.ndarray
    segment_line: np.ndarray  # per emitted segment, index of its 3D line
    camera_rooms: np.ndarray
    room_boxes: np.ndarray  # (r, 2, 3) min/max corners
    coplanar_pairs: list[tuple[int, int]] = field(default_factory=list)

    def face_axis(self, line: int) -> int:
        return FACE_AXIS[int(self.line_faces[line]) % 6]

    def is_floor(self, line: int) -> bool:
        return int(self.line_faces[line]) % 6 == FLOOR

    def coplanar(self, a: int, b: int, normal_axis: Optional[int] = None) -> bool:
        """True when both lines share a box face (and that face's normal matches)."""
        if a < 0 or b < 0 or self.line_faces[a] != self.line_faces[b]:
            return False
        return normal_axis is None or self.face_axis(a) == int(normal_axis)

    def to_json(self) -> dict:
        d = {k: to_jsonable(v) for k, v in asdict(self).items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        arr = {k: np.asarray(v) for k, v in d.items() if k != "coplanar_pairs"}
        return cls(
            rotations=arr["rotations"].astype(float).reshape(-1, 3, 3),
            translations=arr["translations"].astype(float).reshape(-1, 3),
            frame=arr["frame"].astype(float),
            lines=arr["lines"].astype(float).reshape(-1, 2, 3),
            line_labels=arr["line_labels"].astype(np.int64),
            line_faces=arr["line_faces"].astype(np.int64),
            line_rooms=arr["line_rooms"].astype(np.int64),
            segment_line=arr["segment_line"].astype(np.int64),
            camera_rooms=arr["camera_rooms"].astype(np.int64),
            room_boxes=arr["room_boxes"].astype(float).reshape(-1, 2, 3),
            coplanar_pairs=[tuple(p) for p in d.get("coplanar_pairs", [])],
        )

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- cameras

def camera_rotation(heading: float, pitch: float) -> np.ndarray:
    """Global->camera rotation for a camera looking along ``heading``, tilted down by ``pitch``."""
    c, s = math.cos(heading), math.sin(heading)
    z = np.array([c * math.cos(pitch), s * math.cos(pitch), -math.sin(pitch)])
    x = np.array([s, -c, 0.0])
    y = np.cross(z, x)
    return np.stack([x, y, z])


def room_boxes(cfg: SceneConfig) -> np.ndarray:
    X, Y, Z = cfg.room_size
    boxes = []
    for r in range(cfg.n_rooms):
        ox = r * (X + cfg.room_gap)
        boxes.append([[ox - X / 2, -Y / 2, 0.0], [ox + X / 2, Y / 2, Z]])
    return np.array(boxes, dtype=float)


def camera_path(cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """True rotations, camera centers and room index per frame."""
    boxes = room_boxes(cfg)
    pitch = math.radians(cfg.pitch_deg)
    rots, centers, rooms = [], [], []
    for i in range(cfg.n_frames):
        room = i * cfg.n_rooms // cfg.n_frames
        first = -(-room * cfg.n_frames // cfg.n_rooms)  # first frame of this room
        # each room starts its own sweep, turned half a circle, so headings of different rooms stay apart
        heading = math.radians(cfg.sweep_deg * (i - first) / cfg.n_frames + 180.0 * room)
        mid = boxes[room].mean(axis=0)
        center = np.array([mid[0] + cfg.radius * math.cos(heading), mid[1] + cfg.radius * math.sin(heading),
                           cfg.camera_height])
        rots.append(camera_rotation(heading, pitch))
        centers.append(center)
        rooms.append(room)
    return np.array(rots), np.array(centers), np.array(rooms, dtype=np.int64)


def random_rotation_vectors(rng: np.random.Generator, n: int, std_deg: float) -> np.ndarray:
    """Axis-angle vectors whose angle has RMS ``std_deg``."""
    return rng.normal(0.0, math.radians(std_deg) / math.sqrt(3.0), size=(n, 3))


def corrupt_rotations(true_rotations, walk_std_deg: float = 0.0, white_std_deg: float = 0.0,
                      rng: Optional[np.random.Generator] = None, seed: int = 0) -> np.ndarray:
    """``R0_i = drift_i @ white_i @ R_i``; drift is a random walk starting at identity on frame 0."""
    if walk_std_deg < 0 or white_std_deg < 0:
        raise ConfigError("noise std must be non-negative")
    true_rotations = np.asarray(true_rotations, dtype=float)
    n = len(true_rotations)
    rng = rng if rng is not None else np.random.default_rng(seed)
    steps = random_rotation_vectors(rng, n, walk_std_deg)
    white = random_rotation_vectors(rng, n, white_std_deg)
    out = np.empty_like(true_rotations)
    drift = np.eye(3)
    for i in range(n):
        if i > 0 and walk_std_deg > 0:
            drift = exp_so3(steps[i]) @ drift
        W = exp_so3(white[i]) if white_std_deg > 0 else np.eye(3)
        out[i] = drift @ W @ true_rotations[i]
    return out


# ---------------------------------------------------------------- lines

def _spaced_offset(rng, lo, hi, taken: list[float], sep: float, tries: int = 50) -> Optional[float]:
    for _ in range(tries):
        v = rng.uniform(lo, hi)
        if all(abs(v - t) >= sep for t in taken):
            return v
    return None


def place_lines(cfg: SceneConfig, rng: np.random.Generator):
    """3D line endpoints, labels, face ids and room ids for every room."""
    X, Y, Z = cfg.room_size
    h = cfg.camera_height
    margin = 0.6
    lines, labels, faces, rooms = [], [], [], []
    for room, box in enumerate(room_boxes(cfg)):
        (x0, y0, _), (x1, y1, _) = box
        taken: dict[tuple[int, str], list[float]] = {}
        walls = [WALL_XMIN, WALL_XMAX, WALL_YMIN, WALL_YMAX]
        wall_len = np.array([Y, Y, X, X])
        for _ in range(cfg.n_wall_lines):
            wall = int(rng.choice(walls, p=wall_len / wall_len.sum()))
            along_axis = 1 if wall in (WALL_XMIN, WALL_XMAX) else 0
            a_lo, a_hi = (y0, y1) if along_axis == 1 else (x0, x1)
            fixed = {WALL_XMIN: x0, WALL_XMAX: x1, WALL_YMIN: y0, WALL_YMAX: y1}[wall]
            vertical = rng.random() < 0.5
            key = (wall, "v" if vertical else "h")
            lst = taken.setdefault(key, [])
            if vertical:
                pos = _spaced_offset(rng, a_lo + margin, a_hi - margin, lst, cfg.min_line_separation)
                if pos is None:
                    continue
                za, zb = rng.uniform(0.6, 1.2), rng.uniform(1.8, Z - 0.2)
                p0 = np.zeros(3)
                p0[along_axis], p0[1 - along_axis], p0[2] = pos, fixed, za
                p1 = p0.copy()
                p1[2] = zb
                label = Axis.Z
            else:
                zlo = 0.5
                z = None
                for _ in range(50):
                    cand = _spaced_offset(rng, zlo, Z - 0.2, lst, cfg.min_line_separation, tries=1)
                    if cand is not None and abs(cand - h) >= 0.3:
                        z = cand
                        break
                if z is None:
                    continue
                pos = z
                length = rng.uniform(0.8, 2.5)
                start = rng.uniform(a_lo + margin, max(a_lo + margin, a_hi - margin - length))
                end = min(start + length, a_hi - margin)
                p0 = np.zeros(3)
                p0[along_axis], p0[1 - along_axis], p0[2] = start, fixed, z
                p1 = p0.copy()
                p1[along_axis] = end
                label = Axis(along_axis)
            lst.append(pos)
            lines.append((p0, p1))
            labels.append(int(label))
            faces.append(room * 6 + wall)
            rooms.append(room)
        for _ in range(cfg.n_floor_lines):
            along_axis = int(rng.random() < 0.5)
            lst = taken.setdefault((FLOOR, str(along_axis)), [])
            o_lo, o_hi = (y0, y1) if along_axis == 0 else (x0, x1)
            a_lo, a_hi = (x0, x1) if along_axis == 0 else (y0, y1)
            off = _spaced_offset(rng, o_lo + margin, o_hi - margin, lst, cfg.min_line_separation)
            if off is None:
                continue
            length = rng.uniform(1.0, 2.5)
            start = rng.uniform(a_lo + margin, max(a_lo + margin, a_hi - margin - length))
            end = min(start + length, a_hi - margin)
            p0 = np.zeros(3)
            p0[along_axis], p0[1 - along_axis] = start, off
            p1 = p0.copy()
            p1[along_axis] = end
            lst.append(off)
            lines.append((p0, p1))
            labels.append(along_axis)
            faces.append(room * 6 + FLOOR)
            rooms.append(room)
    return (np.array(lines, dtype=float).reshape(-1, 2, 3), np.array(labels, dtype=np.int64),
            np.array(faces, dtype=np.int64), np.array(rooms, dtype=np.int64))


def _clip_2d(p, q, lo, hi):
    """Liang-Barsky clip of segment p->q against the box [lo, hi]; None if outside."""
    d = q - p
    t0, t1 = 0.0, 1.0
    for k in range(2):
        for num, den in ((p[k] - lo[k], -d[k]), (hi[k] - p[k], d[k])):
            if den == 0:
                if num < 0:
                    return None
                continue
            t = num / den
            if den < 0:
                t0 = max(t0, t)
            else:
                t1 = min(t1, t)
    if t0 > t1:
        return None
    return p + t0 * d, p + t1 * d


def project_segment(A, B, K: Intrinsics, R, T, border: float = 1.0):
    """Clip a 3D segment to the near plane and image rectangle; returns 2D endpoints or None."""
    Ac, Bc = R @ (A - T), R @ (B - T)
    if Ac[2] <= NEAR_PLANE and Bc[2] <= NEAR_PLANE:
        return None
    if Ac[2] < NEAR_PLANE or Bc[2] < NEAR_PLANE:
        t = (NEAR_PLANE - Ac[2]) / (Bc[2] - Ac[2])
        M = Ac + t * (Bc - Ac)
        Ac, Bc = (M, Bc) if Ac[2] < NEAR_PLANE else (Ac, M)
    pa = np.array([K.fx * Ac[0] / Ac[2] + K.cx, K.fy * Ac[1] / Ac[2] + K.cy])
    pb = np.array([K.fx * Bc[0] / Bc[2] + K.cx, K.fy * Bc[1] / Bc[2] + K.cy])
    return _clip_2d(pa, pb, np.array([border, border]), np.array([K.width - border, K.height - border]))


# ---------------------------------------------------------------- normal maps

def render_normals(K: Intrinsics, R, T, box, noise_std_deg: float = 0.0,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Camera-frame surface normals (h, w, 3) float32 of the box interior seen from ``T``."""
    h, w = K.height, K.width
    u = np.arange(w) + 0.5
    v = np.arange(h) + 0.5
    uu, vv = np.meshgrid(u, v)
    cam = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    rays = cam @ np.asarray(R)  # global directions (unnormalized)
    lo, hi = np.asarray(box[0]), np.asarray(box[1])
    best_t = np.full((h, w), np.inf)
    normal = np.zeros((h, w, 3))
    for axis in range(3):
        d = rays[..., axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (lo[axis] - T[axis]) / d
            t_hi = (hi[axis] - T[axis]) / d
        for t, sign in ((t_lo, 1.0), (t_hi, -1.0)):
            hit = (t > 0) & (t < best_t)
            best_t = np.where(hit, t, best_t)
            n = np.zeros(3)
            n[axis] = sign  # inward-facing
            normal[hit] = n
    cam_normal = normal @ np.asarray(R).T
    if noise_std_deg > 0:
        rng = rng if rng is not None else np.random.default_rng()
        cam_normal = perturb_normals(cam_normal, noise_std_deg, rng)
    return cam_normal.astype(np.float32)


def perturb_normals(n: np.ndarray, std_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Tilt each normal by a tangent-plane Gaussian whose angular RMS is ``std_deg``."""
    shape = n.shape
    n = n.reshape(-1, 3)
    helper = np.where(np.abs(n[:, [0]]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    s = math.tan(math.radians(std_deg)) / math.sqrt(2.0)
    a = rng.normal(0.0, s, size=(len(n), 1))
    b = rng.normal(0.0, s, size=(len(n), 1))
    out = n + a * e1 + b * e2
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out.reshape(shape)


class RenderedNormalMaps(Mapping):
    """Lazily rendered normal maps; each frame uses its own seeded stream."""

    def __init__(self, cfg: SceneConfig, rotations, centers, rooms, cache_size: int = 4):
        self.cfg = cfg
        self.K = cfg.intrinsics
        self.rotations = rotations
        self.centers = centers
        self.rooms = rooms
        self.boxes = room_boxes(cfg)
        self._cache: dict[int, np.ndarray] = {}
        self._cache_size = cache_size

    def __getitem__(self, frame_id) -> np.ndarray:
        i = int(frame_id)
        if not 0 <= i < len(self.rotations):
            raise KeyError(frame_id)
        if i not in self._cache:
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            rng = np.random.default_rng([self.cfg.seed, 7, i])
            self._cache[i] = render_normals(self.K, self.rotations[i], self.centers[i], self.boxes[self.rooms[i]],
                                            self.cfg.normal_noise_std_deg, rng)
        return self._cache[i]

    def __iter__(self) -> Iterator[int]:
        return iter(range(len(self.rotations)))

    def __len__(self) -> int:
        return len(self.rotations)


# ---------------------------------------------------------------- scene

def generate_scene(cfg: SceneConfig) -> tuple[Dataset, GroundTruth]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    K = cfg.intrinsics
    rots, centers, cam_rooms = camera_path(cfg)
    lines, labels, faces, line_rooms = place_lines(cfg, rng)

    pix_rng = np.random.default_rng([cfg.seed, 3])
    segments, seg_line = [], []
    for i in range(cfg.n_frames):
        for l in np.flatnonzero(line_rooms == cam_rooms[i]):
            clipped = project_segment(lines[l, 0], lines[l, 1], K, rots[i], centers[i])
            if clipped is None:
                continue
            p, q = clipped
            if cfg.pixel_noise_std > 0:
                p = p + pix_rng.normal(0.0, cfg.pixel_noise_std, 2)
                q = q + pix_rng.normal(0.0, cfg.pixel_noise_std, 2)
            if np.hypot(*(p - q)) < cfg.min_segment_px:
                continue
            segments.append(LineSegment2D(i, (p[0], p[1]), (q[0], q[1])))
            seg_line.append(l)

    init = corrupt_rotations(rots, cfg.walk_std_deg, cfg.white_std_deg, rng=np.random.default_rng([cfg.seed, 5]))
    maps = RenderedNormalMaps(cfg, rots, centers, cam_rooms)
    ds = Dataset(K, np.arange(cfg.n_frames), init, segments, maps, np.array([0.0, 0.0, 1.0]))
    pairs = []
    for a in range(len(lines)):
        for b in range(len(lines)):
            if a != b and faces[a] == faces[b]:
                pairs.append((a, b))
    gt = GroundTruth(
        rotations=rots,
        translations=centers,
        frame=np.eye(3),
        lines=lines,
        line_labels=labels,
        line_faces=faces,
        line_rooms=line_rooms,
        segment_line=np.array(seg_line, dtype=np.int64),
        camera_rooms=cam_rooms,
        room_boxes=room_boxes(cfg),
        coplanar_pairs=pairs,
    )
    return ds, gt


def write_scene(cfg: SceneConfig, out) -> tuple[Dataset, GroundTruth]:
    """Generate a scene and write it in the dataset layout plus ``ground_truth.json``."""
    ds, gt = generate_scene(cfg)
    out = Path(out)
    save_dataset(ds, out)
    dump_json(gt.to_json(), out / "ground_truth.json")
    dump_json(to_jsonable(asdict(cfg)), out / "scene_config.json")
    ds.root = out
    return ds, gt

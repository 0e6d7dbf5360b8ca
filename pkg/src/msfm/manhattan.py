"""Manhattan frame extraction by Gaussian-sphere voting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import ExtractionError
from .geometry import Intrinsics, ManhattanFrame, canonical_sign, interpretation_normals, nearest_rotation

VOTE_ANGLE = 0.03  # radians
GRAVITY_CONE_DEG = 10.0
ORTHO_BAND_DEG = 1.0
SUBDIVISIONS = 5


@dataclass(frozen=True)
class SphereGrid:
    directions: np.ndarray  # (n, 3) unit vectors

    def __len__(self) -> int:
        return len(self.directions)


@dataclass
class VoteMap:
    grid: SphereGrid
    values: np.ndarray  # normalized so the max bin is 1
    max_value: float  # raw maximum before normalization

    @property
    def empty(self) -> bool:
        return self.max_value == 0.0


def _icosahedron():
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = np.array(verts, dtype=float)
    return [tuple(x) for x in v / np.linalg.norm(v, axis=1, keepdims=True)], faces


@lru_cache(maxsize=None)
def _grid(levels: int) -> SphereGrid:
    verts, faces = _icosahedron()
    for _ in range(levels):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = np.add(verts[a], verts[b])
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    d = np.array(verts, dtype=float)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d.setflags(write=False)
    return SphereGrid(d)


def build_sphere_grid(levels: int = SUBDIVISIONS) -> SphereGrid:
    """Subdivided icosahedron; 5 levels give 10242 directions."""
    return _grid(levels)


def segment_normals(segments, K: Intrinsics, rotations, frame_pos: Optional[dict] = None) -> np.ndarray:
    """Interpretation-plane normals (n, 3) of ``segments`` in the global frame.

    ``rotations`` is indexed by frame position; ``frame_pos`` maps frame id to
    position (identity when omitted).
    """
    from .geometry import segment_arrays

    fids, P, Q, _ = segment_arrays(segments)
    out = np.full((len(segments), 3), np.nan)
    for fid in np.unique(fids):
        m = fids == fid
        pos = int(fid) if frame_pos is None else frame_pos[int(fid)]
        out[m] = interpretation_normals(P[m], Q[m], K, rotations[pos])
    return out


def accumulate_votes(normals: np.ndarray, weights: np.ndarray, grid: SphereGrid,
                     angle: float = VOTE_ANGLE, chunk: int = 256) -> np.ndarray:
    thresh = math.sin(angle)
    votes = np.zeros(len(grid))
    D = grid.directions
    ok = np.all(np.isfinite(normals), axis=1)
    normals, weights = normals[ok], weights[ok]
    for start in range(0, len(normals), chunk):
        n = normals[start : start + chunk]
        hit = np.abs(n @ D.T) < thresh
        votes += weights[start : start + chunk] @ hit
    return votes


def vote(segments, K: Intrinsics, rotations, frame_pos: Optional[dict] = None,
         angle: float = VOTE_ANGLE, grid: Optional[SphereGrid] = None) -> VoteMap:
    """Each segment adds its pixel length to every bin within ``angle`` of its interpretation plane."""
    grid = grid or build_sphere_grid()
    if len(segments) == 0:
        return VoteMap(grid, np.zeros(len(grid)), 0.0)
    normals = segment_normals(segments, K, rotations, frame_pos)
    weights = np.array([s.length for s in segments], dtype=float)
    raw = accumulate_votes(normals, weights, grid, angle)
    mx = float(raw.max())
    return VoteMap(grid, raw / mx if mx > 0 else raw, mx)


def _best(values: np.ndarray, mask: np.ndarray) -> int:
    idx = np.flatnonzero(mask & (values > 0))
    if len(idx) == 0:
        return -1
    # argmax returns the first maximum, i.e. the lowest bin index on ties
    return int(idx[np.argmax(values[idx])])


def extract_frame(vmap: VoteMap, gravity, cone_deg: float = GRAVITY_CONE_DEG,
                  band_deg: float = ORTHO_BAND_DEG) -> ManhattanFrame:
    D = vmap.grid.directions
    g = np.asarray(gravity, dtype=float)
    g = g / np.linalg.norm(g)
    cos_g = D @ g
    iz = _best(vmap.values, np.abs(cos_g) >= math.cos(math.radians(cone_deg)))
    if iz < 0:
        raise ExtractionError(f"no votes within {cone_deg} degrees of gravity")
    vz = D[iz] * (1.0 if cos_g[iz] >= 0 else -1.0)
    ix = _best(vmap.values, np.abs(D @ vz) < math.sin(math.radians(band_deg)))
    if ix < 0:
        raise ExtractionError("no votes on the great circle orthogonal to the vertical peak")
    vx = D[ix] - (D[ix] @ vz) * vz
    vx = canonical_sign(vx / np.linalg.norm(vx))
    vy = np.cross(vz, vx)
    vy /= np.linalg.norm(vy)
    return ManhattanFrame(vx, vy, vz)


def refine_frame(normals: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                 frame: ManhattanFrame) -> ManhattanFrame:
    """Sub-bin least-squares update of the vanishing directions from labeled normals.

    Each axis becomes the direction most orthogonal to its segments'
    interpretation normals; the triple is then snapped to the nearest
    rotation so the result stays an orthonormal right-handed frame.
    """
    V = frame.matrix.copy()
    for k in range(3):
        m = (labels == k) & np.all(np.isfinite(normals), axis=1)
        if m.sum() < 2:
            continue
        n = normals[m]
        M = (n * weights[m, None]).T @ n
        w, vecs = np.linalg.eigh(M)
        if w[1] <= 1e-12 * max(w[2], 1e-300):
            continue  # all normals parallel: direction undetermined
        v = vecs[:, 0]
        V[k] = v if v @ V[k] >= 0 else -v
    V = nearest_rotation(V)
    return ManhattanFrame.from_matrix(V)


def dump_votes_csv(vmap: VoteMap, path) -> None:
    with open(path, "w") as fh:
        fh.write("x,y,z,value\n")
        for d, v in zip(vmap.grid.directions, vmap.values):
            fh.write(f"{d[0]!r},{d[1]!r},{d[2]!r},{v!r}\n")


def manhattan_labels(normals: np.ndarray, frame: ManhattanFrame, threshold_deg: float = 85.0) -> np.ndarray:
    """Axis k when the plane normal is more than ``threshold_deg`` from v_k and less from the other two; else -1."""
    c = np.abs(normals @ frame.matrix.T)  # |cos| of folded angle to each axis
    cut = math.cos(math.radians(threshold_deg))
    with np.errstate(invalid="ignore"):
        near = c < cut  # angle > threshold
    labels = np.full(len(normals), -1, dtype=np.int64)
    one = near.sum(axis=1) == 1
    labels[one] = np.argmax(near[one], axis=1)
    return labels


def estimate_frame(segments, K: Intrinsics, rotations, gravity, frame_pos: Optional[dict] = None,
                   refine_rounds: int = 3, angle: float = VOTE_ANGLE, cone_deg: float = GRAVITY_CONE_DEG,
                   band_deg: float = ORTHO_BAND_DEG, grid: Optional[SphereGrid] = None) -> ManhattanFrame:
    """Vote, take the grid peaks, then polish them below the bin spacing."""
    vmap = vote(segments, K, rotations, frame_pos, angle=angle, grid=grid)
    frame = extract_frame(vmap, gravity, cone_deg, band_deg)
    if refine_rounds <= 0:
        return frame
    normals = segment_normals(segments, K, rotations, frame_pos)
    weights = np.array([s.length for s in segments], dtype=float)
    for _ in range(refine_rounds):
        frame = refine_frame(normals, manhattan_labels(normals, frame), weights, frame)
    return frame

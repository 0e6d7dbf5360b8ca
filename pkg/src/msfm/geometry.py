"""Shared geometric types and primitives.

Conventions used across the package:

* Rotations map global coordinates into the camera frame, so a camera
  ray ``K^-1 x`` is brought to the global frame by ``R^T``.
* Camera frame is z forward, x right, y down.
* A camera with center ``T`` sees a global point ``X`` at ``R (X - T)``.
* Pixel ``(u, v)`` has its center at ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateSegmentError, InvalidInputError

ROTATION_TOL = 1e-9


class Axis(enum.IntEnum):
    X = 0
    Y = 1
    Z = 2

    @classmethod
    def parse(cls, value) -> Optional["Axis"]:
        if value is None or value == "" or value == -1:
            return None
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


def other_axes(axis: int) -> tuple[int, int]:
    """The two Manhattan axes orthogonal to ``axis``, in increasing order."""
    return tuple(k for k in range(3) if k != int(axis))  # type: ignore[return-value]


def third_axis(a: int, b: int) -> int:
    if a == b:
        raise ValueError("axes must differ")
    return 3 - int(a) - int(b)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def min_side(self) -> int:
        return min(self.width, self.height)

    def with_params(self, fx, fy, cx, cy) -> "Intrinsics":
        return Intrinsics(float(fx), float(fy), float(cx), float(cy), self.width, self.height)

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class LineSegment2D:
    frame_id: int
    p: tuple[float, float]
    q: tuple[float, float]
    label: Optional[Axis] = None
    length: float = field(init=False)

    def __post_init__(self):
        p = (float(self.p[0]), float(self.p[1]))
        q = (float(self.q[0]), float(self.q[1]))
        if not all(math.isfinite(v) for v in (*p, *q)):
            raise InvalidInputError("segment endpoints must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "length", math.hypot(p[0] - q[0], p[1] - q[1]))

    @property
    def midpoint(self) -> tuple[float, float]:
        return (0.5 * (self.p[0] + self.q[0]), 0.5 * (self.p[1] + self.q[1]))

    def with_label(self, label: Optional[Axis]) -> "LineSegment2D":
        return LineSegment2D(self.frame_id, self.p, self.q, label)


@dataclass(frozen=True)
class ManhattanFrame:
    vx: np.ndarray
    vy: np.ndarray
    vz: np.ndarray

    def __post_init__(self):
        for name in ("vx", "vy", "vz"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        if not self.is_valid():
            raise InvalidInputError("Manhattan frame must be orthonormal and right-handed")

    @property
    def matrix(self) -> np.ndarray:
        """Rows are v_x, v_y, v_z."""
        return np.stack([self.vx, self.vy, self.vz])

    def axis(self, k: int) -> np.ndarray:
        return self.matrix[int(k)]

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "ManhattanFrame":
        m = np.asarray(m, dtype=float)
        return cls(m[0], m[1], m[2])

    def is_valid(self, tol: float = 1e-9) -> bool:
        m = self.matrix
        if not np.allclose(m @ m.T, np.eye(3), atol=tol):
            return False
        return bool(np.allclose(np.cross(self.vz, self.vx), self.vy, atol=tol))


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def normalize(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def canonical_sign(n: np.ndarray) -> np.ndarray:
    """Flip rows so the largest-magnitude component is positive."""
    n = np.asarray(n, dtype=float)
    if n.ndim == 1:
        return -n if n[np.argmax(np.abs(n))] < 0 else n.copy()
    idx = np.argmax(np.abs(n), axis=1)
    sign = np.where(n[np.arange(len(n)), idx] < 0, -1.0, 1.0)
    return n * sign[:, None]


def check_rotation(R, tol: float = ROTATION_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidInputError("rotation must be a finite 3x3 matrix")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol):
        raise InvalidInputError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidInputError("improper rotation")
    return R


def nearest_rotation(M) -> np.ndarray:
    """Polar-decomposition projection onto SO(3)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula."""
    a = np.asarray(axis, dtype=float)
    S = skew(a)
    return np.eye(3) + math.sin(angle) * S + (1.0 - math.cos(angle)) * (S @ S)


def exp_so3(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    return rotation_from_axis_angle(w / theta, theta)


def log_so3(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos)
    if theta < 1e-10:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if math.pi - theta < 1e-6:
        # axis from the symmetric part near pi
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / math.sqrt(B[k, k])
        return axis * theta
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v * (theta / (2.0 * math.sin(theta)))


def geodesic_angle(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    M = a.T @ b
    # atan2 form keeps precision near 0 where arccos of the trace does not
    c = (np.trace(M) - 1.0) / 2.0
    s = np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]]) / 2.0
    return float(min(math.pi, max(0.0, math.atan2(s, c))))


def angle_between(u, v) -> float:
    """Angle in radians between two vectors, robust near 0 and pi."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(math.atan2(np.linalg.norm(np.cross(u, v)), float(np.dot(u, v))))


def homogeneous(pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return np.hstack([pts, np.ones((len(pts), 1))])


def pixel_rays(pts, K: Intrinsics, R) -> np.ndarray:
    """Vectorized ``normalize(R^T K^-1 [u, v, 1])`` for an (n, 2) array."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("pixel coordinates must be finite")
    cam = homogeneous(pts) @ K.K_inv.T
    rays = cam @ np.asarray(R, dtype=float)
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def pixel_to_global_ray(pt, K: Intrinsics, R) -> np.ndarray:
    return pixel_rays(np.asarray(pt, dtype=float).reshape(1, 2), K, R)[0]


def interpretation_normals(p, q, K: Intrinsics, R, canonical: bool = True) -> np.ndarray:
    """Unit normals of interpretation planes for endpoint arrays ``p``, ``q``.

    Rows whose endpoint rays are parallel come back as NaN; callers that
    need an error use :func:`interpretation_plane`.
    """
    rp = pixel_rays(p, K, R)
    rq = pixel_rays(q, K, R)
    n = np.cross(rp, rq)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(norm > 1e-15, n / norm, np.nan)
    return canonical_sign(n) if canonical else n


def interpretation_plane(seg: LineSegment2D, K: Intrinsics, R) -> np.ndarray:
    n = interpretation_normals(np.array([seg.p]), np.array([seg.q]), K, R)[0]
    if seg.length <= 0 or not np.all(np.isfinite(n)):
        raise DegenerateSegmentError(f"segment in frame {seg.frame_id} has coincident endpoint rays")
    return n


def project_points(X, K: Intrinsics, R, T) -> tuple[np.ndarray, np.ndarray]:
    """Pixels and camera-frame depths of global points ``X`` (n, 3)."""
    Xc = (np.atleast_2d(X) - np.asarray(T, dtype=float)) @ np.asarray(R).T
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * Xc[:, 0] / z + K.cx, K.fy * Xc[:, 1] / z + K.cy], axis=1)
    return uv, z


def camera_z_axis(R) -> np.ndarray:
    """Optical axis of a camera expressed in global coordinates."""
    return np.asarray(R)[2]


def point_line_distance_2d(pts, a, b) -> np.ndarray:
    """Unsigned distance from ``pts`` to the infinite line through a, b."""
    pts = np.atleast_2d(pts)
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    n = np.array([-d[1], d[0]]) / np.hypot(d[0], d[1])
    return np.abs((pts - a) @ n)


def segment_arrays(segments) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Split a segment list into (frame_ids, P, Q, labels) arrays; label -1 = none."""
    n = len(segments)
    fids = np.fromiter((s.frame_id for s in segments), dtype=np.int64, count=n)
    P = np.array([s.p for s in segments], dtype=float).reshape(n, 2)
    Q = np.array([s.q for s in segments], dtype=float).reshape(n, 2)
    labels = np.fromiter((-1 if s.label is None else int(s.label) for s in segments), dtype=np.int64, count=n)
    return fids, P, Q, labels


# angles within this many degrees of a threshold count as equal to it
ANGLE_TIE_DEG = 1e-9


def axes_within(rotations, max_angle_deg: float) -> list[tuple[int, int]]:
    """Unordered position pairs whose optical axes differ by strictly less than ``max_angle_deg``."""
    ang = np.degrees(optical_axis_angles(rotations))
    i, j = np.nonzero(np.triu(ang < max_angle_deg - ANGLE_TIE_DEG, k=1))
    return list(zip(i.tolist(), j.tolist()))


def optical_axis_angles(rotations) -> np.ndarray:
    """Pairwise angles (radians) between camera z-axes, accurate near zero."""
    z = np.asarray(rotations, dtype=float)[:, 2, :]
    cross = np.linalg.norm(np.cross(z[:, None, :], z[None, :, :]), axis=2)
    return np.arctan2(cross, z @ z.T)

"""Core geometric types: rigid transforms, point clouds, spatial queries, normals.

Conventions used across the package:

* 3-vectors are float64 numpy arrays of shape ``(3,)``; point sets are
  ``(N, 3)`` arrays. Coordinates are in meters.
* Rotations are ``(3, 3)`` orthonormal matrices with determinant +1.
* Direction vectors used as joint axes are unit norm (tolerance 1e-9).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError

UNIT_TOL = 1e-9
ORTHO_TOL = 1e-9


def as_vec3(v) -> np.ndarray:
    """Coerce to a float64 (3,) array."""
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise ValidationError(f"expected 3-vector, got shape {a.shape}")
    return a


def normalize(v) -> np.ndarray:
    """Return v scaled to unit norm; raise if the norm is (near) zero."""
    a = as_vec3(v)
    n = float(np.linalg.norm(a))
    if n < 1e-12:
        raise ValidationError("cannot normalize a zero vector")
    return a / n


def is_unit(v, tol: float = UNIT_TOL) -> bool:
    return abs(float(np.linalg.norm(np.asarray(v, dtype=np.float64))) - 1.0) <= tol


def check_rotation(R, tol: float = ORTHO_TOL) -> np.ndarray:
    """Validate that R is orthonormal with determinant +1."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValidationError(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R @ R.T, np.eye(3), atol=max(tol, 1e-9)):
        raise ValidationError("rotation is not orthonormal")
    if np.linalg.det(R) < 0.0:
        raise ValidationError("rotation has negative determinant")
    return R


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion p -> R @ p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation", as_vec3(self.translation))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_rotation_about_line(axis, angle: float, pivot=None) -> "RigidTransform":
        """Rotation by `angle` about the line through `pivot` along `axis`."""
        R = rotation_from_angle_axis(axis, angle)
        if pivot is None:
            return RigidTransform(R, np.zeros(3))
        q = as_vec3(pivot)
        return RigidTransform(R, q - R @ q)

    @staticmethod
    def from_translation(t) -> "RigidTransform":
        return RigidTransform(np.eye(3), as_vec3(t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self applied after other: (self ∘ other)(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class PointCloud:
    """Immutable point set with optional per-point color, part label, and identity.

    ``part_ids`` are oracle labels from the simulator; ``point_ids`` are stable
    surface-patch identities (simulation oracle only) and must be unique.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    part_ids: np.ndarray | None = None
    point_ids: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValidationError(f"positions must be (N, 3), got {pos.shape}")
        object.__setattr__(self, "positions", pos)
        n = len(pos)
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.float64)
            if col.shape != (n, 3):
                raise ValidationError("colors must align with positions")
            object.__setattr__(self, "colors", col)
        if self.part_ids is not None:
            pid = np.asarray(self.part_ids, dtype=np.int64)
            if pid.shape != (n,):
                raise ValidationError("part_ids must align with positions")
            object.__setattr__(self, "part_ids", pid)
        if self.point_ids is not None:
            ids = np.asarray(self.point_ids, dtype=np.int64)
            if ids.shape != (n,):
                raise ValidationError("point_ids must align with positions")
            if len(np.unique(ids)) != n:
                raise ValidationError("point_ids must be unique within a cloud")
            object.__setattr__(self, "point_ids", ids)

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, index) -> "PointCloud":
        """Select points by boolean mask or integer indices, carrying aux data."""
        return PointCloud(
            positions=self.positions[index],
            colors=None if self.colors is None else self.colors[index],
            part_ids=None if self.part_ids is None else self.part_ids[index],
            point_ids=None if self.point_ids is None else self.point_ids[index],
        )


def concatenate_clouds(clouds: list[PointCloud], keep_ids: bool = True) -> PointCloud:
    """Stack clouds; aux fields survive only if present on every input."""
    if not clouds:
        return PointCloud(np.zeros((0, 3)))
    pos = np.vstack([c.positions for c in clouds])

    def _stack(field):
        vals = [getattr(c, field) for c in clouds]
        if any(v is None for v in vals):
            return None
        return np.concatenate(vals)

    ids = _stack("point_ids") if keep_ids else None
    return PointCloud(pos, colors=_stack("colors"), part_ids=_stack("part_ids"),
                      point_ids=ids)


def apply_transform(T: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Map every position through T; auxiliary lists pass through unchanged."""
    return replace(cloud, positions=T.apply(cloud.positions))


class SpatialIndex:
    """Read-only nearest-neighbor index over a point cloud.

    Backed by a k-d tree; results are identical to a brute-force linear scan,
    with distance ties broken by lowest point index.
    """

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise ValidationError("cannot index an empty cloud")
        self.cloud = cloud
        self._tree = cKDTree(cloud.positions)

    def nearest(self, query) -> tuple[int, float]:
        q = as_vec3(query)
        d, i = self._tree.query(q)
        # Re-check the minimal-distance ball so exact ties resolve to the
        # lowest index, matching the brute-force contract.
        candidates = self._tree.query_ball_point(q, r=float(d) + 1e-12)
        if len(candidates) > 1:
            dists = np.linalg.norm(self.cloud.positions[candidates] - q, axis=1)
            dmin = dists.min()
            best = min(c for c, dc in zip(candidates, dists) if dc <= dmin)
            return int(best), float(dmin)
        return int(i), float(d)

    def nearest_many(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bulk nearest query (no tie re-check; intended for continuous data)."""
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64))
        return np.asarray(i, dtype=np.int64), np.asarray(d, dtype=np.float64)

    def within(self, query, radius: float) -> list[int]:
        return sorted(self._tree.query_ball_point(as_vec3(query), r=radius))


def nearest_neighbor(index: SpatialIndex, query) -> tuple[int, float]:
    """Index and Euclidean distance of the closest point to `query`."""
    return index.nearest(query)


def estimate_normals(cloud: PointCloud, k: int, viewpoint=None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Per-point surface normals from k-nearest-neighbor covariance.

    Each normal is the eigenvector of the neighborhood covariance with the
    smallest eigenvalue. Orientation faces `viewpoint` when given, else the +z
    hemisphere. Returns (normals (N,3), valid (N,) bool); points whose
    neighborhood covariance has rank < 2 are flagged invalid.

    Requires len(cloud) >= k >= 3.
    """
    n = len(cloud)
    if k < 3 or n < k:
        raise ValidationError(f"need at least k={k} >= 3 points, have {n}")
    tree = cKDTree(cloud.positions)
    _, idx = tree.query(cloud.positions, k=k)
    neigh = cloud.positions[idx]                      # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    w, v = np.linalg.eigh(cov)                        # ascending eigenvalues
    normals = v[:, :, 0].copy()
    scale = w[:, 2]
    # rank < 2: second eigenvalue vanishes relative to the largest
    valid = (scale > 1e-18) & (w[:, 1] > 1e-9 * np.maximum(scale, 1e-18))
    if viewpoint is not None:
        to_view = as_vec3(viewpoint) - cloud.positions
        flip = np.einsum("ni,ni->n", normals, to_view) < 0.0
    else:
        flip = normals[:, 2] < 0.0
    normals[flip] *= -1.0
    normals[~valid] = 0.0
    return normals, valid


def rotation_from_angle_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for `angle` radians about unit `axis`."""
    u = as_vec3(axis)
    if not is_unit(u, tol=1e-9):
        raise ValidationError("rotation axis must be unit norm")
    ux, uy, uz = u
    K = np.array([[0.0, -uz, uy], [uz, 0.0, -ux], [-uy, ux, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_to_angle_axis(R) -> tuple[np.ndarray, float]:
    """Extract (unit axis, angle in [0, pi]) from a rotation matrix.

    Uses the quaternion route (largest-pivot extraction), which stays stable
    at both branch points angle -> 0 and angle -> pi. Zero rotation returns
    axis (0, 0, 1) by convention.
    """
    R = check_rotation(R)
    t = np.trace(R)
    # Shepperd's method: pick the largest of the four quaternion components.
    q = np.empty(4)  # (w, x, y, z)
    if t > R[0, 0] and t > R[1, 1] and t > R[2, 2]:
        s = np.sqrt(1.0 + t) * 2.0
        q[0] = 0.25 * s
        q[1] = (R[2, 1] - R[1, 2]) / s
        q[2] = (R[0, 2] - R[2, 0]) / s
        q[3] = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q[0] = (R[2, 1] - R[1, 2]) / s
        q[1] = 0.25 * s
        q[2] = (R[0, 1] + R[1, 0]) / s
        q[3] = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q[0] = (R[0, 2] - R[2, 0]) / s
        q[1] = (R[0, 1] + R[1, 0]) / s
        q[2] = 0.25 * s
        q[3] = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q[0] = (R[1, 0] - R[0, 1]) / s
        q[1] = (R[0, 2] + R[2, 0]) / s
        q[2] = (R[1, 2] + R[2, 1]) / s
        q[3] = 0.25 * s
    q /= np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    vec_norm = float(np.linalg.norm(q[1:]))
    angle = 2.0 * float(np.arctan2(vec_norm, q[0]))
    if vec_norm < 1e-300 or angle == 0.0:
        return np.array([0.0, 0.0, 1.0]), 0.0
    return q[1:] / vec_norm, angle


def point_to_line_distance(points, origin, direction) -> np.ndarray:
    """Distance of point(s) to the infinite line through `origin` along unit `direction`."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    o = as_vec3(origin)
    u = normalize(direction)
    rel = pts - o
    cross = np.cross(rel, u)
    d = np.linalg.norm(cross, axis=1)
    return d if d.shape[0] > 1 else d


def closest_point_on_line(point, origin, direction) -> np.ndarray:
    o = as_vec3(origin)
    u = normalize(direction)
    p = as_vec3(point)
    return o + np.dot(p - o, u) * u


def line_to_line_distance(origin_a, dir_a, origin_b, dir_b) -> float:
    """Minimum distance between two infinite lines (skew-line formula).

    Parallel lines fall back to point-to-line distance.
    """
    a0, ua = as_vec3(origin_a), normalize(dir_a)
    b0, ub = as_vec3(origin_b), normalize(dir_b)
    n = np.cross(ua, ub)
    nn = float(np.linalg.norm(n))
    if nn < 1e-12:
        return float(point_to_line_distance(b0[None, :], a0, ua)[0])
    return abs(float(np.dot(b0 - a0, n))) / nn


# ---------------------------------------------------------------------------
# Cloud serialization: ASCII table and a binary little-endian variant.
#
# ASCII: one point per line, "x y z r g b [part_id [point_id]]". Clouds
# without colors are written with 0.5-gray fill.
#
# Binary layout (all little-endian):
#   magic  b"SKPC", u16 version (=1), u16 flags, u64 count,
#   f64 positions [N*3], then per flag bit: f64 colors [N*3] (bit 0),
#   i64 part_ids [N] (bit 1), i64 point_ids [N] (bit 2).
# ---------------------------------------------------------------------------

_BIN_MAGIC = b"SKPC"
_FLAG_COLORS, _FLAG_PARTS, _FLAG_IDS = 1, 2, 4


def save_cloud_ascii(cloud: PointCloud, path) -> None:
    cols = [cloud.positions]
    cols.append(cloud.colors if cloud.colors is not None
                else np.full((len(cloud), 3), 0.5))
    parts = []
    if cloud.part_ids is not None:
        parts.append(cloud.part_ids)
        if cloud.point_ids is not None:
            parts.append(cloud.point_ids)
    with open(path, "w") as fh:
        for i in range(len(cloud)):
            vals = [repr(float(v)) for c in cols for v in c[i]]
            vals += [str(int(p[i])) for p in parts]
            fh.write(" ".join(vals) + "\n")


def load_cloud_ascii(path) -> PointCloud:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(line.split())
    if not rows:
        return PointCloud(np.zeros((0, 3)))
    width = len(rows[0])
    if width not in (6, 7, 8) or any(len(r) != width for r in rows):
        raise ValidationError("cloud table must have 6, 7, or 8 uniform columns")
    arr = np.array([[float(v) for v in r[:6]] for r in rows])
    part_ids = np.array([int(r[6]) for r in rows], dtype=np.int64) if width >= 7 else None
    point_ids = np.array([int(r[7]) for r in rows], dtype=np.int64) if width == 8 else None
    return PointCloud(arr[:, :3], colors=arr[:, 3:6], part_ids=part_ids,
                      point_ids=point_ids)


def save_cloud_binary(cloud: PointCloud, path) -> None:
    flags = 0
    if cloud.colors is not None:
        flags |= _FLAG_COLORS
    if cloud.part_ids is not None:
        flags |= _FLAG_PARTS
    if cloud.point_ids is not None:
        flags |= _FLAG_IDS
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<HHQ", 1, flags, len(cloud)))
        fh.write(cloud.positions.astype("<f8").tobytes())
        if cloud.colors is not None:
            fh.write(cloud.colors.astype("<f8").tobytes())
        if cloud.part_ids is not None:
            fh.write(cloud.part_ids.astype("<i8").tobytes())
        if cloud.point_ids is not None:
            fh.write(cloud.point_ids.astype("<i8").tobytes())


def load_cloud_binary(path) -> PointCloud:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BIN_MAGIC:
            raise ValidationError(f"bad cloud file magic {magic!r}")
        version, flags, n = struct.unpack("<HHQ", fh.read(12))
        if version != 1:
            raise ValidationError(f"unsupported cloud file version {version}")
        pos = np.frombuffer(fh.read(24 * n), dtype="<f8").reshape(n, 3)
        colors = part_ids = point_ids = None
        if flags & _FLAG_COLORS:
            colors = np.frombuffer(fh.read(24 * n), dtype="<f8").reshape(n, 3)
        if flags & _FLAG_PARTS:
            part_ids = np.frombuffer(fh.read(8 * n), dtype="<i8")
        if flags & _FLAG_IDS:
            point_ids = np.frombuffer(fh.read(8 * n), dtype="<i8")
    return PointCloud(pos.copy(), colors=None if colors is None else colors.copy(),
                      part_ids=None if part_ids is None else part_ids.copy(),
                      point_ids=None if point_ids is None else point_ids.copy())

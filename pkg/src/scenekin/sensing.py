"""Ray-cast depth capture: scene clouds from a viewpoint ring, object views
around a contact point.

Every returned point is an exact ray/box intersection (plus optional Gaussian
noise along the ray) and carries the hit part's color and index together with
a stable point id derived from the quantized surface coordinate in the part's
local frame. Because the id is local to the part, the same physical surface
patch keeps its identity when the part moves, which gives downstream code an
oracle correspondence channel that survives articulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import CaptureError, ValidationError
from .geom import PointCloud, as_vec3, normalize, rotation_from_angle_axis
from .simworld import WORLD_UP, SceneSpec, surface_normal

# point_id packing: ((part * 6 + face) * ID_RANGE + iu) * ID_RANGE + iv
_ID_RANGE = 100_000
_ID_CELL = 0.005  # surface-coordinate quantization, meters


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera: position, target, vertical field of view, pixel grid."""

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = (0.0, 0.0, 1.0)
    vfov_deg: float = 60.0
    resolution: tuple[int, int] = (160, 120)

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position))
        object.__setattr__(self, "look_at", as_vec3(self.look_at))
        object.__setattr__(self, "up", normalize(self.up))
        if np.allclose(self.position, self.look_at):
            raise ValidationError("camera position must differ from look_at")
        if not (1.0 < self.vfov_deg < 179.0):
            raise ValidationError("vertical fov must lie in (1, 179) degrees")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise ValidationError("resolution must be positive")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        forward = normalize(self.look_at - self.position)
        up = self.up
        if abs(float(np.dot(forward, up))) > 1.0 - 1e-9:
            up = np.array([1.0, 0.0, 0.0])
        right = normalize(np.cross(forward, up))
        cam_up = np.cross(right, forward)
        return forward, right, cam_up

    def ray_directions(self) -> np.ndarray:
        """(W*H, 3) unit directions through all pixel centers, row-major."""
        w, h = self.resolution
        forward, right, cam_up = self.basis()
        tan_v = math.tan(math.radians(self.vfov_deg) / 2.0)
        tan_h = tan_v * w / h
        xs = (2.0 * (np.arange(w) + 0.5) / w - 1.0) * tan_h
        ys = (1.0 - 2.0 * (np.arange(h) + 0.5) / h) * tan_v
        gx, gy = np.meshgrid(xs, ys)
        dirs = (forward[None, :] + gx.reshape(-1, 1) * right[None, :]
                + gy.reshape(-1, 1) * cam_up[None, :])
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


@dataclass(frozen=True)
class CaptureConfig:
    """Capture settings for the scene ring and the per-object views."""

    resolution: tuple[int, int] = (160, 120)
    vfov_deg: float = 60.0
    ring_cameras: int = 8            # per tilt row
    ring_tilts_deg: tuple[float, ...] = (-30.0,)          # outward-facing rows
    ring_inward_tilts_deg: tuple[float, ...] = (-12.0,)   # cross-room rows
    ring_height: float = 1.35
    ring_radius_frac: float = 0.3    # fraction of the smaller room dimension
    object_view_distance: float = 1.0
    max_range: float = 10.0
    noise_sigma: float = 0.0
    voxel: float = 0.02
    crop_radius: float = 1.2

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValidationError("noise sigma must be >= 0")


def _ray_box_hits(origins, dirs, box):
    """Slab test of rays against one oriented box.

    origins: (3,) shared origin; dirs: (N, 3). Returns (t (N,), hit (N,) bool,
    local points (N, 3)) where t is the entry distance.
    """
    R = box.rotation
    o = (origins - box.center) @ R
    d = dirs @ R
    h = box.half_extents
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-h - o) * inv
        t2 = (h - o) * inv
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # rays parallel to a slab: inside it -> no constraint, outside -> miss
    par = np.abs(d) < 1e-12
    inside = np.abs(o) <= h
    near = np.where(par, np.where(inside, -np.inf, np.inf), near)
    far = np.where(par, np.where(inside, np.inf, -np.inf), far)
    t_enter = near.max(axis=1)
    t_exit = far.min(axis=1)
    hit = (t_enter <= t_exit) & (t_enter > 1e-9)
    t_enter = np.where(hit, t_enter, np.inf)
    local_pts = o + np.where(np.isfinite(t_enter), t_enter, 0.0)[:, None] * d
    return t_enter, hit, local_pts


def _point_ids(part_index: int, local_pts: np.ndarray, half: np.ndarray
               ) -> np.ndarray:
    rel = np.abs(local_pts) / np.maximum(half, 1e-12)
    axis = np.argmax(rel, axis=1)
    rows = np.arange(len(local_pts))
    face = axis * 2 + (local_pts[rows, axis] > 0).astype(np.int64)
    uv_axes = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    u = local_pts[rows, uv_axes[:, 0]] + half[uv_axes[:, 0]]
    v = local_pts[rows, uv_axes[:, 1]] + half[uv_axes[:, 1]]
    iu = np.clip(np.floor(u / _ID_CELL).astype(np.int64), 0, _ID_RANGE - 1)
    iv = np.clip(np.floor(v / _ID_CELL).astype(np.int64), 0, _ID_RANGE - 1)
    return ((part_index * 6 + face) * _ID_RANGE + iu) * _ID_RANGE + iv


def raycast_capture(scene: SceneSpec, camera: CameraPose,
                    max_range: float = 10.0, noise_sigma: float = 0.0,
                    rng: np.random.Generator | None = None) -> PointCloud:
    """One depth capture: nearest box hit per pixel within range.

    Points carry part color, part index, and quantized-surface point ids;
    pixels hitting the same 5 mm surface patch are deduplicated. Gaussian
    noise (if any) is added along the ray after identification. The returned
    cloud is sorted by point id.
    """
    dirs = camera.ray_directions()
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_part = np.full(n, -1, dtype=np.int64)
    best_local = np.zeros((n, 3))
    world = scene.world_parts()
    for pi, box in enumerate(world):
        t, hit, local = _ray_box_hits(camera.position, dirs, box)
        closer = hit & (t < best_t) & (t <= max_range)
        best_t[closer] = t[closer]
        best_part[closer] = pi
        best_local[closer] = local[closer]

    valid = best_part >= 0
    if not valid.any():
        return PointCloud(np.zeros((0, 3)))
    idx = np.flatnonzero(valid)
    parts = best_part[idx]
    ids = np.empty(len(idx), dtype=np.int64)
    for pi in np.unique(parts):
        sel = parts == pi
        ids[sel] = _point_ids(int(pi), best_local[idx[sel]],
                              world[pi].half_extents)
    # one point per surface patch: keep the first pixel that saw each id
    _, first = np.unique(ids, return_index=True)
    keep = idx[np.sort(first)]
    ids = ids[np.sort(first)]

    pts = camera.position[None, :] + best_t[keep, None] * dirs[keep]
    if noise_sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        pts = pts + dirs[keep] * rng.normal(0.0, noise_sigma,
                                            size=(len(keep), 1))
    colors = np.stack([world[p].color for p in best_part[keep]])
    order = np.argsort(ids, kind="stable")
    return PointCloud(pts[order], colors=colors[order],
                      part_ids=best_part[keep][order], point_ids=ids[order])


def raycast_single(scene: SceneSpec, origin, direction,
                   max_range: float = 50.0) -> tuple[int, float] | None:
    """Nearest (part index, distance) hit by one ray, or None."""
    d = normalize(direction)[None, :]
    best = None
    for pi, box in enumerate(scene.world_parts()):
        t, hit, _ = _ray_box_hits(as_vec3(origin), d, box)
        if hit[0] and t[0] <= max_range:
            if best is None or t[0] < best[1]:
                best = (pi, float(t[0]))
    return best


def fuse_clouds(captures: list[PointCloud]) -> PointCloud:
    """Concatenate captures and deduplicate by point id.

    For duplicate ids the lexicographically smallest position wins, which
    makes the result independent of capture order.
    """
    captures = [c for c in captures if len(c) > 0]
    if not captures:
        return PointCloud(np.zeros((0, 3)))
    pos = np.vstack([c.positions for c in captures])
    col = np.vstack([c.colors for c in captures])
    part = np.concatenate([c.part_ids for c in captures])
    ids = np.concatenate([c.point_ids for c in captures])
    order = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0], ids))
    ids_sorted = ids[order]
    _, first = np.unique(ids_sorted, return_index=True)
    keep = order[first]
    return PointCloud(pos[keep], colors=col[keep], part_ids=part[keep],
                      point_ids=ids_sorted[first])


def _voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Keep one point per voxel; the lowest point id in the voxel wins."""
    if len(cloud) == 0:
        return cloud
    grid = np.floor(cloud.positions / voxel).astype(np.int64)
    shift = 2 ** 19
    key = ((grid[:, 0] + shift) * (2 ** 20) + (grid[:, 1] + shift)) * (2 ** 20) \
        + (grid[:, 2] + shift)
    order = np.lexsort((cloud.point_ids, key))
    key_sorted = key[order]
    _, first = np.unique(key_sorted, return_index=True)
    keep = order[first]
    keep = keep[np.argsort(cloud.point_ids[keep], kind="stable")]
    return cloud.subset(keep)


def ring_poses(scene: SceneSpec, config: CaptureConfig) -> list[CameraPose]:
    """Viewpoint ring inside the room.

    Outward-facing rows give closeups of the near walls and floor; inward
    rows see the opposite side of the room at full height, which covers
    wall-mounted objects the near outward cameras overshoot. Cameras whose
    position is not in free space are dropped.
    """
    lo, hi = scene.bounds
    center = (lo + hi) / 2.0
    radius = config.ring_radius_frac * float(min(hi[0] - lo[0], hi[1] - lo[1]))
    poses = []
    world = scene.world_parts()
    rows = [(t, 1.0) for t in config.ring_tilts_deg] \
        + [(t, -1.0) for t in config.ring_inward_tilts_deg]
    for tilt, facing in rows:
        tt = math.tan(math.radians(tilt))
        for k in range(config.ring_cameras):
            ang = 2.0 * math.pi * k / config.ring_cameras
            out = np.array([math.cos(ang), math.sin(ang), 0.0])
            pos = np.array([center[0], center[1], config.ring_height]) + radius * out
            if any(b.solid_distance(pos) < 0.05 for b in world):
                continue
            look = pos + facing * out + np.array([0.0, 0.0, tt])
            poses.append(CameraPose(pos, look, vfov_deg=config.vfov_deg,
                                    resolution=config.resolution))
    return poses


def capture_scene_cloud(scene: SceneSpec, config: CaptureConfig | None = None,
                        rng: np.random.Generator | None = None) -> PointCloud:
    """Fused, voxel-downsampled scene cloud from the viewpoint ring."""
    config = config or CaptureConfig()
    poses = ring_poses(scene, config)
    captures = []
    for i, pose in enumerate(poses):
        sub = None
        if config.noise_sigma > 0.0:
            base = rng if rng is not None else np.random.default_rng(0)
            sub = np.random.default_rng(base.integers(0, 2 ** 63 - 1))
        captures.append(raycast_capture(scene, pose, config.max_range,
                                        config.noise_sigma, sub))
    return _voxel_downsample(fuse_clouds(captures), config.voxel)


def object_view_poses(scene: SceneSpec, focus, config: CaptureConfig
                      ) -> list[CameraPose]:
    """Front/right/left cameras around `focus` at the configured distance.

    Front is the outward normal of the touched face (projected horizontal);
    cameras failing the free-space check are skipped. Raises CaptureError when
    no camera placement survives.
    """
    focus = as_vec3(focus)
    n = surface_normal(scene, focus)
    horiz = n - np.dot(n, WORLD_UP) * WORLD_UP
    if np.linalg.norm(horiz) < 1e-6:
        horiz = np.array([1.0, 0.0, 0.0])
    front = horiz / np.linalg.norm(horiz)
    world = scene.world_parts()
    lo, hi = scene.bounds
    poses = []
    for ang in (0.0, math.pi / 2, -math.pi / 2):
        d = rotation_from_angle_axis(WORLD_UP, ang) @ front
        pos = focus + d * config.object_view_distance
        if np.any(pos[:2] < lo[:2]) or np.any(pos[:2] > hi[:2]):
            continue
        if any(b.solid_distance(pos) < 0.05 for b in world):
            continue
        poses.append(CameraPose(pos, focus, vfov_deg=config.vfov_deg,
                                resolution=config.resolution))
    if not poses:
        raise CaptureError("all object-view cameras collide with the scene")
    return poses


def capture_object_views(scene: SceneSpec, focus, config: CaptureConfig | None = None,
                         poses: list[CameraPose] | None = None,
                         rng: np.random.Generator | None = None,
                         ) -> tuple[PointCloud, list[CameraPose]]:
    """Egocentric object cloud: fused captures cropped around `focus`.

    Pass `poses` to reuse a previous placement (e.g. the before-interaction
    cameras for the after capture). Returns (cloud, poses used).
    """
    config = config or CaptureConfig()
    focus = as_vec3(focus)
    if poses is None:
        poses = object_view_poses(scene, focus, config)
    captures = []
    for pose in poses:
        sub = None
        if config.noise_sigma > 0.0:
            base = rng if rng is not None else np.random.default_rng(0)
            sub = np.random.default_rng(base.integers(0, 2 ** 63 - 1))
        captures.append(raycast_capture(scene, pose, config.max_range,
                                        config.noise_sigma, sub))
    fused = fuse_clouds(captures)
    if len(fused) == 0:
        return fused, poses
    keep = np.linalg.norm(fused.positions - focus, axis=1) <= config.crop_radius
    return fused.subset(keep), poses


def capture_interaction_after(scene: SceneSpec, crop_center, poses,
                              focus_new, config: CaptureConfig,
                              rng: np.random.Generator | None = None
                              ) -> PointCloud:
    """After-interaction capture for one observation pair.

    Fuses the reused before-capture cameras (static surfaces keep identical
    samples) with fresh cameras aimed at the advected contact (frontal
    sampling of the moved part), cropped to the before capture's sphere so
    both clouds share support. Falls back to the reused cameras alone when
    no fresh placement is collision-free.
    """
    crop_center = as_vec3(crop_center)
    after, _ = capture_object_views(scene, crop_center, config, poses=poses,
                                    rng=rng)
    try:
        fresh, _ = capture_object_views(scene, focus_new, config, rng=rng)
        after = fuse_clouds([after, fresh])
        keep = np.linalg.norm(after.positions - crop_center,
                              axis=1) <= config.crop_radius
        after = after.subset(keep)
    except CaptureError:
        pass
    return after

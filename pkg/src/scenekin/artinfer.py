"""Joint inference from before/after observations of one interaction.

The pipeline is explicit geometry end to end: nearest-neighbor change
detection splits each cloud into static and moved points, a contact-centered
Gaussian heatmap selects the moved component the interaction actually touched,
rigid alignment (identity-matched correspondences or ICP) recovers the motion
of the mobile part, and a screw decomposition of that motion yields the joint
model: a translation axis with a slide distance, or a rotation axis with a
pivot and an opening angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateMotionError,
    InferenceError,
    MotionEstimationError,
    NoMotionError,
    ValidationError,
)
from .geom import (
    PointCloud,
    RigidTransform,
    as_vec3,
    normalize,
    rotation_to_angle_axis,
)

PRISMATIC = "prismatic"
REVOLUTE = "revolute"


@dataclass(frozen=True)
class JointModel:
    """Estimated joint: prismatic {axis, state} or revolute {axis, pivot, state}.

    The revolute pivot is canonicalized to the axis point closest to the
    frame origin; `pitch` records the translational screw residual along the
    axis (diagnostic only, zero for an ideal hinge).
    """

    kind: str
    axis: np.ndarray
    pivot: np.ndarray | None
    state: float
    pitch: float = 0.0

    def __post_init__(self):
        if self.kind not in (PRISMATIC, REVOLUTE):
            raise ValidationError(f"unknown joint kind {self.kind!r}")
        object.__setattr__(self, "axis", normalize(self.axis))
        if self.kind == REVOLUTE:
            if self.pivot is None:
                raise ValidationError("revolute joint requires a pivot")
            if not (-math.pi < self.state <= math.pi + 1e-12):
                raise ValidationError("revolute state must lie in (-pi, pi]")
            q = as_vec3(self.pivot)
            q = q - np.dot(q, self.axis) * self.axis
            object.__setattr__(self, "pivot", q)
        elif self.pivot is not None:
            raise ValidationError("prismatic joint carries no pivot")

    def axis_point(self) -> np.ndarray:
        return np.zeros(3) if self.pivot is None else self.pivot


@dataclass(frozen=True)
class PartSegmentation:
    """Mobile-part masks aligned with the before and after clouds."""

    mobile_mask_before: np.ndarray
    mobile_mask_after: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mobile_mask_before",
                           np.asarray(self.mobile_mask_before, dtype=bool))
        object.__setattr__(self, "mobile_mask_after",
                           np.asarray(self.mobile_mask_after, dtype=bool))


@dataclass(frozen=True)
class ObservationPair:
    """Egocentric clouds around one interaction plus contact bookkeeping.

    `heat_before`/`heat_after` are Gaussian contact-region weights over the
    respective clouds; `capture_poses` optionally records the camera poses so
    follow-up captures can reuse them.
    """

    before: PointCloud
    after: PointCloud
    contact_before: np.ndarray
    contact_after: np.ndarray
    heat_before: np.ndarray
    heat_after: np.ndarray
    capture_poses: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "contact_before", as_vec3(self.contact_before))
        object.__setattr__(self, "contact_after", as_vec3(self.contact_after))
        hb = np.asarray(self.heat_before, dtype=np.float64)
        ha = np.asarray(self.heat_after, dtype=np.float64)
        if hb.shape != (len(self.before),) or ha.shape != (len(self.after),):
            raise ValidationError("heatmaps must align with their clouds")
        object.__setattr__(self, "heat_before", hb)
        object.__setattr__(self, "heat_after", ha)


def contact_heatmap(cloud: PointCloud, contact, sigma: float) -> np.ndarray:
    """exp(-||p - contact||^2 / (2 sigma^2)) per point."""
    if sigma <= 0:
        raise ValidationError("heatmap sigma must be positive")
    c = as_vec3(contact)
    d2 = np.sum((cloud.positions - c) ** 2, axis=1)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def make_observation_pair(before: PointCloud, after: PointCloud, contact_before,
                          contact_after, sigma: float,
                          capture_poses: tuple = ()) -> ObservationPair:
    return ObservationPair(
        before, after, contact_before, contact_after,
        contact_heatmap(before, contact_before, sigma),
        contact_heatmap(after, contact_after, sigma),
        capture_poses,
    )


@dataclass(frozen=True)
class InferenceConfig:
    """Parameters of the change-detect / align / decompose chain."""

    epsilon: float = 0.01          # displacement above which a point counts as moved
    fit_epsilon: float = 0.01      # residual below which the motion explains a point
    ambiguity_radius: float = 0.15  # max seed distance when labeling revealed points
    fit_far_cap: float = 0.05      # max sample distance for the plane-residual test
    attach_radius: float = 0.06    # max distance from the detected changed component
    close_slab_margin: float = 0.015  # box-closure margin along the panel
    close_normal_margin: float = 0.005  # box-closure margin across the panel
    component_radius: float = 0.04  # neighbor-graph link radius (2 x capture voxel)
    use_contact_heat: bool = True  # False: largest component instead of heat mass
    mode: str = "icp"              # correspondence source: "oracle" or "icp"
    theta_min: float = math.radians(2.0)
    motion_epsilon: float = 1e-3
    reseg_rounds: int = 1
    icp_max_iter: int = 50
    icp_tol: float = 1e-6
    anchor_weight: float = 0.25    # contact-pair share of the alignment weight
    heat_sigma: float = 0.05


def _connected_components(points: np.ndarray, radius: float) -> np.ndarray:
    """Component label per point for the radius neighbor graph (union-find)."""
    n = len(points)
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    tree = cKDTree(points)
    for i, j in tree.query_pairs(r=radius):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    return np.array([find(i) for i in range(n)])


def _select_component(positions: np.ndarray, candidates: np.ndarray,
                      heat: np.ndarray, radius: float, use_heat: bool) -> np.ndarray:
    """Mask of the best candidate component: max heat mass, or max size."""
    idx = np.flatnonzero(candidates)
    labels = _connected_components(positions[idx], radius)
    best_label, best_score = None, -np.inf
    for lab in np.unique(labels):
        members = idx[labels == lab]
        score = float(heat[members].sum()) if use_heat else float(len(members))
        if score > best_score + 1e-15:
            best_label, best_score = lab, score
    mask = np.zeros(len(positions), dtype=bool)
    mask[idx[labels == best_label]] = True
    return mask


def change_candidates(obs: ObservationPair, epsilon: float,
                      far_cap: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Moved-point candidate masks.

    A point is a moved candidate when the other cloud shows no surface at its
    position: no sample within `epsilon`, and no coplanar sample (local-plane
    residual above `epsilon`) within `far_cap`. The plane term makes the test
    robust to the two captures sampling the same surface on different pixel
    grids; shrinking epsilon never shrinks the candidate set.
    """
    if len(obs.before) == 0 or len(obs.after) == 0:
        raise ValidationError("both clouds must be non-empty")
    tree_b = cKDTree(obs.before.positions)
    tree_a = cKDTree(obs.after.positions)
    nrm_b, val_b = _cloud_normals(obs.before)
    nrm_a, val_a = _cloud_normals(obs.after)
    still_b = _explained_by(obs.before.positions, tree_a, obs.after.positions,
                            nrm_a, val_a, epsilon, far_cap)
    still_a = _explained_by(obs.after.positions, tree_b, obs.before.positions,
                            nrm_b, val_b, epsilon, far_cap)
    return ~still_b, ~still_a


def detect_change(obs: ObservationPair, epsilon: float = 0.01,
                  component_radius: float = 0.04,
                  use_contact_heat: bool = True) -> PartSegmentation:
    """Split both clouds into static and moved points by nearest-neighbor distance.

    A point is a moved candidate when its nearest neighbor in the other cloud
    is farther than `epsilon`. Candidates are grouped into connected components
    (link radius `component_radius`) and the component with the largest contact
    heat mass is kept (largest component when `use_contact_heat` is off).
    Raises NoMotionError when either cloud has no candidates.
    """
    cand_b, cand_a = change_candidates(obs, epsilon)
    if not cand_b.any() or not cand_a.any():
        raise NoMotionError("no points moved beyond epsilon")
    mask_b = _select_component(obs.before.positions, cand_b, obs.heat_before,
                               component_radius, use_contact_heat)
    mask_a = _select_component(obs.after.positions, cand_a, obs.heat_after,
                               component_radius, use_contact_heat)
    return PartSegmentation(mask_b, mask_a)


def kabsch(src: np.ndarray, dst: np.ndarray,
           weights: np.ndarray | None = None) -> RigidTransform:
    """Least-squares rigid transform mapping src onto dst (cross-covariance SVD)."""
    if len(src) < 3 or len(src) != len(dst):
        raise MotionEstimationError(
            f"need >= 3 paired points, got {len(src)}/{len(dst)}")
    if weights is None:
        w = np.full(len(src), 1.0 / len(src))
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    H = (src - cs).T @ ((dst - cd) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cd - R @ cs)


def _slab_normal(points: np.ndarray) -> np.ndarray:
    mean = points.mean(axis=0)
    cov = np.cov((points - mean).T)
    _, v = np.linalg.eigh(np.atleast_2d(cov))
    return v[:, 0]


def _icp_init(src: np.ndarray, dst: np.ndarray, contact_before: np.ndarray,
              contact_after: np.ndarray) -> RigidTransform:
    """Initial guess: minimal rotation aligning the slab normals, then match
    the contact points. Assumes the opening stays below a half turn."""
    if len(src) < 8 or len(dst) < 8:
        return RigidTransform.from_translation(contact_after - contact_before)
    n_s = _slab_normal(src)
    n_d = _slab_normal(dst)
    if float(np.dot(n_s, n_d)) < 0.0:
        n_d = -n_d
    axis = np.cross(n_s, n_d)
    nn = float(np.linalg.norm(axis))
    if nn < 1e-9:
        R = np.eye(3)
    else:
        angle = math.atan2(nn, float(np.dot(n_s, n_d)))
        from .geom import rotation_from_angle_axis

        R = rotation_from_angle_axis(axis / nn, angle)
    return RigidTransform(R, contact_after - R @ contact_before)


def estimate_motion(obs: ObservationPair, seg: PartSegmentation,
                    mode: str = "icp", max_iter: int = 50,
                    tol: float = 1e-6,
                    anchor_weight: float = 0.25) -> RigidTransform:
    """Rigid motion carrying the mobile part of the before cloud onto the after cloud.

    "oracle" matches points by their stable ids and solves the alignment in
    closed form; "icp" starts from the contact translation and iterates
    point-to-point ICP on the mobile subsets, dropping correspondence pairs
    beyond 3x the median distance each iteration.
    """
    mb, ma = seg.mobile_mask_before, seg.mobile_mask_after
    if not mb.any() or not ma.any():
        raise MotionEstimationError("mobile masks are empty")
    src = obs.before.positions[mb]
    dst = obs.after.positions[ma]

    if mode == "oracle":
        if obs.before.point_ids is None or obs.after.point_ids is None:
            raise MotionEstimationError("oracle mode requires point ids")
        ids_b = obs.before.point_ids[mb]
        ids_a = obs.after.point_ids[ma]
        common, bi, ai = np.intersect1d(ids_b, ids_a, return_indices=True)
        if len(common) < 3:
            raise MotionEstimationError(
                f"only {len(common)} id correspondences (need >= 3)")
        return kabsch(src[bi], dst[ai])

    if mode != "icp":
        raise ValidationError(f"unknown motion estimation mode {mode!r}")

    T = _icp_init(src, dst, obs.contact_before, obs.contact_after)
    tree = cKDTree(dst)
    prev_rms = np.inf
    rising = 0
    for _ in range(max_iter):
        moved = T.apply(src)
        dists, nn = tree.query(moved)
        med = float(np.median(dists))
        keep = dists <= max(3.0 * med, 1e-9)
        if keep.sum() < 3:
            raise MotionEstimationError("ICP lost all correspondences")
        # the recorded contact pair rides along as a weighted correspondence:
        # the pseudo-link guarantees the grasp point moved with the part,
        # which pins the in-plane translation that slab faces leave free
        n_kept = int(keep.sum())
        if anchor_weight > 0.0:
            p_src = np.vstack([src[keep], obs.contact_before[None, :]])
            p_dst = np.vstack([dst[nn[keep]], obs.contact_after[None, :]])
            w = np.ones(n_kept + 1)
            w[-1] = max(1.0, anchor_weight * n_kept)
        else:
            p_src, p_dst = src[keep], dst[nn[keep]]
            w = np.ones(n_kept)
        T = kabsch(p_src, p_dst, weights=w)
        resid = np.linalg.norm(T.apply(src[keep]) - dst[nn[keep]], axis=1)
        rms = float(np.sqrt(np.mean(resid ** 2)))
        # only meaningful growth counts as divergence: RMS wobbles at the
        # noise floor once converged
        if rms > prev_rms * 1.001 + 1e-12:
            rising += 1
            if rising >= 5:
                raise MotionEstimationError("ICP diverged (RMS rose 5 iterations)")
        else:
            rising = 0
        if abs(prev_rms - rms) < tol:
            break
        prev_rms = rms
    return T


def screw_decompose(T: RigidTransform, theta_min: float = math.radians(2.0),
                    motion_epsilon: float = 1e-3) -> JointModel:
    """Factor a rigid transform into a joint model.

    Rotation angle >= theta_min yields a revolute joint: the pivot is the
    minimal-norm solution of (I - R) q = t - (u . t) u, i.e. the axis point
    closest to the origin, and the axis translation component is kept as the
    pitch diagnostic. Otherwise the transform is treated as a pure slide.
    """
    axis, theta = rotation_to_angle_axis(T.rotation)
    t = T.translation
    if theta >= theta_min:
        pitch = float(np.dot(axis, t))
        t_perp = t - pitch * axis
        A = np.eye(3) - T.rotation
        q, *_ = np.linalg.lstsq(A, t_perp, rcond=1e-9)
        return JointModel(REVOLUTE, axis, q, theta, pitch=pitch)
    norm_t = float(np.linalg.norm(t))
    if norm_t < motion_epsilon:
        raise DegenerateMotionError(
            f"rotation {math.degrees(theta):.3f} deg and translation "
            f"{norm_t:.4f} m are both below thresholds")
    return JointModel(PRISMATIC, t / norm_t, None, norm_t)


def _competitive_labels(positions: np.ndarray, moved: np.ndarray,
                        explained: np.ndarray, ambiguity_radius: float,
                        normals: np.ndarray | None = None,
                        normals_valid: np.ndarray | None = None,
                        in_plane_tol: float = 0.0) -> np.ndarray:
    """Final mobile mask for one cloud.

    Confident mobile points moved and are explained by the motion; confident
    static points did not move. Points that moved but have no rigid preimage
    or image (surfaces the motion newly revealed: the back of a drawer front,
    the carcase face behind a door) take the label of the nearer confident
    set, and stay static when no seed lies within `ambiguity_radius`.

    With `in_plane_tol` > 0 an ambiguous point is adopted only when it is
    coplanar with its nearest mobile seed (offset along the seed normal below
    the tolerance), which confines growth to sampling gaps in the seed
    surface and keeps out parallel surfaces one step behind it.
    """
    mobile_seeds = moved & explained
    static_seeds = ~moved
    ambiguous = moved & ~explained
    mask = mobile_seeds.copy()
    if not ambiguous.any() or not mobile_seeds.any():
        return mask
    amb_pts = positions[ambiguous]
    seed_idx = np.flatnonzero(mobile_seeds)
    d_mob, nn = cKDTree(positions[mobile_seeds]).query(amb_pts)
    if static_seeds.any():
        d_sta, _ = cKDTree(positions[static_seeds]).query(amb_pts)
    else:
        d_sta = np.full(len(amb_pts), np.inf)
    take = (d_mob < d_sta) & (d_mob <= ambiguity_radius)
    if in_plane_tol > 0.0 and normals is not None:
        seeds = seed_idx[nn]
        offset = amb_pts - positions[seeds]
        along = np.abs(np.einsum("ni,ni->n", offset, normals[seeds]))
        coplanar = (along <= in_plane_tol) & normals_valid[seeds]
        take &= coplanar
    idx = np.flatnonzero(ambiguous)
    mask[idx[take]] = True
    return mask


def _cloud_normals(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    from .geom import estimate_normals

    k = min(10, len(cloud))
    if k < 3:
        return np.zeros((len(cloud), 3)), np.zeros(len(cloud), dtype=bool)
    return estimate_normals(cloud, k)


def _explained_by(points: np.ndarray, target_tree: cKDTree,
                  target_pos: np.ndarray, target_normals: np.ndarray,
                  target_valid: np.ndarray, fit_epsilon: float,
                  far_cap: float) -> np.ndarray:
    """Points consistent with the target surface.

    Distance to the nearest target sample must stay under `far_cap`, and the
    residual against that sample's local plane under `fit_epsilon`. The plane
    term makes the test robust to sparse grazing-angle sampling; the cap keeps
    far-away points from matching an extended plane. Samples without a valid
    normal fall back to the point distance.
    """
    d, idx = target_tree.query(points)
    offset = points - target_pos[idx]
    plane = np.abs(np.einsum("ni,ni->n", offset, target_normals[idx]))
    by_plane = (d <= far_cap) & (plane <= fit_epsilon) & target_valid[idx]
    return (d <= fit_epsilon) | by_plane


def _consistency_reseg(obs: ObservationPair, T: RigidTransform,
                       anchor: PartSegmentation, epsilon: float,
                       fit_epsilon: float, ambiguity_radius: float,
                       far_cap: float, attach_radius: float
                       ) -> PartSegmentation:
    """Re-segment both clouds by consistency with the estimated motion.

    A point is mobile when it moved, is explained by T (or resolves to the
    mobile side competitively, for revealed surfaces without a rigid
    preimage), and lies near the changed component selected by detect_change.
    The last condition drops occlusion shadows on far surfaces parallel to
    the motion, which T cannot reject on its own.
    """
    tree_b = cKDTree(obs.before.positions)
    tree_a = cKDTree(obs.after.positions)
    nrm_b, val_b = _cloud_normals(obs.before)
    nrm_a, val_a = _cloud_normals(obs.after)

    moved_b, moved_a = change_candidates(obs, epsilon, far_cap)
    fit_b = _explained_by(T.apply(obs.before.positions), tree_a,
                          obs.after.positions, nrm_a, val_a, fit_epsilon,
                          far_cap)
    # before side grows only along the seed surface: unexplained moved points
    # here are either sampling gaps of the part's image (coplanar) or
    # occlusion shadows of its new pose (offset behind the part)
    mask_b = _competitive_labels(obs.before.positions, moved_b,
                                 fit_b, ambiguity_radius, normals=nrm_b,
                                 normals_valid=val_b,
                                 in_plane_tol=fit_epsilon)
    Ti = T.inverse()
    fit_a = _explained_by(Ti.apply(obs.after.positions), tree_b,
                          obs.before.positions, nrm_b, val_b, fit_epsilon,
                          far_cap)
    mask_a = _competitive_labels(obs.after.positions, moved_a,
                                 fit_a, ambiguity_radius)

    if anchor.mobile_mask_before.any():
        near, _ = cKDTree(obs.before.positions[anchor.mobile_mask_before]
                          ).query(obs.before.positions)
        mask_b &= near <= attach_radius
    if anchor.mobile_mask_after.any():
        near, _ = cKDTree(obs.after.positions[anchor.mobile_mask_after]
                          ).query(obs.after.positions)
        mask_a &= near <= attach_radius
    return PartSegmentation(mask_b, mask_a)


def _fit_slab(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """PCA frame and local extents of a point set: (mean, axes, lows, highs).

    Axes are eigenvectors in ascending-variance order, so column 0 is the
    slab normal.
    """
    mean = points.mean(axis=0)
    cov = np.cov((points - mean).T)
    _, axes = np.linalg.eigh(np.atleast_2d(cov))
    local = (points - mean) @ axes
    return mean, axes, local.min(axis=0), local.max(axis=0)


def _box_closure(positions: np.ndarray, mask: np.ndarray, slab,
                 transform: RigidTransform | None,
                 slab_margin: float, normal_margin: float) -> np.ndarray:
    """Close a mobile mask over the slab the before mask outlines.

    Mobile parts are box panels, so points the motion tests cannot classify
    (the near-axis sliver, edge faces moving within their own planes) are
    reclaimed by taking in every point on the fitted slab: generous along the
    two slab axes, tight along the thin axis so surfaces one standoff behind
    the panel stay out. `transform` maps the slab to this cloud's pose.
    """
    mean, axes, lows, highs = slab
    if transform is not None:
        mean = transform.apply(mean)
        axes = transform.rotation @ axes
    local = (positions - mean) @ axes
    margin = np.array([normal_margin, slab_margin, slab_margin])
    inside = np.all((local >= lows - margin) & (local <= highs + margin),
                    axis=1)
    return mask | inside


def infer_articulation(obs: ObservationPair, config: InferenceConfig | None = None
                       ) -> tuple[JointModel, PartSegmentation]:
    """Full chain: detect change, estimate motion, decompose into a joint.

    The revolute axis is oriented so the observed state is positive
    (right-hand rule along the motion); prismatic axes point along the
    observed translation. Sub-stage failures propagate as InferenceError
    naming the stage.
    """
    config = config or InferenceConfig()
    try:
        seg = detect_change(obs, config.epsilon, config.component_radius,
                            config.use_contact_heat)
    except (NoMotionError, ValidationError) as e:
        raise InferenceError(f"change_detection: {e}") from e
    anchor = seg
    try:
        T = estimate_motion(obs, seg, config.mode, config.icp_max_iter,
                            config.icp_tol, config.anchor_weight)
        for _ in range(config.reseg_rounds):
            refined = _consistency_reseg(obs, T, anchor, config.epsilon,
                                         config.fit_epsilon,
                                         config.ambiguity_radius,
                                         config.fit_far_cap,
                                         config.attach_radius)
            if not (refined.mobile_mask_before.any()
                    and refined.mobile_mask_after.any()):
                break
            seg = refined
            T = estimate_motion(obs, seg, config.mode, config.icp_max_iter,
                                config.icp_tol, config.anchor_weight)
        if config.close_slab_margin > 0.0 and seg.mobile_mask_before.sum() >= 8:
            slab = _fit_slab(obs.before.positions[seg.mobile_mask_before])
            seg = PartSegmentation(
                _box_closure(obs.before.positions, seg.mobile_mask_before,
                             slab, None, config.close_slab_margin,
                             config.close_normal_margin),
                _box_closure(obs.after.positions, seg.mobile_mask_after,
                             slab, T, config.close_slab_margin,
                             config.close_normal_margin))
    except MotionEstimationError as e:
        raise InferenceError(f"motion_estimation: {e}") from e
    try:
        joint = screw_decompose(T, config.theta_min, config.motion_epsilon)
    except DegenerateMotionError as e:
        raise InferenceError(f"screw_decomposition: {e}") from e
    return joint, seg

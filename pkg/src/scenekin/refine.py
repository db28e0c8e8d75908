"""Iterative refinement: re-pull partially opened hinges for larger motion.

A coarse hinge estimate already says where force is effective: the mobile
point farthest from the axis gives the longest lever arm, and the moment
direction (axis cross lever) is the tangent the part can actually follow.
Re-interacting there opens the joint further, and re-running inference
against the original before cloud measures the accumulated opening, which is
what the coverage thresholds care about. Sliding joints pass through
untouched since a single pull already opens them fully.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dataclasses import replace as dc_replace

from .artinfer import (
    REVOLUTE,
    InferenceConfig,
    JointModel,
    ObservationPair,
    PartSegmentation,
    infer_articulation,
    make_observation_pair,
)
from .errors import (
    CaptureError,
    InferenceError,
    PreconditionError,
    RefinementUnavailable,
    ValidationError,
)
from .geom import closest_point_on_line
from .sensing import CaptureConfig, capture_interaction_after
from .simworld import (
    PullBudget,
    SceneSpec,
    gripper_clearance,
    interact,
    project_to_surface,
    surface_normal,
)


@dataclass(frozen=True)
class RefinementPlan:
    """Next interaction: grasp the lever tip, push along the moment direction."""

    hotspot: np.ndarray
    force_direction: np.ndarray
    joint: JointModel


@dataclass(frozen=True)
class RefineConfig:
    target_state: float = math.radians(30.0)
    max_iters: int = 2
    gripper_radius: float = 0.04
    # a re-estimate whose axis swings further than this from the current one
    # is treated as a failed fit and rejected
    axis_consistency_deg: float = 15.0


@dataclass(frozen=True)
class RefineResult:
    joint: JointModel
    segmentation: PartSegmentation
    log: tuple[dict, ...]
    scene: SceneSpec
    observation: ObservationPair


def part_affordance(joint: JointModel, seg: PartSegmentation,
                    cloud, scene: SceneSpec,
                    gripper_radius: float = 0.04) -> RefinementPlan:
    """Plan the next pull from a hinge estimate and its mobile segmentation.

    `cloud` is the post-interaction observation; the mobile point farthest
    from the axis line wins (ties to the lowest index), falling back to the
    farthest point with gripper clearance. The force direction is the moment
    of the axis at that point, signed to continue the observed opening.
    """
    if joint.kind != REVOLUTE:
        raise ValidationError("part-level planning applies to revolute joints")
    mask = seg.mobile_mask_after
    if len(mask) != len(cloud):
        raise ValidationError("segmentation does not align with the cloud")
    if not mask.any():
        raise RefinementUnavailable("mobile mask is empty")
    pts = cloud.positions[mask]
    axis_pts = np.array([closest_point_on_line(p, joint.pivot, joint.axis)
                         for p in pts])
    dists = np.linalg.norm(pts - axis_pts, axis=1)
    order = np.lexsort((np.arange(len(pts)), -dists))
    sign = 1.0 if joint.state >= 0 else -1.0
    for k in order:
        p = pts[k]
        r_vec = p - axis_pts[k]
        r = float(np.linalg.norm(r_vec))
        if r < 1e-9:
            continue
        direction = sign * np.cross(joint.axis, r_vec / r)
        normal = surface_normal(scene, p)
        if gripper_clearance(scene, p, normal, gripper_radius):
            return RefinementPlan(p.copy(), direction, joint)
    raise RefinementUnavailable("no mobile point with gripper clearance")


def refine_loop(scene: SceneSpec, obs: ObservationPair, joint: JointModel,
                seg: PartSegmentation, refine_config: RefineConfig | None = None,
                infer_config: InferenceConfig | None = None,
                capture_config: CaptureConfig | None = None,
                budget: PullBudget | None = None,
                rng: np.random.Generator | None = None) -> RefineResult:
    """Open a partially moved hinge further and re-estimate it.

    Each iteration plans with part_affordance, pulls, recaptures the after
    cloud, and re-infers against the ORIGINAL before cloud so the state
    tracks total opening. A new estimate is kept only when its |state|
    strictly increased. Interaction or capture failures end the loop with the
    best estimate so far; prismatic inputs pass through unchanged.
    """
    refine_config = refine_config or RefineConfig()
    infer_config = infer_config or InferenceConfig()
    capture_config = capture_config or CaptureConfig()
    budget = budget or PullBudget()
    log: list[dict] = []
    iters = 0
    while (joint.kind == REVOLUTE
           and abs(joint.state) < refine_config.target_state
           and iters < refine_config.max_iters):
        iters += 1
        entry: dict = {"iteration": iters}
        try:
            plan = part_affordance(joint, seg, obs.after, scene,
                                   refine_config.gripper_radius)
        except RefinementUnavailable as e:
            entry["status"] = f"unavailable: {e}"
            log.append(entry)
            break
        entry["hotspot"] = plan.hotspot.tolist()
        entry["direction"] = plan.force_direction.tolist()
        try:
            grasp = project_to_surface(scene, plan.hotspot)
            outcome, scene = interact(scene, grasp, plan.force_direction,
                                      budget)
        except (PreconditionError, ValidationError) as e:
            entry["status"] = f"interaction error: {e}"
            log.append(entry)
            break
        entry["delta_state"] = outcome.delta_state
        if not outcome.success:
            entry["status"] = "pull did not move the part"
            log.append(entry)
            break
        try:
            after = capture_interaction_after(
                scene, obs.contact_before, list(obs.capture_poses),
                outcome.final_contact, capture_config, rng)
        except CaptureError as e:
            entry["status"] = f"capture error: {e}"
            log.append(entry)
            break
        # the original grasp point must be tracked through this pull before
        # the accumulated pair can be inferred: estimate the incremental
        # motion (whose contact pair p* -> final IS valid) and advect with it
        try:
            step_obs = make_observation_pair(
                obs.after, after, plan.hotspot, outcome.final_contact,
                infer_config.heat_sigma)
            _, step_seg = infer_articulation(step_obs, infer_config)
            from .artinfer import estimate_motion

            step_T = estimate_motion(step_obs, step_seg, infer_config.mode,
                                     infer_config.icp_max_iter,
                                     infer_config.icp_tol)
            contact_now = step_T.apply(obs.contact_after)
        except (InferenceError, ValidationError) as e:
            entry["status"] = f"step tracking error: {e}"
            log.append(entry)
            break
        new_obs = make_observation_pair(
            obs.before, after, obs.contact_before, contact_now,
            infer_config.heat_sigma, capture_poses=obs.capture_poses)
        # the dead-reckoned contact carries the step-estimation error, so it
        # serves as initialization only; the accumulated rotation is large
        # enough to pin the fit by itself
        accum_config = dc_replace(infer_config, anchor_weight=0.02)
        try:
            new_joint, new_seg = infer_articulation(new_obs, accum_config)
        except InferenceError as e:
            entry["status"] = f"inference error: {e}"
            log.append(entry)
            break
        axis_swing = math.degrees(math.atan2(
            float(np.linalg.norm(np.cross(new_joint.axis, joint.axis))),
            abs(float(np.dot(new_joint.axis, joint.axis)))))
        if (new_joint.kind == REVOLUTE
                and abs(new_joint.state) > abs(joint.state)
                and axis_swing <= refine_config.axis_consistency_deg):
            joint, seg, obs = new_joint, new_seg, new_obs
            entry["status"] = "accepted"
            entry["state"] = new_joint.state
        else:
            entry["status"] = "rejected (no |state| increase or axis swing)"
        log.append(entry)
    return RefineResult(joint, seg, tuple(log), scene, obs)

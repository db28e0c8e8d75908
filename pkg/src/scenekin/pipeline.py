"""End-to-end orchestration: scene generation, label collection, training,
the probe-observe-infer-refine loop, and evaluation.

Every command is a pure function of (config, input files, seed): child seeds
fan out from the global seed via config.derive_seed, artifacts embed the
config hash, and JSON is written with sorted keys so repeated runs are
byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import affordance, evalkit, hotspot, scenemodel, sensing, simworld
from .artinfer import (
    REVOLUTE,
    InferenceConfig,
    make_observation_pair,
    infer_articulation,
)
from .config import PipelineConfig, config_hash, derive_seed
from .errors import (
    ArtifactError,
    CaptureError,
    InferenceError,
    PreconditionError,
    SceneKinError,
    ValidationError,
)
from .geom import PointCloud, load_cloud_binary, save_cloud_binary
from .refine import refine_loop
from .simworld import SceneSpec, project_to_surface


def _write_json(doc: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def observe_interaction(scene: SceneSpec, contact, direction,
                        config: PipelineConfig,
                        rng: np.random.Generator | None = None,
                        poses=None):
    """Capture-before, pull, capture-after around one contact.

    Returns (obs, outcome, scene_after)."""
    cap = config.capture
    if poses is None:
        poses = sensing.object_view_poses(scene, contact, cap)
    before, poses = sensing.capture_object_views(scene, contact, cap,
                                                 poses=poses, rng=rng)
    outcome, scene_after = simworld.interact(
        scene, contact, direction, config.interaction.pull,
        config.interaction.motion_epsilon)
    after = sensing.capture_interaction_after(
        scene_after, contact, poses, outcome.final_contact, cap, rng)
    obs = make_observation_pair(before, after, contact, outcome.final_contact,
                                config.inference.heat_sigma,
                                capture_poses=tuple(poses))
    return obs, outcome, scene_after


# ---------------------------------------------------------------------------
# gen-scenes
# ---------------------------------------------------------------------------

def gen_scenes(config: PipelineConfig, out_dir) -> dict:
    """Write n_scenes seeded scene_spec.v1 files plus an index manifest."""
    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(config)
    entries = []
    for k in range(config.run.n_scenes):
        seed = derive_seed(config.seed, "scene", k)
        scene = simworld.generate_scene(seed, config.generation)
        fname = f"scene_{k:04d}.json"
        simworld.save_scene(scene, os.path.join(out_dir, fname), chash)
        entries.append({
            "file": fname,
            "seed": seed,
            "n_parts": len(scene.parts),
            "n_joints": len(scene.joints),
        })
    manifest = {"version": "scene_manifest.v1", "config_hash": chash,
                "root_seed": config.seed, "scenes": entries}
    _write_json(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def load_scene_dir(scenes_dir) -> list[SceneSpec]:
    manifest_path = os.path.join(scenes_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ArtifactError(f"no manifest.json in {scenes_dir}")
    manifest = _read_json(manifest_path)
    return [simworld.load_scene(os.path.join(scenes_dir, e["file"]))
            for e in manifest["scenes"]]


# ---------------------------------------------------------------------------
# collect
# ---------------------------------------------------------------------------

def collect(config: PipelineConfig, scenes_dir, out_dir) -> dict:
    """Scene clouds plus interaction-probe label sets for every scene."""
    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(config)
    scenes = load_scene_dir(scenes_dir)
    entries = []
    for scene in scenes:
        try:
            rng = np.random.default_rng(
                derive_seed(config.seed, "collect-capture", scene.seed))
            cloud = sensing.capture_scene_cloud(scene, config.capture, rng)
            labels = affordance.collect_labels(
                scene, cloud, config.affordance.samples_per_scene,
                derive_seed(config.seed, "collect-labels", scene.seed),
                config.interaction.gripper_radius, config.interaction.pull,
                config.interaction.motion_epsilon)
        except SceneKinError as e:
            entries.append({"seed": scene.seed, "status": f"failed: {e}"})
            continue
        cloud_file = f"scene_{scene.seed}_cloud.xyzb"
        labels_file = f"scene_{scene.seed}_labels.json"
        save_cloud_binary(cloud, os.path.join(out_dir, cloud_file))
        _write_json(affordance.labels_to_dict(labels, scene.seed),
                    os.path.join(out_dir, labels_file))
        counts = {v: labels.labels.count(v)
                  for v in (affordance.POSITIVE, affordance.NEGATIVE,
                            affordance.IGNORE)}
        entries.append({"seed": scene.seed, "status": "ok",
                        "cloud": cloud_file, "labels": labels_file,
                        "counts": counts})
    manifest = {"version": "collect_manifest.v1", "config_hash": chash,
                "root_seed": config.seed, "scenes": entries}
    _write_json(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _feature_config_kwargs(config: PipelineConfig) -> dict:
    aff = config.affordance
    return dict(radius=aff.feature_radius, k_normals=aff.k_normals,
                voxel=config.capture.voxel,
                variation_threshold=aff.variation_threshold,
                discontinuity_cap=aff.discontinuity_cap)


def train_model(config: PipelineConfig, dataset_dir, out_dir) -> dict:
    """Train the affordance classifier from a collect output directory."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = _read_json(os.path.join(dataset_dir, "manifest.json"))
    dataset = []
    for entry in manifest["scenes"]:
        if entry.get("status") != "ok":
            continue
        cloud = load_cloud_binary(os.path.join(dataset_dir, entry["cloud"]))
        labels = affordance.labels_from_dict(
            _read_json(os.path.join(dataset_dir, entry["labels"])))
        feats = affordance.extract_features(cloud,
                                            **_feature_config_kwargs(config))
        dataset.append((feats, labels))
    train_cfg = replace(config.affordance.train,
                        seed=derive_seed(config.seed, "train"))
    model, log = affordance.train(dataset, train_cfg)
    chash = config_hash(config)
    model_path = os.path.join(out_dir, "model.json")
    affordance.save_model(model, model_path, chash, config.seed)
    with open(os.path.join(out_dir, "train_log.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss",
                                                "val_loss"])
        writer.writeheader()
        writer.writerows(log)
    return {"model": model_path, "epochs": len(log),
            "final_val_loss": log[-1]["val_loss"] if log else None}


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _gt_joint_dict(scene: SceneSpec, joint_index: int) -> dict:
    _, gt = scene.joints[joint_index]
    return {
        "index": joint_index,
        "type": gt.joint_type,
        "axis": gt.axis.tolist(),
        "pivot": None if gt.pivot is None else gt.pivot.tolist(),
    }


def _segmentation_iou_vs_oracle(obs, seg, part_index: int) -> float | None:
    if obs.before.part_ids is None or obs.after.part_ids is None:
        return None
    vals = []
    for mask, cloud in ((seg.mobile_mask_before, obs.before),
                        (seg.mobile_mask_after, obs.after)):
        gt = cloud.part_ids == part_index
        vals.append(evalkit.segmentation_iou(mask, gt))
    return float(np.mean(vals))


def run_scene(scene: SceneSpec, model: affordance.AffordanceModel,
              config: PipelineConfig, refine_enabled: bool = True,
              use_contact_heat: bool = True, mode: str | None = None) -> dict:
    """Full interactive loop on one scene; returns the run record.

    Probes the NMS hotspots in score order: clearance check, canonical pulls
    (first engaging direction wins), before/after capture, articulation
    inference, optional refinement. The scene carries accumulated state
    between hotspots (opened parts stay open).
    """
    infer_cfg: InferenceConfig = replace(
        config.inference, use_contact_heat=use_contact_heat,
        mode=mode or config.inference.mode)
    rng = np.random.default_rng(derive_seed(config.seed, "run", scene.seed))
    cloud = sensing.capture_scene_cloud(scene, config.capture, rng)
    feats = affordance.extract_features(cloud, **_feature_config_kwargs(config))
    scores = affordance.predict(model, feats)
    spots = hotspot.nms(cloud, scores, config.hotspot.radius,
                        config.hotspot.score_threshold)

    interactions: list[dict] = []
    inferences: list[dict] = []
    estimates = []
    refinement_logs = []
    current = scene
    probes = 0
    picked = []
    for hid, spot in enumerate(spots.items):
        if probes >= config.run.max_hotspots:
            break
        picked.append(spot)
        record = {"hotspot_id": hid, "stage": "initial", "success": False,
                  "moved_joint": None, "delta_state": 0.0}
        try:
            contact = project_to_surface(current, spot.position,
                                         config.interaction.snap_tolerance)
        except PreconditionError:
            record["status"] = "off surface"
            record["stage"] = "skipped"
            interactions.append(record)
            continue
        normal = simworld.surface_normal(current, contact)
        if not simworld.gripper_clearance(current, contact, normal,
                                          config.interaction.gripper_radius):
            record["status"] = "no gripper clearance"
            record["stage"] = "skipped"
            interactions.append(record)
            continue
        try:
            poses = sensing.object_view_poses(current, contact, config.capture)
        except CaptureError as e:
            record["status"] = f"capture error: {e}"
            record["stage"] = "skipped"
            interactions.append(record)
            continue

        probes += 1
        obs = outcome = after_scene = None
        for direction in simworld.canonical_pull_directions(normal):
            try:
                obs, outcome, after_scene = observe_interaction(
                    current, contact, direction, config, rng, poses=poses)
            except (PreconditionError, ValidationError, CaptureError) as e:
                record["status"] = f"interaction error: {e}"
                break
            if outcome.engaged:
                break
        if outcome is None:
            interactions.append(record)
            continue
        record["success"] = bool(outcome.success)
        record["moved_joint"] = outcome.moved_joint
        record["delta_state"] = float(outcome.delta_state)
        interactions.append(record)
        if not outcome.success:
            continue
        current = after_scene

        try:
            joint, seg = infer_articulation(obs, infer_cfg)
        except InferenceError as e:
            inferences.append({"hotspot_id": hid, "status": f"failed: {e}",
                               "gt_joint": _gt_joint_dict(scene,
                                                          outcome.moved_joint)})
            continue

        if refine_enabled and joint.kind == REVOLUTE:
            result = refine_loop(current, obs, joint, seg, config.refine,
                                 infer_cfg, config.capture,
                                 config.interaction.pull, rng)
            for entry in result.log:
                if "delta_state" in entry:
                    interactions.append({
                        "hotspot_id": hid, "stage": "refine",
                        "success": entry.get("status") not in
                        ("pull did not move the part",),
                        "moved_joint": outcome.moved_joint
                        if entry.get("delta_state") else None,
                        "delta_state": float(entry.get("delta_state", 0.0)),
                    })
            refinement_logs.append({"hotspot_id": hid,
                                    "log": list(result.log)})
            joint, seg, current, obs = (result.joint, result.segmentation,
                                        result.scene, result.observation)

        iou = _segmentation_iou_vs_oracle(obs, seg, scene.joints[
            outcome.moved_joint][0])
        inferences.append({
            "hotspot_id": hid,
            "status": "ok",
            "kind": joint.kind,
            "axis": joint.axis.tolist(),
            "pivot": None if joint.pivot is None else joint.pivot.tolist(),
            "state": float(joint.state),
            "iou": iou,
            "gt_joint": _gt_joint_dict(scene, outcome.moved_joint),
        })
        mobile_pts = obs.after.positions[seg.mobile_mask_after]
        estimates.append((joint, mobile_pts, hid))

    agg = config.aggregate
    model_out = scenemodel.aggregate(
        estimates, agg.merge_angle_deg, agg.merge_line_dist, agg.merge_iou,
        agg.iou_voxel)
    model_out = replace(model_out, scene_seed=scene.seed,
                        config_hash=config_hash(config))
    return {
        "scene_seed": scene.seed,
        "hotspots": hotspot.hotspots_to_dict(
            hotspot.HotspotSet(tuple(picked), spots.radius)),
        "interactions": interactions,
        "inferences": inferences,
        "refinements": refinement_logs,
        "model": model_out,
        "gt_joints": [_gt_joint_dict(scene, j)
                      for j in range(len(scene.joints))],
        "final_scene": current,
    }


def _run_scene_job(args):
    scene_path, model_path, config, flags = args
    scene = simworld.load_scene(scene_path)
    model = affordance.load_model(model_path)
    record = run_scene(scene, model, config,
                       refine_enabled=flags["refine"],
                       use_contact_heat=flags["regularity"],
                       mode=flags["mode"])
    return record


def run(config: PipelineConfig, scenes_dir, model_path, out_dir,
        refine_enabled: bool | None = None, use_contact_heat: bool = True,
        mode: str | None = None) -> dict:
    """Run the full loop over every scene in `scenes_dir`; write artifacts.

    Per scene: inference.v1 JSON (hotspots, interactions, inferences,
    refinement logs) and a scene_model.v1 export. A scene only counts as
    failed when its initial scene capture fails.
    """
    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(config)
    manifest = _read_json(os.path.join(scenes_dir, "manifest.json"))
    flags = {
        "refine": config.run.refine if refine_enabled is None else refine_enabled,
        "regularity": use_contact_heat,
        "mode": mode or config.inference.mode,
    }
    jobs = [(os.path.join(scenes_dir, e["file"]), model_path, config, flags)
            for e in manifest["scenes"]]
    if config.run.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.run.workers) as pool:
            records = list(pool.map(_run_scene_job, jobs))
    else:
        records = [_run_scene_job(j) for j in jobs]

    entries = []
    for record in sorted(records, key=lambda r: r["scene_seed"]):
        seed = record["scene_seed"]
        inf_file = f"run_{seed}_inference.json"
        model_file = f"run_{seed}_model.json"
        doc = {
            "version": "inference.v1",
            "config_hash": chash,
            "scene_seed": seed,
            "flags": flags,
            "hotspots": record["hotspots"],
            "interactions": record["interactions"],
            "inferences": record["inferences"],
            "refinements": record["refinements"],
            "gt_joints": record["gt_joints"],
        }
        _write_json(doc, os.path.join(out_dir, inf_file))
        scenemodel.export_model(record["model"],
                                os.path.join(out_dir, model_file))
        entries.append({"seed": seed, "inference": inf_file,
                        "model": model_file,
                        "entries": len(record["model"].entries)})
    run_manifest = {"version": "run_manifest.v1", "config_hash": chash,
                    "root_seed": config.seed, "flags": flags,
                    "scenes": entries}
    _write_json(run_manifest, os.path.join(out_dir, "manifest.json"))
    return run_manifest


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def evaluate(config: PipelineConfig, run_dir, scenes_dir, out_dir,
             force: bool = False) -> evalkit.EvalReport:
    """Score a run against the generator's ground truth; write report files."""
    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(config)
    run_manifest = _read_json(os.path.join(run_dir, "manifest.json"))
    if run_manifest.get("config_hash") != chash and not force:
        raise ArtifactError(
            "run artifacts were produced under a different config "
            f"({run_manifest.get('config_hash')} != {chash}); pass force to "
            "evaluate anyway")
    scenes = []
    for entry in run_manifest["scenes"]:
        doc = _read_json(os.path.join(run_dir, entry["inference"]))
        scenes.append({
            "scene_seed": doc["scene_seed"],
            "interactions": doc["interactions"],
            "inferences": [i for i in doc["inferences"]
                           if i.get("status") == "ok"],
            "gt_joints": doc["gt_joints"],
        })
    report = evalkit.build_report(scenes)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(evalkit.report_to_json(report, chash, config.seed))
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(evalkit.render_table(report) + "\n")
    rows = evalkit.per_joint_csv_rows(scenes)
    with open(os.path.join(out_dir, "per_joint.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "scene_seed", "hotspot_id", "joint_type", "angle_error_deg",
            "position_error_m", "iou"])
        writer.writeheader()
        writer.writerows(rows)
    return report

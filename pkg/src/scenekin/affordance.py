"""Interaction affordance: exploration-driven labels and a point-wise classifier.

Labels come from the simulator itself: sampled surface points are probed with
the canonical pulls and labeled positive when any pull moves an articulated
part. The classifier scores each scene point from ten handcrafted geometric
features (height, verticality, covariance shape, density, neighborhood color,
distance to the nearest surface discontinuity) with a logistic head or a
small one-hidden-layer network, trained on the combined cross-entropy and
dice loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import PreconditionError, TrainingError, ValidationError
from .geom import PointCloud, estimate_normals
from .simworld import (
    PullBudget,
    SceneSpec,
    canonical_pull_directions,
    gripper_clearance,
    interact,
    surface_normal,
)

FEATURE_DIM = 10
FEATURE_NAMES = (
    "height", "normal_up", "planarity", "linearity", "sphericity",
    "density", "color_r", "color_g", "color_b", "discontinuity_dist",
)

POSITIVE, NEGATIVE, IGNORE = "positive", "negative", "ignore"


@dataclass(frozen=True)
class FeatureSet:
    """Per-point feature matrix plus a validity flag for degenerate points."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != FEATURE_DIM:
            raise ValidationError(f"features must be (N, {FEATURE_DIM})")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid",
                           np.asarray(self.valid, dtype=bool))

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class AffordanceLabelSet:
    """Sampled point indices into a scene cloud with probe outcomes."""

    indices: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if len(idx) != len(self.labels):
            raise ValidationError("labels must align with sampled indices")
        if any(l not in (POSITIVE, NEGATIVE, IGNORE) for l in self.labels):
            raise ValidationError("unknown label value")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "labels", tuple(self.labels))


def extract_features(cloud: PointCloud, radius: float = 0.05,
                     k_normals: int = 12, voxel: float = 0.02,
                     variation_threshold: float = 0.02,
                     discontinuity_cap: float = 0.5) -> FeatureSet:
    """Deterministic geometric features for every cloud point.

    Covariance shape ratios (planarity, linearity, sphericity) come from the
    `radius` neighborhood; density is the neighbor count normalized by the
    expected flat-surface count at the capture voxel size. Points whose
    neighborhood is degenerate (fewer than 3 neighbors or a rank-deficient
    normal) are flagged invalid and zeroed.
    """
    n = len(cloud)
    if n == 0:
        raise ValidationError("cannot extract features from an empty cloud")
    pos = cloud.positions
    tree = cKDTree(pos)
    neighbor_lists = tree.query_ball_point(pos, r=radius)
    counts = np.array([len(l) for l in neighbor_lists], dtype=np.int64)
    centers = np.repeat(np.arange(n), counts)
    neighbors = np.concatenate(neighbor_lists) if n else np.zeros(0, np.int64)

    npos = pos[neighbors]
    sums = np.zeros((n, 3))
    for k in range(3):
        sums[:, k] = np.bincount(centers, weights=npos[:, k], minlength=n)
    mean = sums / counts[:, None]
    sq = np.zeros((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            m = np.bincount(centers, weights=npos[:, a] * npos[:, b],
                            minlength=n) / counts
            sq[:, a, b] = sq[:, b, a] = m
    cov = sq - np.einsum("ni,nj->nij", mean, mean)
    w = np.linalg.eigvalsh(cov)            # ascending
    lam3, lam2, lam1 = w[:, 0], w[:, 1], w[:, 2]
    lam3 = np.maximum(lam3, 0.0)
    safe1 = np.maximum(lam1, 1e-18)
    linearity = (lam1 - lam2) / safe1
    planarity = (lam2 - lam3) / safe1
    sphericity = lam3 / safe1
    variation = lam3 / np.maximum(lam1 + lam2 + lam3, 1e-18)

    k_eff = min(k_normals, n)
    if k_eff >= 3:
        normals, normals_valid = estimate_normals(cloud, k_eff)
    else:
        normals = np.zeros((n, 3))
        normals_valid = np.zeros(n, dtype=bool)

    valid = normals_valid & (counts >= 3) & (lam1 > 1e-18)

    n_ref = math.pi * radius * radius / (voxel * voxel)
    density = np.minimum(counts / n_ref, 2.0) / 2.0

    if cloud.colors is not None:
        csum = np.zeros((n, 3))
        ncol = cloud.colors[neighbors]
        for k in range(3):
            csum[:, k] = np.bincount(centers, weights=ncol[:, k], minlength=n)
        mean_color = csum / counts[:, None]
    else:
        mean_color = np.zeros((n, 3))

    disc = variation > variation_threshold
    if disc.any():
        ddist, _ = cKDTree(pos[disc]).query(pos)
        ddist = np.minimum(ddist, discontinuity_cap)
    else:
        ddist = np.full(n, discontinuity_cap)

    feats = np.column_stack([
        pos[:, 2], normals[:, 2], planarity, linearity, sphericity,
        density, mean_color[:, 0], mean_color[:, 1], mean_color[:, 2], ddist,
    ])
    feats[~valid] = 0.0
    return FeatureSet(feats, valid)


def collect_labels(scene: SceneSpec, cloud: PointCloud, n_samples: int,
                   seed: int, gripper_radius: float = 0.04,
                   budget: PullBudget | None = None,
                   motion_epsilon: float = 1e-3) -> AffordanceLabelSet:
    """Probe uniformly sampled cloud points and record the outcomes.

    Points without gripper clearance are labeled ignore; the rest get the
    three canonical pulls against a pristine copy of the scene (state resets
    between attempts) and are positive iff any pull moves a part.
    """
    if n_samples < 1:
        raise ValidationError("need at least one sample")
    rng = np.random.default_rng(seed)
    take = min(n_samples, len(cloud))
    indices = rng.choice(len(cloud), size=take, replace=False)
    budget = budget or PullBudget()
    labels = []
    for i in indices:
        point = cloud.positions[i]
        normal = surface_normal(scene, point)
        if not gripper_clearance(scene, point, normal, gripper_radius):
            labels.append(IGNORE)
            continue
        outcome_label = NEGATIVE
        for direction in canonical_pull_directions(normal):
            try:
                outcome, _ = interact(scene, point, direction, budget,
                                      motion_epsilon)
            except PreconditionError:
                outcome_label = IGNORE
                break
            if outcome.success:
                outcome_label = POSITIVE
                break
        labels.append(outcome_label)
    return AffordanceLabelSet(indices, tuple(labels))


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffordanceModel:
    """Logistic head over standardized features, optionally with one tanh
    hidden layer of width `hidden` (0 = plain logistic regression)."""

    hidden: int
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    w1: np.ndarray | None   # (F, H) when hidden > 0
    b1: np.ndarray | None   # (H,)
    w2: np.ndarray          # (H,) or (F,)
    b2: float

    def params(self) -> np.ndarray:
        if self.hidden > 0:
            return np.concatenate([self.w1.ravel(), self.b1, self.w2,
                                   [self.b2]])
        return np.concatenate([self.w2, [self.b2]])

    def with_params(self, flat: np.ndarray) -> "AffordanceModel":
        flat = np.asarray(flat, dtype=np.float64)
        f = FEATURE_DIM
        if self.hidden > 0:
            h = self.hidden
            w1 = flat[:f * h].reshape(f, h)
            b1 = flat[f * h:f * h + h]
            w2 = flat[f * h + h:f * h + 2 * h]
            b2 = float(flat[-1])
            return replace(self, w1=w1, b1=b1, w2=w2, b2=b2)
        return replace(self, w2=flat[:f], b2=float(flat[-1]))


def init_model(hidden: int = 0, seed: int = 0) -> AffordanceModel:
    rng = np.random.default_rng(seed)
    f = FEATURE_DIM
    mean = np.zeros(f)
    std = np.ones(f)
    if hidden > 0:
        w1 = rng.normal(0.0, 1.0 / math.sqrt(f), size=(f, hidden))
        b1 = np.zeros(hidden)
        w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=hidden)
        return AffordanceModel(hidden, mean, std, w1, b1, w2, 0.0)
    w = rng.normal(0.0, 1.0 / math.sqrt(f), size=f)
    return AffordanceModel(0, mean, std, None, None, w, 0.0)


def _forward(model: AffordanceModel, x: np.ndarray):
    """Logits plus hidden activations (None for the logistic head)."""
    if model.hidden > 0:
        h = np.tanh(x @ model.w1 + model.b1)
        return h @ model.w2 + model.b2, h
    return x @ model.w2 + model.b2, None


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_and_grad(model: AffordanceModel, x: np.ndarray, y: np.ndarray,
                  lambda_dice: float = 1.0, dice_eps: float = 1e-7
                  ) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy plus dice loss and its exact gradient.

    `x` holds standardized features of the non-ignored points, `y` their 0/1
    labels. The gradient is flattened in the order of ``model.params()``.
    """
    m = len(x)
    if m == 0:
        raise TrainingError("no labeled points in the batch")
    y = np.asarray(y, dtype=np.float64)
    z, h = _forward(model, x)
    p = _sigmoid(z)
    # stable log-sigmoid: log(1 + exp(-|z|)) + max(z, 0) - z*y
    ce_terms = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - z * y
    ce = float(np.mean(ce_terms))
    s = float(p.sum() + y.sum() + dice_eps)
    q = float((p * y).sum())
    dice = 1.0 - 2.0 * q / s
    loss = ce + lambda_dice * dice

    dz = (p - y) / m
    ddice_dp = -2.0 * (y * s - q) / (s * s)
    dz = dz + lambda_dice * ddice_dp * p * (1.0 - p)

    if model.hidden > 0:
        gw2 = h.T @ dz
        gb2 = float(dz.sum())
        dh = np.outer(dz, model.w2) * (1.0 - h * h)
        gw1 = x.T @ dh
        gb1 = dh.sum(axis=0)
        grad = np.concatenate([gw1.ravel(), gb1, gw2, [gb2]])
    else:
        grad = np.concatenate([x.T @ dz, [float(dz.sum())]])
    return loss, grad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 600
    learning_rate: float = 0.5
    momentum: float = 0.9
    hidden: int = 16
    lambda_dice: float = 1.0
    val_fraction: float = 0.25
    seed: int = 0


def _design_matrix(entries, drop_invalid=True):
    """Stack (features, labels) pairs into X (raw), y arrays."""
    xs, ys = [], []
    for feats, labelset in entries:
        vals = feats.values[labelset.indices]
        valid = feats.valid[labelset.indices]
        lab = np.array(labelset.labels)
        keep = lab != IGNORE
        if drop_invalid:
            keep &= valid
        xs.append(vals[keep])
        ys.append((lab[keep] == POSITIVE).astype(np.float64))
    if not xs:
        return np.zeros((0, FEATURE_DIM)), np.zeros(0)
    return np.vstack(xs), np.concatenate(ys)


def train(dataset: list, config: TrainConfig | None = None
          ) -> tuple[AffordanceModel, list[dict]]:
    """Full-batch gradient descent with momentum; returns (best model, log).

    `dataset` is a list of (FeatureSet, AffordanceLabelSet) pairs, one per
    scene; the trailing `val_fraction` of scenes form the validation split.
    The model with the lowest validation loss wins, and the log has one row
    per epoch: {"epoch", "train_loss", "val_loss"}.
    """
    if not dataset:
        raise TrainingError("dataset is empty")
    config = config or TrainConfig()
    n_scenes = len(dataset)
    n_val = min(n_scenes - 1, max(1, round(config.val_fraction * n_scenes))) \
        if n_scenes > 1 else 0
    train_entries = dataset[:n_scenes - n_val] if n_val else dataset
    val_entries = dataset[n_scenes - n_val:] if n_val else dataset

    x_raw, y = _design_matrix(train_entries)
    xv_raw, yv = _design_matrix(val_entries)
    if len(x_raw) == 0 or y.sum() == 0 or y.sum() == len(y):
        raise TrainingError("training split needs both label classes")

    mean = x_raw.mean(axis=0)
    std = np.maximum(x_raw.std(axis=0), 1e-8)
    model = replace(init_model(config.hidden, config.seed),
                    scaler_mean=mean, scaler_std=std)
    x = (x_raw - mean) / std
    xv = (xv_raw - mean) / std

    params = model.params()
    velocity = np.zeros_like(params)
    best = (np.inf, params.copy())
    log = []
    for epoch in range(config.epochs):
        loss, grad = loss_and_grad(model.with_params(params), x, y,
                                   config.lambda_dice)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        velocity = config.momentum * velocity - config.learning_rate * grad
        params = params + velocity
        val_loss, _ = loss_and_grad(model.with_params(params), xv, yv,
                                    config.lambda_dice)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < best[0]:
            best = (val_loss, params.copy())
        log.append({"epoch": epoch, "train_loss": float(loss),
                    "val_loss": float(val_loss)})
    final = model.with_params(best[1]) if log else model
    return final, log


def predict(model: AffordanceModel, features: FeatureSet) -> np.ndarray:
    """Affordance map: sigmoid scores per point; invalid points score 0."""
    if features.values.shape[1] != len(model.scaler_mean):
        raise ValidationError("feature dimension does not match the model")
    x = (features.values - model.scaler_mean) / model.scaler_std
    z, _ = _forward(model, x)
    scores = _sigmoid(z)
    scores[~features.valid] = 0.0
    return scores


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def labels_to_dict(labelset: AffordanceLabelSet, scene_seed: int | None = None
                   ) -> dict:
    return {
        "version": "afford_labels.v1",
        "scene_seed": scene_seed,
        "indices": labelset.indices.tolist(),
        "labels": list(labelset.labels),
    }


def labels_from_dict(doc: dict) -> AffordanceLabelSet:
    if doc.get("version") != "afford_labels.v1":
        raise ValidationError(f"unsupported labels version {doc.get('version')!r}")
    return AffordanceLabelSet(np.array(doc["indices"], dtype=np.int64),
                              tuple(doc["labels"]))


def save_model(model: AffordanceModel, path, config_hash: str | None = None,
               seed: int | None = None) -> None:
    doc = {
        "version": "afford_model.v1",
        "hidden": model.hidden,
        "scaler_mean": model.scaler_mean.tolist(),
        "scaler_std": model.scaler_std.tolist(),
        "w1": None if model.w1 is None else model.w1.tolist(),
        "b1": None if model.b1 is None else model.b1.tolist(),
        "w2": model.w2.tolist(),
        "b2": model.b2,
        "config_hash": config_hash,
        "seed": seed,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> AffordanceModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != "afford_model.v1":
        raise ValidationError(f"unsupported model version {doc.get('version')!r}")
    return AffordanceModel(
        hidden=int(doc["hidden"]),
        scaler_mean=np.array(doc["scaler_mean"]),
        scaler_std=np.array(doc["scaler_std"]),
        w1=None if doc["w1"] is None else np.array(doc["w1"]),
        b1=None if doc["b1"] is None else np.array(doc["b1"]),
        w2=np.array(doc["w2"]),
        b2=float(doc["b2"]),
    )

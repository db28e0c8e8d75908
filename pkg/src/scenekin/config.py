"""Pipeline configuration: one nested document covering every tunable default.

The on-disk format is JSON. Loading is strict: unknown keys are rejected, and
every value must coerce to its field type. All lengths are meters and angles
are radians unless a field name says ``_deg``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np

from .affordance import TrainConfig
from .artinfer import InferenceConfig
from .errors import ConfigError
from .refine import RefineConfig
from .sensing import CaptureConfig
from .simworld import GenerationConfig, PullBudget


@dataclass(frozen=True)
class InteractionConfig:
    pull: PullBudget = field(default_factory=PullBudget)
    motion_epsilon: float = 1e-3
    gripper_radius: float = 0.04
    snap_tolerance: float = 0.03   # commanded contact -> surface projection


@dataclass(frozen=True)
class AffordanceConfig:
    feature_radius: float = 0.05
    k_normals: int = 12
    variation_threshold: float = 0.02
    discontinuity_cap: float = 0.5
    samples_per_scene: int = 600
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass(frozen=True)
class HotspotConfig:
    radius: float = 0.25
    score_threshold: float = 0.5


@dataclass(frozen=True)
class AggregateConfig:
    merge_angle_deg: float = 10.0
    merge_line_dist: float = 0.05
    merge_iou: float = 0.3
    iou_voxel: float = 0.05


@dataclass(frozen=True)
class EvalConfig:
    revolute_thresholds_deg: tuple[float, ...] = (15.0, 30.0)
    prismatic_min_travel: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    n_scenes: int = 5
    max_hotspots: int = 12
    workers: int = 1
    refine: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    interaction: InteractionConfig = field(default_factory=InteractionConfig)
    capture: CaptureConfig = field(default_factory=CaptureConfig)
    affordance: AffordanceConfig = field(default_factory=AffordanceConfig)
    hotspot: HotspotConfig = field(default_factory=HotspotConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    aggregate: AggregateConfig = field(default_factory=AggregateConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)


_TUPLE_FIELDS = {"resolution", "ring_tilts_deg", "ring_inward_tilts_deg",
                 "revolute_thresholds_deg", "room_width", "room_depth",
                 "cabinet_height", "cabinet_width", "cabinet_depth",
                 "door_max_angle", "drawer_travel", "drawer_front_height",
                 "distractor_crate_height", "distractor_slab_height"}


def _coerce(name: str, ftype, value, path: str):
    if dataclasses.is_dataclass(ftype):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(ftype, value, path)
    if value is None:
        return value
    if ftype is float or ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if ftype is int or ftype == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if ftype is bool or ftype == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if ftype is str or ftype == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if name in _TUPLE_FIELDS:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    return value


def _build(dc_type, data: dict, path: str = ""):
    known = {f.name: f for f in fields(dc_type)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} under '{path or 'root'}'"
            f" (known: {sorted(known)})")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        sub = f"{path}.{name}" if path else name
        ftype = f.type
        # resolve nested dataclass types recorded as strings by
        # `from __future__ import annotations`
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING \
            else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _coerce(name, type(default), data[name], sub)
        else:
            kwargs[name] = _coerce(name, ftype, data[name], sub)
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid values under '{path or 'root'}': {e}") from e


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration document must be a JSON object")
    return _build(PipelineConfig, data)


def config_to_dict(config: PipelineConfig) -> dict:
    def conv(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: conv(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, (tuple, list)):
            return [conv(v) for v in obj]
        if isinstance(obj, np.generic):
            return obj.item()
        return obj

    return conv(config)


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(config: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=1, sort_keys=True)
        fh.write("\n")


def config_hash(config: PipelineConfig) -> str:
    canon = json.dumps(config_to_dict(config), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def derive_seed(root_seed: int, *tags) -> int:
    """Deterministic child seed for (root, tags): one root fans out to every
    per-scene, per-sample, and per-capture stream."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root_seed)).encode())
    for t in tags:
        h.update(b"\x1f")
        h.update(str(t).encode())
    return int.from_bytes(h.digest(), "little") % (2**63 - 1)

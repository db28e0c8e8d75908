"""Interaction hotspots: greedy non-maximum suppression over the affordance map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .geom import PointCloud


@dataclass(frozen=True)
class Hotspot:
    index: int
    position: np.ndarray
    score: float


@dataclass(frozen=True)
class HotspotSet:
    """Selected peaks, scores non-increasing, pairwise farther than `radius`."""

    items: tuple[Hotspot, ...]
    radius: float

    def __len__(self):
        return len(self.items)


def nms(cloud: PointCloud, scores: np.ndarray, radius: float = 0.25,
        score_threshold: float = 0.5) -> HotspotSet:
    """Greedy peak extraction.

    Repeatedly take the highest-scoring unsuppressed point at or above the
    threshold (ties break to the lowest point index) and suppress everything
    within `radius` of it. The empty result is allowed.
    """
    if radius <= 0:
        raise ValidationError("suppression radius must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(cloud),):
        raise ValidationError("scores must align with the cloud")
    eligible = np.flatnonzero(scores >= score_threshold)
    if len(eligible) == 0:
        return HotspotSet((), radius)
    # sorting by (-score, index) makes a single pass equivalent to the greedy loop
    order = eligible[np.lexsort((eligible, -scores[eligible]))]
    tree = cKDTree(cloud.positions)
    suppressed = np.zeros(len(cloud), dtype=bool)
    picked = []
    for i in order:
        if suppressed[i]:
            continue
        picked.append(Hotspot(int(i), cloud.positions[i].copy(),
                              float(scores[i])))
        suppressed[tree.query_ball_point(cloud.positions[i], r=radius)] = True
    return HotspotSet(tuple(picked), radius)


def hotspots_to_dict(hs: HotspotSet) -> dict:
    return {
        "version": "hotspots.v1",
        "radius": hs.radius,
        "items": [
            {"index": h.index, "position": h.position.tolist(), "score": h.score}
            for h in hs.items
        ],
    }


def hotspots_from_dict(doc: dict) -> HotspotSet:
    if doc.get("version") != "hotspots.v1":
        raise ValidationError(f"unsupported hotspots version {doc.get('version')!r}")
    items = tuple(Hotspot(int(d["index"]), np.array(d["position"]),
                          float(d["score"])) for d in doc["items"])
    return HotspotSet(items, float(doc["radius"]))

import numpy as np
import pytest

from scenekin.artinfer import make_observation_pair
from scenekin.sensing import (
    CaptureConfig,
    capture_interaction_after,
    capture_object_views,
    object_view_poses,
)
from scenekin.simworld import PullBudget, interact


def observe_interaction(scene, contact, direction, capture_config=None,
                        budget=None, heat_sigma=0.05, rng=None):
    """Capture before views, pull, capture after views.

    Returns (obs, outcome, scene_after). Raises on capture failure.
    """
    capture_config = capture_config or CaptureConfig(resolution=(100, 75))
    poses = object_view_poses(scene, contact, capture_config)
    before, poses = capture_object_views(scene, contact, capture_config,
                                         poses=poses, rng=rng)
    outcome, scene_after = interact(scene, contact, direction,
                                    budget or PullBudget())
    after = capture_interaction_after(scene_after, contact, poses,
                                      outcome.final_contact, capture_config,
                                      rng)
    obs = make_observation_pair(before, after, contact, outcome.final_contact,
                                heat_sigma, capture_poses=tuple(poses))
    return obs, outcome, scene_after


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240101)

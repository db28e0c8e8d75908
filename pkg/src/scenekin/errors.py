"""Exception types shared across the package."""


class SceneKinError(Exception):
    """Base class for all package errors."""


class ValidationError(SceneKinError):
    """Malformed input: bad shapes, non-unit axes, non-orthonormal rotations."""


class SceneGenerationError(SceneKinError):
    """Procedural generation could not place the requested objects."""


class PreconditionError(SceneKinError):
    """An operation was called outside its stated preconditions."""


class CaptureError(SceneKinError):
    """No valid camera placement was found for an observation."""


class NoMotionError(SceneKinError):
    """Before/after clouds show no change above the detection threshold."""


class MotionEstimationError(SceneKinError):
    """Rigid motion could not be estimated (too few correspondences, divergence)."""


class DegenerateMotionError(SceneKinError):
    """Transform is too close to identity to classify as a joint motion."""


class InferenceError(SceneKinError):
    """Articulation inference failed; message names the failing stage."""


class RefinementUnavailable(SceneKinError):
    """No reachable point on the mobile part; refinement cannot proceed."""


class TrainingError(SceneKinError):
    """Training aborted (non-finite loss, empty dataset)."""


class ConfigError(SceneKinError):
    """Configuration document is invalid (unknown key, bad type or value)."""


class ArtifactError(SceneKinError):
    """A pipeline artifact is missing, malformed, or inconsistent."""

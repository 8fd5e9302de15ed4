"""Exception types shared across the tracking pipeline."""


class EvtrackError(Exception):
    """Base class for all package-specific errors."""


class AngleNearPi(EvtrackError):
    """SE(3)/SO(3) logarithm requested for a rotation with angle too close to pi."""


class BehindCamera(EvtrackError):
    """3D point has non-positive depth and cannot be projected."""


class NonPositiveDepth(EvtrackError):
    """Operation requires a strictly positive depth."""


class OutOfRange(EvtrackError):
    """Scalar argument outside its documented domain."""


class OutOfSpan(EvtrackError):
    """Query time outside the valid span of a spline trajectory."""


class UnorderedStream(EvtrackError):
    """Event timestamps regressed beyond tolerance."""


class DegenerateFrame(EvtrackError):
    """Event buffer frame with vanishing predicted-change norm."""


class SolverDiverged(EvtrackError):
    """Levenberg-Marquardt damping exceeded its ceiling without an accepted step."""


class GrazingHit(EvtrackError):
    """Raycast hit too tangential for a meaningful depth derivative."""


class MissError(EvtrackError):
    """Raycast miss where a hit was required."""


class NoKeypoints(EvtrackError):
    """Keypoint detection found an empty object silhouette (lost track)."""


class NoMatches(EvtrackError):
    """Trajectory association produced no pairs."""


class DegenerateAlignment(EvtrackError):
    """Trajectory alignment is underdetermined (coincident/collinear positions)."""


class PathTooShort(EvtrackError):
    """Trajectory path length too short for the requested relative-pose distances."""


class ConfigError(EvtrackError):
    """Malformed configuration file or unknown/missing keys."""


class TrackingDiverged(EvtrackError):
    """Pipeline-level divergence (lost silhouette or solver failure)."""

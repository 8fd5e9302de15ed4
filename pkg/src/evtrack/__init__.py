"""evtrack: 6-DoF rigid-object tracking from an event camera plus frames.

A fast layer fits a cumulative cubic B-spline on SE(3) to accumulated event
buffer frames; a slow layer refines keyframe poses by direct photometric
alignment in a sliding window with marginalization. Includes a synthetic
event-camera simulator and ATE/RPE evaluation tools.
"""

from .errors import EvtrackError
from .geometry import CameraIntrinsics, Pose, Twist
from .spline import SplineTrajectory

__version__ = "0.1.0"

__all__ = [
    "EvtrackError",
    "CameraIntrinsics",
    "Pose",
    "Twist",
    "SplineTrajectory",
    "__version__",
]

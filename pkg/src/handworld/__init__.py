"""World-space hand motion from egocentric video, with a synthetic scene oracle."""

from ._kernels import BACKEND
from .geometry import CameraIntrinsics, RigidTransform
from .motion import CameraTrajectory, MotionSequence

__version__ = "0.1.0"

__all__ = ["BACKEND", "CameraIntrinsics", "CameraTrajectory", "MotionSequence", "RigidTransform", "__version__"]

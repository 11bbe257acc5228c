"""Generate point-cloud registration pairs from depth maps and score registrations on them."""

from .geometry import DepthMap, Intrinsics, PointCloud, Pose, PoseSamplerConfig

__all__ = ["DepthMap", "Intrinsics", "PointCloud", "Pose", "PoseSamplerConfig"]
__version__ = "0.1.0"

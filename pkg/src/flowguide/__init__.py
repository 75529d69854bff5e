"""Inference-time energy guidance for flow-matching action policies."""

from ._validation import GuidanceError
from .fields import CollisionField, GuidanceChain, HumanTrajectoryField, SemanticField, monotonic_align
from .flow import SamplerConfig, sample_guided, sample_unguided, tweedie_clean_estimate
from .kinematics import CartesianTrajectory, FreeGripper, PlanarArm, PointRobot, RobotState
from .policies import GmmPolicy, LatentDecoder, MlpFlowPolicy
from .sdf import PointCloud, SignedDistanceGrid, build_occupancy, compute_sdf, query_sdf, query_sdf_gradient

__version__ = "0.1.0"

__all__ = [
    "CartesianTrajectory", "CollisionField", "FreeGripper", "GmmPolicy", "GuidanceChain",
    "GuidanceError", "HumanTrajectoryField", "LatentDecoder", "MlpFlowPolicy", "PlanarArm",
    "PointCloud", "PointRobot", "RobotState", "SamplerConfig", "SemanticField",
    "SignedDistanceGrid", "build_occupancy", "compute_sdf", "monotonic_align", "query_sdf",
    "query_sdf_gradient", "sample_guided", "sample_unguided", "tweedie_clean_estimate",
]

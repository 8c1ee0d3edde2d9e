"""Geometric core of joint ToF depth and normal estimation.

Submodules: geometry, scenegen, tofsim, nnsearch, losses, alignment, refine,
optimizer, metrics, formats, cli.
"""

from .errors import ContractViolation, EmptyOverlapError, NumericalFailure
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    NormalMap,
    PointCloud,
    RigidTransform,
    backproject,
    normals_from_depth,
    project,
    transform,
)

__version__ = "0.1.0"

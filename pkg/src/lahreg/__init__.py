"""Point-cloud registration with LSH-partitioned windowed attention."""

from lahreg.geom import (
    CorrespondenceSet,
    RigidTransform,
    apply_transform,
    compose,
    invert,
    kabsch,
    random_rotation,
)
from lahreg.config import RunConfig, default_config, load_config
from lahreg.estimators import DescriptorNet, LSHPartitioner, RansacRegistrar
from lahreg.hashwin import HashConfig, WindowPartition
from lahreg.io import read_cloud, write_cloud

__version__ = "0.1.0"

__all__ = [
    "CorrespondenceSet",
    "DescriptorNet",
    "HashConfig",
    "LSHPartitioner",
    "RansacRegistrar",
    "RigidTransform",
    "RunConfig",
    "WindowPartition",
    "apply_transform",
    "compose",
    "default_config",
    "invert",
    "kabsch",
    "load_config",
    "random_rotation",
    "read_cloud",
    "write_cloud",
]

"""pcjoint: joint geometry + attribute point cloud codec with per-point
quality conditioning."""

__version__ = "0.1.0"

from .conditioning import QualityMap, WeightTransform
from .model import CodecModel, ModelConfig, decode, encode
from .voxels import SparseFeatureTensor, VoxelCloud

__all__ = [
    "CodecModel",
    "ModelConfig",
    "QualityMap",
    "SparseFeatureTensor",
    "VoxelCloud",
    "WeightTransform",
    "decode",
    "encode",
    "__version__",
]

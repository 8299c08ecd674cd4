"""Variable-rate learned image compression with a lambda-conditioned autoencoder."""

from .codec import CompressedImage, LatentPair, RDPoint, compress, decompress, target_rate_search
from .cond import ConditioningContext, LambdaGrid
from .model import ArchitectureConfig, VariableRateModel

__all__ = [
    "ArchitectureConfig",
    "CompressedImage",
    "ConditioningContext",
    "LambdaGrid",
    "LatentPair",
    "RDPoint",
    "VariableRateModel",
    "compress",
    "decompress",
    "target_rate_search",
]

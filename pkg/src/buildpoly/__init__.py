"""Building footprint polygons from images: vertex detection, attention matching, assignment."""
from .assignment import SoftAssignment, combine_scores, harden, hungarian, sinkhorn
from .errors import ContractError, DataFormatError, DegenerateGeometryError, TrainingDivergedError
from .geometry import PermutationMatrix, Polygon, PolygonSet, decode_permutation, encode_polygons
from .model import ModelConfig, PolygonNet, predict

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DataFormatError",
    "DegenerateGeometryError",
    "ModelConfig",
    "PermutationMatrix",
    "Polygon",
    "PolygonNet",
    "PolygonSet",
    "SoftAssignment",
    "TrainingDivergedError",
    "combine_scores",
    "decode_permutation",
    "encode_polygons",
    "harden",
    "hungarian",
    "predict",
    "sinkhorn",
]

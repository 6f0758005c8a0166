"""Pyramid-in-transformer video re-identification at desk scale."""
from .config import PiTConfig, toy_config
from .estimator import PiTReID
from .pyramid import DivisionSpec, FeaturePyramid, build_pyramid
from .retrieval import RetrievalReport, evaluate

__all__ = ["PiTConfig", "PiTReID", "DivisionSpec", "FeaturePyramid", "RetrievalReport",
           "build_pyramid", "evaluate", "toy_config"]
__version__ = "0.1.0"

"""nfex: condition-adaptive feature extraction for SLAM front-ends.

A decision program over symbolic environment conditions tunes the parameters
of two candidate extractors (corner/binary and blob/histogram), seven quality
metrics score each candidate per frame, and the weighted argmax picks the
extractor that runs.
"""

__version__ = "0.1.0"

from .dsl import EnvConditions
from .extractors import (
    DEFAULT_PARAMS,
    ExtractorKind,
    FeatureSet,
    Keypoint,
    ParamSet,
    extract,
    match,
)
from .fitness import (
    CANDIDATE_ORDER,
    AdjustmentTable,
    Candidate,
    Decision,
    Engine,
    EngineConfig,
    ParamMode,
    WeightFunction,
    score_extractor,
    select_alpha,
    tune_theta,
)
from .image import GrayImage, ImagePyramid, build_pyramid, gaussian_blur
from .kgraph import KnowledgeGraph, compile_from_graph, seed_graph
from .metrics import MetricVector, NormalizedMetricVector, evaluate_all, normalize

__all__ = [
    "__version__",
    "AdjustmentTable",
    "CANDIDATE_ORDER",
    "Candidate",
    "DEFAULT_PARAMS",
    "Decision",
    "Engine",
    "EngineConfig",
    "EnvConditions",
    "ExtractorKind",
    "FeatureSet",
    "GrayImage",
    "ImagePyramid",
    "Keypoint",
    "KnowledgeGraph",
    "MetricVector",
    "NormalizedMetricVector",
    "ParamMode",
    "ParamSet",
    "WeightFunction",
    "build_pyramid",
    "compile_from_graph",
    "evaluate_all",
    "extract",
    "gaussian_blur",
    "match",
    "normalize",
    "score_extractor",
    "seed_graph",
    "select_alpha",
    "tune_theta",
]

"""Scene illuminant estimation: Grayness Index, FFCC-style learned filters,
and an angular-error evaluation harness."""

from .chroma import ChromaHistogram, HistogramGeometry, rgb_to_uv, uv_to_rgb
from .evaluation import EvaluationReport, GroundTruthTable, aggregate, angular_error
from .ffcc import FfccModel, TrainConfig, estimate_ffcc, load_model, make_sample, save_model, train
from .grayness import GiConfig, estimate_gi
from .imaging import LinearImage, PreprocessConfig, apply_white_balance, load_image, save_png16

__version__ = "0.1.0"

__all__ = [
    "ChromaHistogram",
    "EvaluationReport",
    "FfccModel",
    "GiConfig",
    "GroundTruthTable",
    "HistogramGeometry",
    "LinearImage",
    "PreprocessConfig",
    "TrainConfig",
    "aggregate",
    "angular_error",
    "apply_white_balance",
    "estimate_ffcc",
    "estimate_gi",
    "load_image",
    "load_model",
    "make_sample",
    "rgb_to_uv",
    "save_model",
    "save_png16",
    "train",
    "uv_to_rgb",
]

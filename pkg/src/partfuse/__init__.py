"""Part-based face verification with per-region cosine scores and LLR fusion."""

from .embeddings import EmbeddingRecord, EmbeddingStore, TrialPair, score_trials
from .errors import DataError, NumericalError, PartfuseError
from .fusion import FusionModel, apply_fusion, train_llr
from .landmarks import LandmarkSet, align, crop_regions, parse_landmarks
from .metrics import EvalReport, ScoreSet, eer, evaluate, hter_at

__version__ = "0.1.0"

__all__ = [
    "DataError", "EmbeddingRecord", "EmbeddingStore", "EvalReport", "FusionModel", "LandmarkSet",
    "NumericalError", "PartfuseError", "ScoreSet", "TrialPair", "align", "apply_fusion",
    "crop_regions", "eer", "evaluate", "hter_at", "parse_landmarks", "score_trials", "train_llr",
]

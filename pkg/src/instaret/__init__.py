"""Instance-driven image-text-to-image retrieval toolkit."""

from .core import (BBox, CropRef, DetectionRecord, EmbeddingVector,
                   EvalReport, PatchRef, RetrievalTask, TrainerConfig,
                   TrainingTriplet, area_ratio, clamp_bbox, validate_manifest)

__all__ = [
    "BBox", "CropRef", "DetectionRecord", "EmbeddingVector", "EvalReport",
    "PatchRef", "RetrievalTask", "TrainerConfig", "TrainingTriplet",
    "area_ratio", "clamp_bbox", "validate_manifest",
]

__version__ = "0.1.0"

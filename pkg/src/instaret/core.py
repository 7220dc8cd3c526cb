"""Shared domain types, bounding-box geometry, and manifest validation.

Everything here is an immutable value object after construction, so instances
can be shared freely across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate or out-of-frame box geometry."""


class ValidationError(ValueError):
    """Raised when a record or argument violates a type invariant."""


LOCATION_PREFIX = "Find me an image containing the object in the given image with the following caption: "
INSTANCE_PREFIX = "Given the "
CANDIDATE_TEXT = "Represent the given image"

MANIFEST_FIELDS = ("query_image", "query_text", "positive_image",
                   "category_name", "source", "caption")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in absolute pixels: (left, top, width, height)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise GeometryError(f"negative box origin: ({self.x}, {self.y})")
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"non-positive box size: {self.w}x{self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class DetectionRecord:
    """One annotated object in a detection-format dataset."""

    image_id: str
    image_path: str
    image_w: float
    image_h: float
    bbox: BBox
    category_id: int
    category_name: str
    split: str = "train"

    def __post_init__(self):
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValidationError(f"non-positive image dims for {self.image_id}")
        if not self.category_name:
            raise ValidationError(f"empty category name for {self.image_id}")
        if self.split not in ("train", "val"):
            raise ValidationError(f"unknown split {self.split!r}")
        if self.bbox.x + self.bbox.w > self.image_w + 1e-9 or \
           self.bbox.y + self.bbox.h > self.image_h + 1e-9:
            raise ValidationError(
                f"bbox extends past image bounds for {self.image_id}")


@dataclass(frozen=True)
class CropRef:
    """Reference to a crop: source image plus the box that was cut out."""

    image_id: str
    bbox: BBox

    def to_json(self) -> dict:
        b = self.bbox
        return {"image": self.image_id, "bbox": [b.x, b.y, b.w, b.h]}


@dataclass(frozen=True)
class PatchRef:
    """Reference to a standalone patch (a file or an opaque feature id)."""

    patch: str

    def to_json(self) -> dict:
        return {"patch": self.patch}


@dataclass(frozen=True)
class TrainingTriplet:
    """(query image, query text, positive image) plus bookkeeping fields."""

    query_image: CropRef | PatchRef
    query_text: str
    positive_image: str
    category_name: str
    source: str
    caption: str

    def to_json(self) -> dict:
        return {
            "query_image": self.query_image.to_json(),
            "query_text": self.query_text,
            "positive_image": self.positive_image,
            "category_name": self.category_name,
            "source": self.source,
            "caption": self.caption,
        }


@dataclass(frozen=True)
class EmbeddingVector:
    """A real embedding; when ``normalized`` its L2 norm is 1 within 1e-6."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if self.normalized:
            n = float(np.linalg.norm(v))
            if abs(n - 1.0) > 1e-6:
                raise ValidationError(f"normalized vector has norm {n}")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class RetrievalTask:
    """One query with its candidate pool; exactly one pool entry is positive."""

    query_image: CropRef | PatchRef
    query_text: str
    pool: tuple
    target_index: int
    subtask: str = "instance"
    query_image_mode: str = "crop"

    def __post_init__(self):
        if not (0 <= self.target_index < len(self.pool)):
            raise ValidationError("target_index outside pool")
        if len(set(self.pool)) != len(self.pool):
            raise ValidationError("duplicate refs in candidate pool")
        if self.subtask not in ("instance", "location"):
            raise ValidationError(f"unknown subtask {self.subtask!r}")
        if self.query_image_mode not in ("crop", "full"):
            raise ValidationError(f"unknown query mode {self.query_image_mode!r}")


@dataclass(frozen=True)
class SubtaskScores:
    precision_at_1: float
    recall_at_k: float
    k: int
    n_tasks: int


@dataclass(frozen=True)
class EvalReport:
    """Precision@1 / Recall@k per subtask plus task-weighted overall scores."""

    subtasks: dict
    overall_precision_at_1: float
    overall_recall_at_k: float
    k: int
    n_tasks: int

    def to_json(self) -> dict:
        return {
            "subtasks": {
                name: {
                    "precision_at_1": s.precision_at_1,
                    "recall_at_k": s.recall_at_k,
                    "k": s.k,
                    "n_tasks": s.n_tasks,
                }
                for name, s in self.subtasks.items()
            },
            "overall": {
                "precision_at_1": self.overall_precision_at_1,
                "recall_at_k": self.overall_recall_at_k,
                "k": self.k,
                "n_tasks": self.n_tasks,
            },
        }


@dataclass(frozen=True)
class TrainerConfig:
    temperature: float = 0.05
    lr0: float = 0.5
    batch_size: int = 32
    chunk_size: int = 8
    epochs: int = 1
    seed: int = 0
    embed_dim: int = 32
    hidden_dim: int = 64
    total_steps: Optional[int] = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.lr0 <= 0:
            raise ValidationError("lr0 must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("bad batch_size/epochs")
        if not (1 <= self.chunk_size <= self.batch_size):
            raise ValidationError("chunk_size must be in [1, batch_size]")


def area_ratio(bbox: BBox, image_w: float, image_h: float) -> float:
    """Crop-to-image area ratio, in (0, 1]."""
    if image_w <= 0 or image_h <= 0:
        raise GeometryError("image dims must be positive")
    if bbox.w <= 0 or bbox.h <= 0:
        raise GeometryError("zero-area bbox")
    return (bbox.w * bbox.h) / (image_w * image_h)


def clamp_bbox(bbox: BBox, image_w: float, image_h: float) -> BBox:
    """Intersect a box with the image rectangle; error if empty."""
    if image_w <= 0 or image_h <= 0:
        raise GeometryError("image dims must be positive")
    x0 = max(bbox.x, 0.0)
    y0 = max(bbox.y, 0.0)
    x1 = min(bbox.x + bbox.w, image_w)
    y1 = min(bbox.y + bbox.h, image_h)
    if x1 <= x0 or y1 <= y0:
        raise GeometryError("box lies entirely outside the image")
    return BBox(x0, y0, x1 - x0, y1 - y0)


def parse_image_ref(obj: Any) -> CropRef | PatchRef:
    """Parse the manifest's query_image field into a typed ref."""
    if not isinstance(obj, dict):
        raise ValidationError("query_image must be an object")
    if "patch" in obj:
        if not isinstance(obj["patch"], str) or not obj["patch"]:
            raise ValidationError("patch ref must be a non-empty string")
        return PatchRef(obj["patch"])
    if "image" in obj:
        box = obj.get("bbox")
        if not (isinstance(box, (list, tuple)) and len(box) == 4):
            raise ValidationError("crop ref needs a 4-element bbox")
        return CropRef(str(obj["image"]), BBox(*[float(v) for v in box]))
    raise ValidationError("query_image needs an 'image' or 'patch' key")


@dataclass(frozen=True)
class Violation:
    line: int
    reason: str


def _check_triplet_line(obj: dict) -> list[str]:
    problems = []
    for name in MANIFEST_FIELDS:
        if name not in obj:
            problems.append(f"missing field {name!r}")
    if problems:
        return problems
    try:
        ref = parse_image_ref(obj["query_image"])
    except (ValidationError, GeometryError) as exc:
        problems.append(f"bad query_image: {exc}")
        ref = None
    text = obj["query_text"]
    if not isinstance(text, str) or not (
            text.startswith(LOCATION_PREFIX) or text.startswith(INSTANCE_PREFIX)):
        problems.append("query_text lacks the instruction prefix")
    if not obj["category_name"]:
        problems.append("empty category_name")
    if isinstance(ref, CropRef) and ref.image_id != str(obj["positive_image"]):
        problems.append("positive_image is not the crop's source image")
    return problems


def validate_manifest(path) -> list[Violation]:
    """Check every line of a triplet manifest; return all violations found.

    Unreadable files raise OSError; malformed lines become violations rather
    than aborting the scan.
    """
    violations = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                violations.append(Violation(lineno, f"parse error: {exc}"))
                continue
            for reason in _check_triplet_line(obj):
                violations.append(Violation(lineno, reason))
    return violations


def write_manifest(triplets: Iterable[TrainingTriplet], path) -> int:
    """Write one JSON object per line; returns the line count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n

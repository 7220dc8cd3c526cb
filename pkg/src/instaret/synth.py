"""Training-triplet synthesis from detection-format annotations.

Pipeline: crop each annotated box, score it against its class name, drop
low-scoring instances, cap each category, caption the survivors, and emit
(query crop, query text, full source image) triplets. Scoring and
captioning are pluggable: file-based sidecar adapters let real model
outputs be precomputed offline, and deterministic synthetic adapters keep
the pipeline testable without any model.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from .core import (BBox, CANDIDATE_TEXT, CropRef, DetectionRecord,
                   GeometryError, LOCATION_PREFIX, TrainingTriplet,
                   ValidationError, area_ratio, clamp_bbox, write_manifest)

log = logging.getLogger(__name__)

SCORE_THRESHOLD = 0.2
CLASS_CAP = 1000

INSTANCE_TEMPLATE = ("Given the {name} in the image, "
                     "find an everyday image that contains the {name}.")

AREA_HIST_BINS = 20


@dataclass(frozen=True)
class Patch:
    """A cropped region: pixel data (optional) plus provenance metadata.

    ``label`` carries the ground-truth class for synthetic fixtures where no
    raster exists; real crops leave it None.
    """

    pixels: Optional[np.ndarray]
    source_w: float
    source_h: float
    box_w: float
    box_h: float
    label: Optional[str] = None

    @property
    def area_ratio(self) -> float:
        return (self.box_w * self.box_h) / (self.source_w * self.source_h)


@dataclass(frozen=True)
class ScoredRecord:
    record: DetectionRecord
    score: float
    area_ratio: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValidationError("non-finite score")
        if not (0 < self.area_ratio <= 1):
            raise ValidationError(f"area_ratio {self.area_ratio} outside (0,1]")


class ScorerInterface(Protocol):
    def score(self, patch: Patch, class_name: str) -> float: ...


class CaptionProviderInterface(Protocol):
    def caption(self, record: DetectionRecord) -> str: ...


def crop_region(image: np.ndarray, bbox: BBox) -> np.ndarray:
    """Bit-exact copy of the box region, edges rounded outward then clamped."""
    img = np.asarray(image)
    if img.ndim < 2:
        raise GeometryError("image must be at least 2-D")
    h, w = img.shape[:2]
    clamped = clamp_bbox(bbox, w, h)
    x0 = math.floor(clamped.x)
    y0 = math.floor(clamped.y)
    x1 = min(math.ceil(clamped.x + clamped.w), w)
    y1 = min(math.ceil(clamped.y + clamped.h), h)
    if x1 <= x0 or y1 <= y0:
        raise GeometryError("box rounds to an empty pixel region")
    return img[y0:y1, x0:x1].copy()


class SyntheticScorer:
    """Deterministic stand-in for a CLIP-style crop/class similarity.

    score = 0.5 * class-match indicator + 0.5 * min(1, 4 * area ratio),
    so small crops score low (the size bias seen in real filtered data)
    and mislabeled fixtures score below 0.5.
    """

    def score(self, patch: Patch, class_name: str) -> float:
        match = 1.0 if patch.label is None or patch.label == class_name else 0.0
        return 0.5 * match + 0.5 * min(1.0, 4.0 * patch.area_ratio)

    def rejection_area_ratio(self, threshold: float,
                             class_match: bool = True) -> float:
        """Largest area ratio still rejected at this threshold."""
        base = 0.5 if class_match else 0.0
        return max(0.0, (threshold - base) / 2.0)


def _bbox_key(image_id: str, bbox: BBox):
    return (image_id, round(bbox.x, 4), round(bbox.y, 4),
            round(bbox.w, 4), round(bbox.h, 4))


def _parse_sidecar(path):
    """Parse 'image_id<TAB>x,y,w,h<TAB>value' lines into a dict."""
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 tab fields")
            image_id, box_str, value = parts
            coords = [float(v) for v in box_str.split(",")]
            if len(coords) != 4:
                raise ValidationError(f"{path}:{lineno}: bbox needs 4 numbers")
            table[_bbox_key(image_id, BBox(*coords))] = value
    return table


class FileScorer:
    """Scores looked up from a precomputed sidecar keyed by (image, bbox)."""

    def __init__(self, path):
        self._table = {k: float(v) for k, v in _parse_sidecar(path).items()}
        self._pending = None

    def score_record(self, record: DetectionRecord) -> float:
        key = _bbox_key(record.image_id, record.bbox)
        if key not in self._table:
            raise ValidationError(f"no sidecar score for {key}")
        return self._table[key]

    def score(self, patch: Patch, class_name: str) -> float:
        if self._pending is None:
            raise ValidationError("FileScorer.score needs a bound record; "
                                  "use score_instances")
        return self.score_record(self._pending)


class TemplateProvider:
    """Caption fixture: 'The <classname> is in the image.'"""

    def caption(self, record: DetectionRecord) -> str:
        return f"The {record.category_name} is in the image."


class FileProvider:
    """Captions looked up from a sidecar keyed by (image, bbox)."""

    def __init__(self, path):
        self._table = _parse_sidecar(path)

    def caption(self, record: DetectionRecord) -> str:
        key = _bbox_key(record.image_id, record.bbox)
        if key not in self._table or not self._table[key]:
            raise ValidationError(f"no caption for {key}")
        return self._table[key]


def default_image_loader(record: DetectionRecord) -> np.ndarray:
    """Decode the record's image file into an array (requires Pillow)."""
    from PIL import Image

    with Image.open(record.image_path) as img:
        return np.asarray(img.convert("RGB"))


def patch_for_record(record: DetectionRecord,
                     image_loader: Optional[Callable] = None) -> Patch:
    """Build the crop patch for a record, decoding pixels when a loader is given."""
    clamped = clamp_bbox(record.bbox, record.image_w, record.image_h)
    pixels = None
    if image_loader is not None:
        pixels = crop_region(image_loader(record), clamped)
    return Patch(pixels, record.image_w, record.image_h,
                 clamped.w, clamped.h, label=getattr(record, "true_label", None))


@dataclass
class ScoreFailure:
    record: DetectionRecord
    reason: str


def score_instances(records, scorer,
                    image_loader: Optional[Callable] = None,
                    failures: Optional[list] = None):
    """Score every record in input order; per-record failures do not abort."""
    out = []
    for record in records:
        try:
            if isinstance(scorer, FileScorer):
                score = scorer.score_record(record)
                ar = area_ratio(clamp_bbox(record.bbox, record.image_w,
                                           record.image_h),
                                record.image_w, record.image_h)
            else:
                patch = patch_for_record(record, image_loader)
                score = scorer.score(patch, record.category_name)
                ar = patch.area_ratio
            out.append(ScoredRecord(record, float(score), ar))
        except Exception as exc:  # undecodable image, missing sidecar row
            log.warning("scoring failed for %s: %s", record.image_id, exc)
            if failures is not None:
                failures.append(ScoreFailure(record, str(exc)))
    return out


def filter_by_score(scored, threshold: float = SCORE_THRESHOLD):
    """Keep records with score >= threshold; strictly-below is excluded."""
    return [s for s in scored if s.score >= threshold]


def balance_classes(records, cap: int = CLASS_CAP, seed: int = 0):
    """Cap each category at ``cap`` via a uniform seeded sample.

    Relative order of kept records is preserved.
    """
    if cap < 1:
        raise ValidationError("cap must be >= 1")
    by_cat = defaultdict(list)
    for idx, rec in enumerate(records):
        name = rec.record.category_name if isinstance(rec, ScoredRecord) \
            else rec.category_name
        by_cat[name].append(idx)
    rng = np.random.default_rng(seed)
    keep = set()
    for name in sorted(by_cat):
        idxs = by_cat[name]
        if len(idxs) <= cap:
            keep.update(idxs)
        else:
            chosen = rng.choice(len(idxs), size=cap, replace=False)
            keep.update(idxs[i] for i in chosen)
    return [records[i] for i in range(len(records)) if i in keep]


def build_query_text(mode: str, caption_or_class: str,
                     has_image: bool = True) -> str:
    """Assemble the query instruction text for one triplet or task.

    The image slot is not part of the text in this toy pipeline: when
    ``has_image`` is true the fused encoder carries the image in its own
    input slot, so the returned string is the instruction alone.
    """
    if not caption_or_class:
        raise ValidationError("empty caption/class")
    if mode == "location":
        return LOCATION_PREFIX + caption_or_class
    if mode == "instance":
        return INSTANCE_TEMPLATE.format(name=caption_or_class)
    raise ValidationError(f"unknown query mode {mode!r}")


def candidate_text() -> str:
    """The fixed instruction used for image-only candidates."""
    return CANDIDATE_TEXT


def area_ratio_histogram(ratios, bins: int = AREA_HIST_BINS):
    """Counts over ``bins`` equal-width bins spanning (0, 1]."""
    counts, edges = np.histogram(np.asarray(ratios, dtype=np.float64),
                                 bins=bins, range=(0.0, 1.0))
    return counts.tolist(), edges.tolist()


@dataclass
class SynthStats:
    count: int
    per_category: dict
    area_hist_counts: list
    area_hist_edges: list
    skipped: int = 0

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "per_category": dict(self.per_category),
            "area_ratio_histogram": {
                "counts": self.area_hist_counts,
                "bin_edges": self.area_hist_edges,
            },
            "skipped": self.skipped,
        }


def make_triplet(scored: ScoredRecord, caption: str) -> TrainingTriplet:
    rec = scored.record
    clamped = clamp_bbox(rec.bbox, rec.image_w, rec.image_h)
    return TrainingTriplet(
        query_image=CropRef(rec.image_id, clamped),
        query_text=build_query_text("location", caption),
        positive_image=rec.image_id,
        category_name=rec.category_name,
        source=rec.split,
        caption=caption,
    )


def emit_triplets(scored_records, captions: CaptionProviderInterface,
                  out_path) -> SynthStats:
    """Write one manifest line per record; caption failures skip the record."""
    triplets = []
    ratios = []
    per_category = Counter()
    skipped = 0
    for scored in scored_records:
        try:
            caption = captions.caption(scored.record)
            if not caption:
                raise ValidationError("empty caption")
        except Exception as exc:
            log.warning("caption failed for %s: %s",
                        scored.record.image_id, exc)
            skipped += 1
            continue
        triplets.append(make_triplet(scored, caption))
        ratios.append(scored.area_ratio)
        per_category[scored.record.category_name] += 1
    write_manifest(triplets, out_path)
    counts, edges = area_ratio_histogram(ratios)
    return SynthStats(len(triplets), dict(per_category), counts, edges,
                      skipped=skipped)


def run_pipeline(records, scorer, captions, out_path, *,
                 threshold: float = SCORE_THRESHOLD, cap: int = CLASS_CAP,
                 seed: int = 0, image_loader: Optional[Callable] = None,
                 limit: Optional[int] = None) -> SynthStats:
    """Score, filter, balance, optionally subsample, then emit triplets."""
    scored = score_instances(records, scorer, image_loader)
    kept = filter_by_score(scored, threshold)
    balanced = balance_classes(kept, cap=cap, seed=seed)
    if limit is not None and limit < len(balanced):
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.choice(len(balanced), size=limit, replace=False))
        balanced = [balanced[i] for i in chosen]
    return emit_triplets(balanced, captions, out_path)


def synthesize_split(records, split: str, limit: int, seed: int,
                     scorer, captions, out_path, *,
                     threshold: float = SCORE_THRESHOLD, cap: int = CLASS_CAP,
                     image_loader: Optional[Callable] = None) -> SynthStats:
    """Run the full pipeline on one split, uniformly sampling ``limit`` outputs."""
    subset = [r for r in records if r.split == split]
    if not subset:
        raise ValidationError(f"split {split!r} is empty")
    return run_pipeline(subset, scorer, captions, out_path,
                        threshold=threshold, cap=cap, seed=seed,
                        image_loader=image_loader, limit=limit)


def load_coco(path, split: str = "train"):
    """Parse a COCO-style annotation document into DetectionRecords.

    Records with out-of-frame boxes are clamped; empty intersections are
    dropped with a warning rather than aborting the load.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    images = {img["id"]: img for img in doc.get("images", [])}
    categories = {c["id"]: c["name"] for c in doc.get("categories", [])}
    records = []
    for ann in doc.get("annotations", []):
        img = images.get(ann["image_id"])
        if img is None:
            log.warning("annotation %s references unknown image", ann.get("id"))
            continue
        try:
            bbox = BBox(*[float(v) for v in ann["bbox"]])
            record = DetectionRecord(
                image_id=str(img["id"]),
                image_path=img.get("file_name", ""),
                image_w=float(img["width"]),
                image_h=float(img["height"]),
                bbox=clamp_bbox(bbox, float(img["width"]), float(img["height"])),
                category_id=int(ann["category_id"]),
                category_name=categories.get(ann["category_id"], ""),
                split=str(img.get("split", split)),
            )
        except (GeometryError, ValidationError, KeyError) as exc:
            log.warning("skipping annotation %s: %s", ann.get("id"), exc)
            continue
        records.append(record)
    return records

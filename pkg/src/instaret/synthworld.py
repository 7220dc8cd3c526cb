"""Deterministic synthetic instance universe for end-to-end verification.

Each instance is a unit feature vector that recurs across several context
vectors, so a correctly trained encoder must pull a crop of an instance
toward the full images containing it. No rasters exist: images are feature
records, exported in the same manifest and sequence formats the real
pipeline uses, with vectors carried inline under a ``features`` field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import PatchRef, TrainingTriplet, ValidationError
from .synth import build_query_text

FAMILY_SIZE = 4  # instances per category, mirroring 4 objects per class


@dataclass(frozen=True)
class WorldConfig:
    n_instances: int = 64
    n_contexts: int = 8
    feature_dim: int = 32
    images_per_instance: int = 5
    noise_sigma: float = 0.05
    # Residual context energy in crop features: real crops include background
    # pixels at the box margins, and that residue is what lets a retrieval
    # model tell apart frames of the same instance in different contexts.
    crop_context_weight: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if min(self.n_instances, self.n_contexts,
               self.images_per_instance) < 1:
            raise ValidationError("counts must be >= 1")
        if self.feature_dim < 2:
            raise ValidationError("feature_dim must be >= 2")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")
        if not (0 <= self.crop_context_weight < 1):
            raise ValidationError("crop_context_weight must be in [0, 1)")


@dataclass(frozen=True)
class WorldImage:
    image_id: str
    instance_id: str
    context_id: str
    full_feature: np.ndarray
    crop_feature: np.ndarray
    caption: str
    area_ratio: float


@dataclass
class World:
    config: WorldConfig
    instance_ids: list
    context_ids: list
    images: list = field(default_factory=list)

    def by_id(self, image_id: str) -> WorldImage:
        return self._index[image_id]

    def finalize(self):
        self._index = {img.image_id: img for img in self.images}
        return self

    def family_of(self, instance_id: str) -> str:
        return f"family_{self.instance_ids.index(instance_id) // FAMILY_SIZE:02d}"


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _draw_spread_vectors(rng, count: int, dim: int,
                         max_dot: float = 0.9) -> np.ndarray:
    """Unit vectors with pairwise dot < max_dot, re-sampled on violation."""
    vectors = []
    for _ in range(count):
        for _attempt in range(1000):
            v = _unit(rng.normal(size=dim))
            if all(abs(float(v @ u)) < max_dot for u in vectors):
                vectors.append(v)
                break
        else:
            raise ValidationError(
                f"cannot place {count} spread vectors in dim {dim}")
    return np.array(vectors)


def gen_world(config: WorldConfig) -> World:
    """Deterministically generate the instance/context universe."""
    rng = np.random.default_rng(config.seed)
    instances = _draw_spread_vectors(rng, config.n_instances,
                                     config.feature_dim)
    contexts = _draw_spread_vectors(rng, config.n_contexts,
                                    config.feature_dim)
    instance_ids = [f"instance_{i:03d}" for i in range(config.n_instances)]
    context_ids = [f"context_{k:02d}" for k in range(config.n_contexts)]
    world = World(config, instance_ids, context_ids)
    for i in range(config.n_instances):
        for j in range(config.images_per_instance):
            ctx = (i + j) % config.n_contexts
            noise = rng.normal(0.0, config.noise_sigma,
                               size=config.feature_dim) \
                if config.noise_sigma > 0 else np.zeros(config.feature_dim)
            world.images.append(WorldImage(
                image_id=f"img_{i:03d}_{j:02d}",
                instance_id=instance_ids[i],
                context_id=context_ids[ctx],
                full_feature=instances[i] + contexts[ctx] + noise,
                crop_feature=(instances[i]
                              + config.crop_context_weight * contexts[ctx]
                              + noise),
                caption=f"The {instance_ids[i]} is in {context_ids[ctx]}.",
                area_ratio=float(rng.uniform(0.05, 1.0)),
            ))
    return world.finalize()


def as_sequence_dataset(world: World) -> list:
    """One sequence per instance; category is the instance's family of 4."""
    sequences = []
    per_instance = {}
    for img in world.images:
        per_instance.setdefault(img.instance_id, []).append(img)
    for instance_id in world.instance_ids:
        frames = [{
            "image": img.image_id,
            "bbox": [0.0, 0.0, 1.0, 1.0],
            "caption": img.caption,
            "features": {"full": img.full_feature.tolist(),
                         "crop": img.crop_feature.tolist()},
        } for img in per_instance[instance_id]]
        sequences.append({
            "category": world.family_of(instance_id),
            "object_id": instance_id,
            "frames": frames,
        })
    return sequences


def held_out_ids(world: World) -> set:
    """The last image of each instance, reserved for evaluation."""
    last = {}
    for img in world.images:
        last[img.instance_id] = img.image_id
    return set(last.values())


def as_training_manifest(world: World):
    """Triplet per non-held-out image: crop query vs its own full image."""
    held = held_out_ids(world)
    triplets = []
    features = []
    for img in world.images:
        if img.image_id in held:
            continue
        triplets.append(TrainingTriplet(
            query_image=PatchRef(f"feat:{img.image_id}"),
            query_text=build_query_text("location", img.caption),
            positive_image=img.image_id,
            category_name=world.family_of(img.instance_id),
            source="synthworld",
            caption=img.caption,
        ))
        features.append({"query": img.crop_feature.tolist(),
                         "positive": img.full_feature.tolist()})
    return triplets, features


def write_training_manifest(world: World, path) -> int:
    """Manifest lines with inline feature vectors under ``features``."""
    triplets, features = as_training_manifest(world)
    with open(path, "w", encoding="utf-8") as fh:
        for t, f in zip(triplets, features):
            obj = t.to_json()
            obj["features"] = f
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
    return len(triplets)


def write_sequences(world: World, path) -> int:
    sequences = as_sequence_dataset(world)
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(json.dumps(seq, ensure_ascii=False) + "\n")
    return len(sequences)

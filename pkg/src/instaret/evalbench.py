"""Benchmark construction from sequence data and retrieval scoring.

Tasks follow the tracking-data recipe: per object, frames are sampled at
equal intervals, each sampled frame anchors one task, and the positive is
another sampled frame of the same object. The query image is the cropped
target instance (the target frame's box) in ``crop`` mode, or the anchor
frame's full image in ``full`` mode. Scoring is Precision@1 / Recall@k
with the same deterministic tie rule as the index module.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (BBox, CropRef, EvalReport, PatchRef, RetrievalTask,
                   SubtaskScores, ValidationError)
from .encoder import encode_multimodal, featurize_text
from .synth import build_query_text

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchConfig:
    frames_per_object: int = 5
    instance_pool: str = "same_class_all"
    location_pool: object = "all"  # "all" or ("sampled", n)
    query_image_mode: str = "crop"
    seed: int = 0

    def __post_init__(self):
        if self.frames_per_object < 2:
            raise ValidationError("frames_per_object must be >= 2")
        if self.instance_pool != "same_class_all":
            raise ValidationError(f"unknown instance pool {self.instance_pool!r}")
        if self.query_image_mode not in ("crop", "full"):
            raise ValidationError("query_image_mode must be crop or full")


def sample_frames(seq_len: int, n: int) -> list:
    """Equal-interval frame indices: floor(i*(L-1)/(n-1)), endpoints included."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if seq_len < n:
        raise ValidationError(f"sequence of {seq_len} frames cannot yield {n}")
    if n == 1:
        return [0]
    return [math.floor(i * (seq_len - 1) / (n - 1)) for i in range(n)]


def load_sequences(path) -> list:
    """Read the one-JSON-object-per-line sequence dataset format."""
    sequences = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                sequences.append(json.loads(line))
    return sequences


def _check_dataset(sequences):
    seen = set()
    for seq in sequences:
        key = (seq["category"], seq["object_id"])
        if key in seen:
            raise ValidationError(f"duplicate (category, object_id) {key}")
        seen.add(key)
        if not seq["frames"]:
            raise ValidationError(f"empty frame list for {key}")


def _sampled_objects(sequences, config: BenchConfig):
    """Per object: its sampled frames, in dataset order."""
    _check_dataset(sequences)
    out = []
    for seq in sequences:
        frames = seq["frames"]
        idxs = sample_frames(len(frames), config.frames_per_object)
        out.append({
            "category": seq["category"],
            "object_id": seq["object_id"],
            "frames": [frames[i] for i in idxs],
        })
    return out


def _derangement(n: int, rng) -> list:
    """Seeded permutation of range(n) with no fixed point."""
    if n < 2:
        raise ValidationError("need at least 2 frames to pair")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm.tolist()


def _frame_bbox(frame) -> BBox:
    return BBox(*[float(v) for v in frame["bbox"]])


def _query_ref(anchor_frame, target_frame, mode: str):
    if mode == "crop":
        # The query shows the cropped target instance, cut from the target
        # frame's own box; the anchor frame only indexes the task.
        return CropRef(str(target_frame["image"]), _frame_bbox(target_frame))
    return PatchRef(f"full:{anchor_frame['image']}")


def build_instance_tasks(sequences, config: BenchConfig) -> list:
    """One task per sampled frame; pool = all sampled frames of the category."""
    objects = _sampled_objects(sequences, config)
    by_cat = {}
    for obj in objects:
        by_cat.setdefault(obj["category"], []).append(obj)
    rng = np.random.default_rng(config.seed)
    tasks = []
    for obj in objects:
        peers = by_cat[obj["category"]]
        if len(peers) < 2:
            log.warning("category %r has a single object; negatives are its "
                        "own frames only", obj["category"])
        pool = tuple(str(f["image"]) for p in peers for f in p["frames"])
        positives = _derangement(len(obj["frames"]), rng)
        for i, frame in enumerate(obj["frames"]):
            target = obj["frames"][positives[i]]
            tasks.append(RetrievalTask(
                query_image=_query_ref(frame, target, config.query_image_mode),
                query_text=build_query_text("instance", obj["category"]),
                pool=pool,
                target_index=pool.index(str(target["image"])),
                subtask="instance",
                query_image_mode=config.query_image_mode,
            ))
    return tasks


def _caption_for(frame, captions) -> Optional[str]:
    if captions is not None:
        try:
            text = captions.caption(frame)
        except Exception as exc:
            log.warning("caption lookup failed for %s: %s",
                        frame.get("image"), exc)
            return None
        return text or None
    return frame.get("caption") or None


def _sampled_pool(all_ids, target_id, n, rng):
    """Seeded pool of size n containing the target, in global order."""
    others = [i for i in all_ids if i != target_id]
    if n - 1 > len(others):
        raise ValidationError(f"cannot sample pool of {n} from "
                              f"{len(all_ids)} images")
    chosen = rng.choice(len(others), size=n - 1, replace=False)
    keep = {others[i] for i in chosen} | {target_id}
    return tuple(i for i in all_ids if i in keep)


def build_location_tasks(sequences, captions, config: BenchConfig) -> list:
    """Same pairing as instance tasks; pool = all sampled images (or sampled n)."""
    objects = _sampled_objects(sequences, config)
    all_ids = [str(f["image"]) for obj in objects for f in obj["frames"]]
    if len(set(all_ids)) != len(all_ids):
        raise ValidationError("duplicate image ids across sequences")
    rng = np.random.default_rng(config.seed)
    tasks = []
    for obj in objects:
        positives = _derangement(len(obj["frames"]), rng)
        for i, frame in enumerate(obj["frames"]):
            target = obj["frames"][positives[i]]
            caption = _caption_for(target, captions)
            if caption is None:
                log.warning("skipping location task for %s: no caption",
                            frame["image"])
                continue
            target_id = str(target["image"])
            if config.location_pool == "all":
                pool = tuple(all_ids)
            else:
                kind, n = config.location_pool
                if kind != "sampled":
                    raise ValidationError(
                        f"unknown location pool {config.location_pool!r}")
                pool = _sampled_pool(all_ids, target_id, n, rng)
            tasks.append(RetrievalTask(
                query_image=_query_ref(frame, target, config.query_image_mode),
                query_text=build_query_text("location", caption),
                pool=pool,
                target_index=pool.index(target_id),
                subtask="location",
                query_image_mode=config.query_image_mode,
            ))
    return tasks


def load_pair_manifest(path) -> list:
    """Curated query/positive pairs (first-person-video style input)."""
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                pairs.append(json.loads(line))
    return pairs


def build_pair_tasks(pairs, subtask: str, mode: str = "crop") -> list:
    """Assemble tasks from a curated-pair manifest; pool = all positives."""
    pool = tuple(dict.fromkeys(str(p["positive_image"]) for p in pairs))
    tasks = []
    for pair in pairs:
        if mode == "crop":
            ref = CropRef(str(pair["query_image"]),
                          BBox(*[float(v) for v in pair["query_bbox"]]))
        else:
            ref = PatchRef(f"full:{pair['query_image']}")
        if subtask == "instance":
            text = build_query_text("instance", pair["class"])
        else:
            text = build_query_text("location", pair["caption"])
        tasks.append(RetrievalTask(
            query_image=ref,
            query_text=text,
            pool=pool,
            target_index=pool.index(str(pair["positive_image"])),
            subtask=subtask,
            query_image_mode=mode,
        ))
    return tasks


def target_rank(scores, target_index: int) -> int:
    """1-based rank of the target under descending score, ties by index."""
    scores = np.asarray(scores)
    order = np.argsort(-scores, kind="stable")
    return int(np.nonzero(order == target_index)[0][0]) + 1


def report_from_ranks(ranks_by_subtask: dict, k: int) -> EvalReport:
    """Precision@1 / Recall@k from per-task target ranks (0 marks a miss)."""
    subtasks = {}
    hits1 = hitsk = total = 0
    for name, ranks in ranks_by_subtask.items():
        n = len(ranks)
        p1 = sum(1 for r in ranks if r == 1) / n if n else 0.0
        rk = sum(1 for r in ranks if 1 <= r <= k) / n if n else 0.0
        subtasks[name] = SubtaskScores(p1, rk, k, n)
        hits1 += sum(1 for r in ranks if r == 1)
        hitsk += sum(1 for r in ranks if 1 <= r <= k)
        total += n
    return EvalReport(subtasks,
                      hits1 / total if total else 0.0,
                      hitsk / total if total else 0.0,
                      k, total)


class FeatureTableEmbedder:
    """Resolves image refs to stored feature vectors and encodes them.

    ``table`` maps image id to {"full": vector, "crop": vector}. Queries are
    fused with their hashed instruction text; candidates use a zero text slot.
    """

    def __init__(self, params, table, text_dim: int = 32, text_seed: int = 0):
        self.params = params
        self.table = table
        self.text_dim = text_dim
        self.text_seed = text_seed

    @classmethod
    def from_sequences(cls, params, sequences, **kwargs):
        table = {}
        for seq in sequences:
            for frame in seq["frames"]:
                feats = frame.get("features")
                if feats is None:
                    raise ValidationError(
                        f"frame {frame.get('image')} carries no features")
                table[str(frame["image"])] = feats
        return cls(params, table, **kwargs)

    def _image_feat(self, ref) -> np.ndarray:
        if isinstance(ref, CropRef):
            return np.asarray(self.table[ref.image_id]["crop"], dtype=np.float64)
        name = ref.patch
        if name.startswith("full:"):
            return np.asarray(self.table[name[5:]]["full"], dtype=np.float64)
        if name.startswith("feat:"):
            return np.asarray(self.table[name[5:]]["crop"], dtype=np.float64)
        raise ValidationError(f"unresolvable patch ref {name!r}")

    def embed_query(self, task: RetrievalTask) -> np.ndarray:
        text = featurize_text(task.query_text, dim=self.text_dim,
                              seed=self.text_seed)
        emb, _ = encode_multimodal(self.params,
                                   self._image_feat(task.query_image), text)
        return emb.values

    def embed_candidate(self, image_id: str) -> np.ndarray:
        full = np.asarray(self.table[image_id]["full"], dtype=np.float64)
        emb, _ = encode_multimodal(self.params, full,
                                   np.zeros(self.text_dim))
        return emb.values


class RandomEmbedder:
    """Sanity-floor baseline: every image and query gets a random unit vector."""

    def __init__(self, dim: int = 16, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def _unit(self, rng) -> np.ndarray:
        v = rng.normal(size=self.dim)
        return v / np.linalg.norm(v)

    def embed_query(self, task) -> np.ndarray:
        return self._unit(self._rng)

    def embed_candidate(self, image_id: str) -> np.ndarray:
        import hashlib

        raw = hashlib.blake2b(f"{self.seed}:{image_id}".encode(),
                              digest_size=8).digest()
        return self._unit(np.random.default_rng(int.from_bytes(raw, "little")))


def evaluate(tasks, embedder, k: int = 5, dump_ranks: bool = False):
    """Rank every task's pool and score Precision@1 / Recall@k.

    Encode failures count the task as a miss (rank 0) and are logged.
    Candidate embeddings are cached by image id across tasks.
    """
    if not tasks:
        raise ValidationError("no tasks to evaluate")
    cache = {}
    ranks_by_subtask = {}
    dumps = []
    for idx, task in enumerate(tasks):
        try:
            q = embedder.embed_query(task)
            rows = []
            for image_id in task.pool:
                if image_id not in cache:
                    cache[image_id] = embedder.embed_candidate(image_id)
                rows.append(cache[image_id])
            scores = np.asarray(rows) @ q
            rank = target_rank(scores, task.target_index)
        except Exception as exc:
            log.warning("evaluation failed for task %d: %s", idx, exc)
            rank = 0
        ranks_by_subtask.setdefault(task.subtask, []).append(rank)
        if dump_ranks:
            dumps.append({"task": idx, "subtask": task.subtask,
                          "target_rank": rank})
    report = report_from_ranks(ranks_by_subtask, k)
    if dump_ranks:
        return report, dumps
    return report

"""Single executable orchestrating the pipeline end to end.

Subcommands compose via files so stages can be re-run independently:

    world -> train -> index -> bench -> eval

plus ``synth`` for detection-format inputs, ``search`` for ad-hoc queries
and ``validate`` for manifest checking. Exit codes: 0 success, 1 validation
error, 2 I/O or format error. Progress goes to stderr; data to files or
stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import core, encoder, evalbench, index, synth, synthworld, trainer
from .core import GeometryError, ValidationError


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


class Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message, code=1)


def _progress(msg):
    print(msg, file=sys.stderr)


def _task_to_json(task) -> dict:
    return {
        "query_image": task.query_image.to_json(),
        "query_text": task.query_text,
        "pool": list(task.pool),
        "target_index": task.target_index,
        "subtask": task.subtask,
        "query_image_mode": task.query_image_mode,
    }


def _task_from_json(obj) -> core.RetrievalTask:
    return core.RetrievalTask(
        query_image=core.parse_image_ref(obj["query_image"]),
        query_text=obj["query_text"],
        pool=tuple(obj["pool"]),
        target_index=int(obj["target_index"]),
        subtask=obj["subtask"],
        query_image_mode=obj["query_image_mode"],
    )


def _load_manifest_examples(path, text_dim):
    """Manifest lines with inline features -> training pairs + image table."""
    examples = []
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            feats = obj.get("features")
            if feats is None:
                raise ValidationError(
                    "manifest lines need inline 'features' for training")
            query = np.asarray(feats["query"], dtype=np.float64)
            positive = np.asarray(feats["positive"], dtype=np.float64)
            text = encoder.featurize_text(obj["query_text"], dim=text_dim)
            examples.append(((query, text), positive))
            table[str(obj["positive_image"])] = {"full": positive,
                                                 "crop": query}
    return examples, table


def _scorer_from_flag(value):
    if value == "synthetic":
        return synth.SyntheticScorer()
    if value.startswith("file:"):
        return synth.FileScorer(value[5:])
    raise CliError(f"--scorer must be 'synthetic' or 'file:PATH', got {value!r}")


def _captions_from_flag(value):
    if value == "template":
        return synth.TemplateProvider()
    if value.startswith("file:"):
        return synth.FileProvider(value[5:])
    raise CliError(f"--captions must be 'template' or 'file:PATH', "
                   f"got {value!r}")


class FrameSidecarCaptions:
    """Caption provider for sequence frames, keyed by (image id, bbox)."""

    def __init__(self, path):
        self._table = synth._parse_sidecar(path)

    def caption(self, frame):
        key = synth._bbox_key(str(frame["image"]),
                              core.BBox(*[float(v) for v in frame["bbox"]]))
        if key not in self._table:
            raise ValidationError(f"no caption for {key}")
        return self._table[key]


def cmd_synth(args):
    records = synth.load_coco(args.annotations, split=args.split)
    stats = synth.synthesize_split(
        records, args.split, args.limit, args.seed,
        _scorer_from_flag(args.scorer), _captions_from_flag(args.captions),
        args.out, threshold=args.threshold, cap=args.cap)
    stats_path = str(args.out) + ".stats.json"
    with open(stats_path, "w", encoding="utf-8") as fh:
        json.dump(stats.to_json(), fh, indent=2)
    _progress(f"wrote {stats.count} triplets to {args.out} "
              f"({stats.skipped} skipped); stats in {stats_path}")
    return 0


def cmd_world(args):
    fields = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            fields = json.load(fh)
    if args.seed is not None:
        fields["seed"] = args.seed
    config = synthworld.WorldConfig(**fields)
    world = synthworld.gen_world(config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_triplets = synthworld.write_training_manifest(
        world, out / "train_manifest.jsonl")
    n_seqs = synthworld.write_sequences(world, out / "sequences.jsonl")
    with open(out / "world.json", "w", encoding="utf-8") as fh:
        json.dump(config.__dict__, fh, indent=2)
    _progress(f"world: {len(world.images)} images, {n_triplets} training "
              f"triplets, {n_seqs} sequences in {out}")
    return 0


def cmd_train(args):
    examples, _ = _load_manifest_examples(args.manifest, args.text_dim)
    feat_dim = examples[0][0][0].shape[0]
    config = core.TrainerConfig(
        temperature=args.temperature, lr0=args.lr, batch_size=args.batch,
        chunk_size=args.chunk, epochs=args.epochs, seed=args.seed,
        embed_dim=args.embed_dim, hidden_dim=args.hidden,
        total_steps=args.steps)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else sys.stdout
    try:
        params, log = trainer.train(config, examples,
                                    input_dim=feat_dim + args.text_dim,
                                    checkpoint_path=args.checkpoint,
                                    log_stream=log_fh)
    finally:
        if args.log:
            log_fh.close()
    final = log.steps[-1]["loss"] if log.steps else float("nan")
    _progress(f"trained {len(log.steps)} steps, final loss {final:.4f}, "
              f"checkpoint {args.checkpoint}")
    return 0


def cmd_index(args):
    params = encoder.load_checkpoint(args.checkpoint)
    _, table = _load_manifest_examples(args.manifest, args.text_dim)
    if not table:
        raise ValidationError("manifest yielded no candidate images")
    feat_dim = next(iter(table.values()))["full"].shape[0]
    text_dim = params.input_dim - feat_dim
    embs, ids = [], []
    for image_id, feats in table.items():
        emb, _ = encoder.encode_multimodal(params, feats["full"],
                                           np.zeros(text_dim))
        embs.append(emb.values)
        ids.append(image_id)
    store = index.build_index(embs, ids)
    index.save_store(store, args.out)
    _progress(f"indexed {store.count} candidates to {args.out}")
    return 0


def _load_query_feature(path):
    p = Path(path)
    if p.suffix == ".json":
        with open(p, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return np.asarray(obj["features"], dtype=np.float64)
    from PIL import Image

    with Image.open(p) as img:
        return encoder.featurize_image(np.asarray(img.convert("RGB")))


def cmd_search(args):
    store = index.load_store(args.store)
    params = encoder.load_checkpoint(args.checkpoint)
    img_feat = _load_query_feature(args.query_image)
    text_dim = params.input_dim - img_feat.shape[0]
    if text_dim < 0:
        raise ValidationError("query feature longer than encoder input")
    text = encoder.featurize_text(args.query_text, dim=text_dim)
    emb, _ = encoder.encode_multimodal(params, img_feat, text)
    hits = index.search_topk(store, emb, args.k)
    json.dump([{"id": i, "score": s} for i, s in hits], sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _parse_pool(value):
    if value == "all":
        return "all"
    if value.startswith("sampled:"):
        return ("sampled", int(value.split(":", 1)[1]))
    raise CliError(f"--pool must be 'all' or 'sampled:N', got {value!r}")


def cmd_bench(args):
    sequences = evalbench.load_sequences(args.sequences)
    config = evalbench.BenchConfig(
        frames_per_object=args.frames,
        location_pool=_parse_pool(args.pool),
        query_image_mode=args.mode,
        seed=args.seed,
    )
    tasks = []
    if args.subtask in ("instance", "both"):
        tasks += evalbench.build_instance_tasks(sequences, config)
    if args.subtask in ("location", "both"):
        captions = FrameSidecarCaptions(args.captions) if args.captions else None
        tasks += evalbench.build_location_tasks(sequences, captions, config)
    table = {}
    for seq in sequences:
        for frame in seq["frames"]:
            if "features" in frame:
                table[str(frame["image"])] = frame["features"]
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"images": table}) + "\n")
        for task in tasks:
            fh.write(json.dumps(_task_to_json(task)) + "\n")
    _progress(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def cmd_eval(args):
    params = encoder.load_checkpoint(args.checkpoint)
    tasks = []
    table = None
    with open(args.tasks, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if table is None and "images" in obj:
                table = obj["images"]
                continue
            tasks.append(_task_from_json(obj))
    if not table:
        raise ValidationError("tasks file carries no image feature table")
    feat_dim = len(next(iter(table.values()))["full"])
    text_dim = params.input_dim - feat_dim
    embedder = evalbench.FeatureTableEmbedder(params, table,
                                              text_dim=text_dim)
    result = evalbench.evaluate(tasks, embedder, k=args.k,
                                dump_ranks=bool(args.dump_ranks))
    if args.dump_ranks:
        report, dumps = result
        with open(args.dump_ranks, "w", encoding="utf-8") as fh:
            for entry in dumps:
                fh.write(json.dumps(entry) + "\n")
    else:
        report = result
    doc = json.dumps(report.to_json(), indent=2)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(doc + "\n")
    else:
        sys.stdout.write(doc + "\n")
    _progress(f"evaluated {report.n_tasks} tasks: "
              f"P@1 {report.overall_precision_at_1:.3f}, "
              f"R@{args.k} {report.overall_recall_at_k:.3f}")
    return 0


def cmd_validate(args):
    violations = core.validate_manifest(args.manifest)
    for v in violations:
        print(f"line {v.line}: {v.reason}", file=sys.stderr)
    return 1 if violations else 0


def build_parser() -> Parser:
    parser = Parser(prog="instaret",
                    description="instance-driven retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=Parser)

    p = sub.add_parser("synth", help="synthesize training triplets")
    p.add_argument("--annotations", required=True)
    p.add_argument("--scorer", default="synthetic")
    p.add_argument("--captions", default="template")
    p.add_argument("--threshold", type=float, default=synth.SCORE_THRESHOLD)
    p.add_argument("--cap", type=int, default=synth.CLASS_CAP)
    p.add_argument("--split", choices=["train", "val"], default="train")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("world", help="generate a synthetic instance world")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_world)

    p = sub.add_parser("train", help="contrastive training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--temperature", type=float, default=0.05)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--chunk", type=int, default=8)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--text-dim", type=int, default=32)
    p.add_argument("--log", default=None)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build an embedding store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text-dim", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="query an embedding store")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query-image", required=True)
    p.add_argument("--query-text", required=True)
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("bench", help="build benchmark tasks from sequences")
    p.add_argument("--sequences", required=True)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--mode", choices=["crop", "full"], default="crop")
    p.add_argument("--pool", default="all")
    p.add_argument("--subtask", choices=["instance", "location", "both"],
                   default="both")
    p.add_argument("--captions", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="evaluate retrieval on a task file")
    p.add_argument("--tasks", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--report", default=None)
    p.add_argument("--dump-ranks", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate", help="validate a triplet manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    for p in sub.choices.values():
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap; output ordering is unaffected")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValidationError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, index.StoreFormatError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

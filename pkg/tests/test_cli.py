import json

import pytest

from instaret.cli import run


def run_cli(*argv):
    return run(list(argv))


@pytest.fixture()
def world_dir(tmp_path):
    config = tmp_path / "world.json"
    config.write_text(json.dumps({
        "n_instances": 8, "n_contexts": 4, "feature_dim": 16,
        "images_per_instance": 3, "seed": 2,
    }))
    out = tmp_path / "world"
    assert run_cli("world", "--config", str(config),
                   "--out-dir", str(out)) == 0
    return out


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("--help")
        assert exc.value.code == 0

    def test_unknown_flag_is_usage_error(self):
        assert run_cli("validate", "--wat") == 1

    def test_missing_subcommand_is_usage_error(self):
        assert run_cli() == 1

    def test_missing_input_file_is_io_error(self, tmp_path):
        assert run_cli("validate", "--manifest",
                       str(tmp_path / "nope.jsonl")) == 2

    def test_malformed_store_is_format_error(self, tmp_path):
        store = tmp_path / "bad.bin"
        store.write_bytes(b"garbage")
        query = tmp_path / "q.json"
        query.write_text(json.dumps({"features": [0.0] * 16}))
        ckpt = tmp_path / "none.bin"
        ckpt.write_bytes(b"")
        assert run_cli("search", "--store", str(store), "--checkpoint",
                       str(ckpt), "--query-image", str(query),
                       "--query-text", "x") == 2


class TestValidate:
    def test_clean_manifest(self, world_dir):
        assert run_cli("validate", "--manifest",
                       str(world_dir / "train_manifest.jsonl")) == 0

    def test_dirty_manifest(self, tmp_path, capsys):
        path = tmp_path / "bad.jsonl"
        path.write_text("not json\n")
        assert run_cli("validate", "--manifest", str(path)) == 1
        assert "line 1" in capsys.readouterr().err


class TestWorld:
    def test_outputs_exist(self, world_dir):
        assert (world_dir / "train_manifest.jsonl").exists()
        assert (world_dir / "sequences.jsonl").exists()
        assert json.loads((world_dir / "world.json").read_text())["seed"] == 2

    def test_seed_flag_changes_output(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out, seed in ((a, "1"), (b, "9")):
            assert run_cli("world", "--seed", seed, "--out-dir", str(out)) == 0
        assert (a / "sequences.jsonl").read_bytes() != \
            (b / "sequences.jsonl").read_bytes()


class TestSynth:
    def _coco(self, tmp_path):
        doc = {
            "images": [{"id": i, "file_name": f"{i}.jpg", "width": 100,
                        "height": 100} for i in range(6)],
            "categories": [{"id": 1, "name": "dog"}],
            "annotations": [{"id": i, "image_id": i, "category_id": 1,
                             "bbox": [10, 10, 50, 50]} for i in range(6)],
        }
        path = tmp_path / "coco.json"
        path.write_text(json.dumps(doc))
        return path

    def test_synthetic_scorer_pipeline(self, tmp_path, capsys):
        out = tmp_path / "triplets.jsonl"
        code = run_cli("synth", "--annotations", str(self._coco(tmp_path)),
                       "--out", str(out))
        assert code == 0
        assert len(out.read_text().strip().split("\n")) == 6
        stats = json.loads((tmp_path / "triplets.jsonl.stats.json").read_text())
        assert stats["count"] == 6
        assert run_cli("validate", "--manifest", str(out)) == 0

    def test_bad_scorer_flag(self, tmp_path):
        assert run_cli("synth", "--annotations", str(self._coco(tmp_path)),
                       "--scorer", "magic", "--out",
                       str(tmp_path / "o.jsonl")) == 1


class TestPipeline:
    def test_world_train_index_search_bench_eval(self, world_dir, tmp_path,
                                                 capsys):
        manifest = world_dir / "train_manifest.jsonl"
        ckpt = tmp_path / "enc.bin"
        assert run_cli("train", "--manifest", str(manifest),
                       "--epochs", "10", "--batch", "8", "--chunk", "4",
                       "--embed-dim", "8", "--hidden", "16",
                       "--log", str(tmp_path / "train.log"),
                       "--checkpoint", str(ckpt)) == 0
        log_lines = (tmp_path / "train.log").read_text().strip().split("\n")
        assert json.loads(log_lines[0])["step"] == 0

        store = tmp_path / "store.bin"
        assert run_cli("index", "--manifest", str(manifest),
                       "--checkpoint", str(ckpt), "--out", str(store)) == 0

        first = json.loads(manifest.read_text().split("\n")[0])
        query = tmp_path / "q.json"
        query.write_text(json.dumps({"features": first["features"]["query"]}))
        capsys.readouterr()
        assert run_cli("search", "--store", str(store),
                       "--checkpoint", str(ckpt),
                       "--query-image", str(query),
                       "--query-text", first["query_text"], "-k", "3") == 0
        hits = json.loads(capsys.readouterr().out)
        assert len(hits) == 3
        assert hits[0]["score"] >= hits[1]["score"] >= hits[2]["score"]
        assert hits[0]["id"] == first["positive_image"]

        tasks = tmp_path / "tasks.jsonl"
        assert run_cli("bench", "--sequences",
                       str(world_dir / "sequences.jsonl"),
                       "--frames", "3", "--out", str(tasks)) == 0
        lines = tasks.read_text().strip().split("\n")
        header = json.loads(lines[0])
        assert "images" in header
        # 8 objects x 3 frames, instance + location subtasks
        assert len(lines) - 1 == 48

        report_path = tmp_path / "report.json"
        assert run_cli("eval", "--tasks", str(tasks),
                       "--checkpoint", str(ckpt),
                       "--report", str(report_path),
                       "--dump-ranks", str(tmp_path / "ranks.jsonl")) == 0
        report = json.loads(report_path.read_text())
        assert report["overall"]["n_tasks"] == 48
        assert set(report["subtasks"]) == {"instance", "location"}
        ranks = [json.loads(l) for l in
                 (tmp_path / "ranks.jsonl").read_text().strip().split("\n")]
        assert len(ranks) == 48

    def test_bench_deterministic(self, world_dir, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            assert run_cli("bench", "--sequences",
                           str(world_dir / "sequences.jsonl"),
                           "--frames", "3", "--pool", "sampled:6",
                           "--seed", "11", "--out", str(out)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_bad_pool_flag(self, world_dir, tmp_path):
        assert run_cli("bench", "--sequences",
                       str(world_dir / "sequences.jsonl"),
                       "--pool", "everything",
                       "--out", str(tmp_path / "t.jsonl")) == 1

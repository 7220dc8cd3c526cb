import json

import numpy as np
import pytest

from instaret.core import ValidationError, validate_manifest
from instaret.synthworld import (WorldConfig, as_sequence_dataset,
                                 as_training_manifest, gen_world,
                                 held_out_ids, write_sequences,
                                 write_training_manifest)


def small_config(**overrides):
    base = dict(n_instances=8, n_contexts=4, feature_dim=16,
                images_per_instance=3, seed=1)
    base.update(overrides)
    return WorldConfig(**base)


class TestGenWorld:
    def test_counts(self):
        world = gen_world(small_config())
        assert len(world.images) == 8 * 3
        assert len(world.instance_ids) == 8
        assert len(world.context_ids) == 4

    def test_deterministic(self):
        a = gen_world(small_config())
        b = gen_world(small_config())
        for x, y in zip(a.images, b.images):
            assert x.image_id == y.image_id
            assert np.array_equal(x.full_feature, y.full_feature)
            assert np.array_equal(x.crop_feature, y.crop_feature)

    def test_instance_vectors_are_spread(self):
        world = gen_world(small_config())
        # recover instance directions from noiseless crops
        noiseless = gen_world(small_config(noise_sigma=0.0,
                                           crop_context_weight=0.0))
        vecs = {}
        for img in noiseless.images:
            vecs.setdefault(img.instance_id, img.crop_feature)
        mat = np.array(list(vecs.values()))
        gram = np.abs(mat @ mat.T) - np.eye(len(mat))
        assert gram.max() < 0.9
        assert world.config.noise_sigma == 0.05

    def test_noiseless_crops_identical_per_instance(self):
        world = gen_world(small_config(noise_sigma=0.0,
                                       crop_context_weight=0.0))
        per = {}
        for img in world.images:
            per.setdefault(img.instance_id, []).append(img.crop_feature)
        for crops in per.values():
            for c in crops[1:]:
                assert np.array_equal(c, crops[0])

    def test_crop_keeps_context_residue_by_default(self):
        world = gen_world(small_config(noise_sigma=0.0))
        imgs = [i for i in world.images if i.instance_id == "instance_000"]
        assert not np.array_equal(imgs[0].crop_feature, imgs[1].crop_feature)

    def test_contexts_cycle(self):
        world = gen_world(small_config())
        img = world.by_id("img_002_02")
        assert img.context_id == f"context_{(2 + 2) % 4:02d}"

    def test_families_of_four(self):
        world = gen_world(small_config())
        assert world.family_of("instance_000") == "family_00"
        assert world.family_of("instance_003") == "family_00"
        assert world.family_of("instance_004") == "family_01"

    def test_area_ratio_in_range(self):
        world = gen_world(small_config())
        assert all(0.05 <= i.area_ratio <= 1.0 for i in world.images)

    def test_bad_config_rejected(self):
        with pytest.raises(ValidationError):
            WorldConfig(n_instances=0)
        with pytest.raises(ValidationError):
            WorldConfig(noise_sigma=-0.1)


class TestSequenceExport:
    def test_one_sequence_per_instance(self):
        world = gen_world(small_config())
        seqs = as_sequence_dataset(world)
        assert len(seqs) == 8
        assert all(len(s["frames"]) == 3 for s in seqs)
        assert {s["category"] for s in seqs} == {"family_00", "family_01"}

    def test_frames_carry_features_and_captions(self):
        seqs = as_sequence_dataset(gen_world(small_config()))
        frame = seqs[0]["frames"][0]
        assert set(frame["features"]) == {"full", "crop"}
        assert frame["caption"].startswith("The instance_000 is in context_")
        assert frame["bbox"] == [0.0, 0.0, 1.0, 1.0]

    def test_write_round_trips(self, tmp_path):
        world = gen_world(small_config())
        path = tmp_path / "seqs.jsonl"
        assert write_sequences(world, path) == 8
        lines = path.read_text().strip().split("\n")
        assert [json.loads(l) for l in lines] == as_sequence_dataset(world)


class TestTrainingExport:
    def test_held_out_is_last_image_per_instance(self):
        world = gen_world(small_config())
        held = held_out_ids(world)
        assert held == {f"img_{i:03d}_02" for i in range(8)}

    def test_manifest_excludes_held_out(self):
        world = gen_world(small_config())
        triplets, features = as_training_manifest(world)
        assert len(triplets) == len(features) == 8 * 2
        held = held_out_ids(world)
        assert all(t.positive_image not in held for t in triplets)

    def test_query_is_crop_positive_is_full(self):
        world = gen_world(small_config())
        triplets, features = as_training_manifest(world)
        img = world.by_id(triplets[0].positive_image)
        assert np.array_equal(features[0]["query"], img.crop_feature)
        assert np.array_equal(features[0]["positive"], img.full_feature)
        assert triplets[0].query_text.endswith(img.caption)

    def test_written_manifest_validates_clean(self, tmp_path):
        world = gen_world(small_config())
        path = tmp_path / "train.jsonl"
        assert write_training_manifest(world, path) == 16
        assert validate_manifest(path) == []

    def test_export_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_training_manifest(gen_world(small_config()), a)
        write_training_manifest(gen_world(small_config()), b)
        assert a.read_bytes() == b.read_bytes()

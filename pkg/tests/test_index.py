import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instaret.core import ValidationError
from instaret.index import (EmbeddingStore, StoreFormatError, build_index,
                            load_store, retrieve, save_store, search_topk)


def unit_rows(n, d, seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, d))
    return M / np.linalg.norm(M, axis=1, keepdims=True)


def store_of(n=8, d=4, seed=0):
    rows = unit_rows(n, d, seed)
    return build_index(list(rows), [f"id{i}" for i in range(n)])


class TestBuildIndex:
    def test_order_and_count(self):
        store = store_of(5)
        assert store.count == 5 and store.dim == 4
        assert store.ids == [f"id{i}" for i in range(5)]

    def test_duplicate_ids_rejected(self):
        rows = unit_rows(2, 3, 0)
        with pytest.raises(ValidationError):
            build_index(list(rows), ["a", "a"])

    def test_mixed_dims_rejected(self):
        with pytest.raises(ValidationError):
            build_index([np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0])],
                        ["a", "b"])

    def test_non_unit_row_rejected(self):
        with pytest.raises(ValidationError):
            build_index([np.array([2.0, 0.0])], ["a"])


class TestSearch:
    def test_singleton(self):
        store = build_index([np.array([1.0, 0.0])], ["only"])
        assert search_topk(store, np.array([0.0, 1.0]), 3) == [("only", 0.0)]

    def test_matches_argsort_oracle(self):
        store = store_of(50, 8, seed=3)
        q = unit_rows(1, 8, seed=9)[0]
        got = search_topk(store, q, 10)
        scores = store.matrix @ q.astype(np.float32)
        oracle = np.argsort(-scores, kind="stable")[:10]
        assert [g[0] for g in got] == [store.ids[i] for i in oracle]
        assert all(a[1] >= b[1] for a, b in zip(got, got[1:]))

    def test_tie_broken_by_insertion_index(self):
        v = np.array([1.0, 0.0])
        store = build_index([v, np.array([0.0, 1.0]), v.copy()],
                            ["first", "off", "dup"])
        got = search_topk(store, v, 3)
        assert [g[0] for g in got] == ["first", "dup", "off"]

    def test_k_beyond_count(self):
        store = store_of(3)
        assert len(search_topk(store, store.matrix[0], 10)) == 3

    def test_empty_store_rejected(self):
        empty = EmbeddingStore(np.zeros((0, 4), dtype=np.float32), [])
        with pytest.raises(ValidationError):
            search_topk(empty, np.ones(4), 1)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            search_topk(store_of(3, 4), np.ones(5), 1)

    def test_retrieve_is_rank_one(self):
        store = store_of(20, 6, seed=2)
        for s in range(10):
            q = unit_rows(1, 6, seed=100 + s)[0]
            assert retrieve(store, q) == search_topk(store, q, 5)[0][0]

    def test_retrieve_scale_invariant(self):
        store = store_of(10, 4, seed=5)
        q = unit_rows(1, 4, seed=6)[0]
        assert retrieve(store, q) == retrieve(store, 7.5 * q)

    @given(st.integers(0, 1000), st.integers(1, 12))
    @settings(max_examples=40)
    def test_topk_prefix_property(self, seed, k):
        # top-k is always a prefix of top-(k+1)
        store = store_of(12, 5, seed=seed % 17)
        q = unit_rows(1, 5, seed=seed)[0]
        small = search_topk(store, q, k)
        big = search_topk(store, q, k + 1)
        assert big[:len(small)] == small


class TestStoreFile:
    def test_round_trip_bit_exact(self, tmp_path):
        store = store_of(7, 5, seed=1)
        path = tmp_path / "s.bin"
        save_store(store, path)
        loaded = load_store(path)
        assert loaded.ids == store.ids
        assert loaded.matrix.tobytes() == store.matrix.tobytes()
        assert loaded.matrix.dtype == np.float32

    def test_unicode_ids(self, tmp_path):
        store = build_index([np.array([1.0, 0.0])], ["café/視覚"])
        path = tmp_path / "s.bin"
        save_store(store, path)
        assert load_store(path).ids == ["café/視覚"]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "s.bin"
        save_store(store_of(2), path)
        data = bytearray(path.read_bytes())
        data[3] ^= 0x55
        path.write_bytes(bytes(data))
        with pytest.raises(StoreFormatError):
            load_store(path)

    def test_truncated_rows(self, tmp_path):
        path = tmp_path / "s.bin"
        save_store(store_of(4), path)
        path.write_bytes(path.read_bytes()[:30])
        with pytest.raises(StoreFormatError):
            load_store(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "s.bin"
        save_store(store_of(2), path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(StoreFormatError):
            load_store(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "s.bin"
        save_store(store_of(2), path)
        data = bytearray(path.read_bytes())
        data[8] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(StoreFormatError):
            load_store(path)

"""Container format, query files, configs: round-trips and rejection paths.

Corruption tests mutate a known-good container on disk and assert the loader
refuses it with a clear message instead of shipping bad vectors to scoring.
"""

import json

import numpy as np
import pytest

from hmir import (DecomposedQuery, HierarchicalIndex, RankedResult, SchedulerConfig,
                  ValidationError, load_index, load_queries, save_index, save_queries)


def unit_rows(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def sample_index(n=6, dim=4, counts=(1, 2, 3), seed=0, normalized=True):
    rng = np.random.default_rng(seed)
    arrays = [unit_rows(rng.standard_normal((n, c, dim))) for c in counts]
    ids = [f"img{i:03d}" for i in range(n)]
    return HierarchicalIndex(ids, counts, arrays, normalized=normalized)


def sample_queries(n=3, dim=4, subs=2, seed=1):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(DecomposedQuery(
            f"q{i}", unit_rows(rng.standard_normal(dim)),
            unit_rows(rng.standard_normal((subs, dim))),
            f"img{i:03d}"))
    return out


class TestIndexConstruction:
    def test_images_canonicalized_by_id(self):
        arrays = [np.arange(8, dtype=np.float32).reshape(4, 1, 2)]
        index = HierarchicalIndex(["c", "a", "d", "b"], [1], arrays)
        assert index.image_ids == ("a", "b", "c", "d")
        # Vectors follow their ids through the reorder.
        assert index.whole_image_vectors[0].tolist() == [2.0, 3.0]
        assert index.position("c") == 2

    def test_first_level_must_be_whole_image(self):
        arrays = [np.zeros((2, 2, 3), dtype=np.float32)]
        with pytest.raises(ValidationError, match="whole-image"):
            HierarchicalIndex(["a", "b"], [2], arrays)

    def test_counts_must_be_non_decreasing(self):
        arrays = [np.zeros((2, 1, 3), dtype=np.float32),
                  np.zeros((2, 4, 3), dtype=np.float32),
                  np.zeros((2, 2, 3), dtype=np.float32)]
        with pytest.raises(ValidationError, match="non-decreasing"):
            HierarchicalIndex(["a", "b"], [1, 4, 2], arrays)

    def test_repeated_counts_allowed(self):
        arrays = [np.zeros((1, 1, 2), dtype=np.float32),
                  np.zeros((1, 3, 2), dtype=np.float32),
                  np.zeros((1, 3, 2), dtype=np.float32)]
        index = HierarchicalIndex(["a"], [1, 3, 3], arrays)
        assert index.level_counts == (1, 3, 3)
        assert index.level_position(3) == 1  # first match wins

    def test_duplicate_ids_rejected(self):
        arrays = [np.zeros((2, 1, 2), dtype=np.float32)]
        with pytest.raises(ValidationError, match="duplicate image id"):
            HierarchicalIndex(["a", "a"], [1], arrays)

    def test_non_finite_rejected_with_location(self):
        arrays = [np.zeros((2, 1, 2), dtype=np.float32),
                  np.zeros((2, 2, 2), dtype=np.float32)]
        arrays[1][1, 0, 1] = np.nan
        with pytest.raises(ValidationError, match="'b' level 2 segment 0"):
            HierarchicalIndex(["a", "b"], [1, 2], arrays)

    def test_norm_check_only_when_declared(self):
        arrays = [np.full((1, 1, 2), 3.0, dtype=np.float32)]
        HierarchicalIndex(["a"], [1], arrays)  # unnormalized: fine
        with pytest.raises(ValidationError, match="norm"):
            HierarchicalIndex(["a"], [1], arrays, normalized=True)

    def test_norm_tolerance_boundary(self):
        v = np.array([[[1.0 + 5e-5, 0.0]]], dtype=np.float32)
        HierarchicalIndex(["a"], [1], [v], normalized=True)  # within 1e-4
        v_bad = np.array([[[1.001, 0.0]]], dtype=np.float32)
        with pytest.raises(ValidationError):
            HierarchicalIndex(["a"], [1], [v_bad], normalized=True)

    def test_arrays_are_read_only(self):
        index = sample_index()
        with pytest.raises(ValueError):
            index.vectors_at_position(0)[0, 0, 0] = 5.0

    def test_level_lookup(self):
        index = sample_index(counts=(1, 2, 3))
        assert index.has_level(2)
        assert not index.has_level(5)
        assert index.vectors_for_count(3).shape == (6, 3, 4)
        with pytest.raises(ValidationError, match="no level with 5"):
            index.level_position(5)

    def test_unknown_image_id(self):
        index = sample_index()
        assert index.has_image("img000")
        with pytest.raises(ValidationError, match="unknown image id"):
            index.position("nope")


class TestContainerRoundTrip:
    def test_save_load_identity(self, tmp_path):
        index = sample_index()
        save_index(index, tmp_path / "idx")
        loaded = load_index(tmp_path / "idx")
        assert loaded == index
        assert loaded.normalized and loaded.level_counts == (1, 2, 3)

    def test_rewrite_is_byte_identical(self, tmp_path):
        """Saving a loaded container reproduces both files bit for bit."""
        index = sample_index(n=9, counts=(1, 1, 4), seed=3)
        save_index(index, tmp_path / "a")
        save_index(load_index(tmp_path / "a"), tmp_path / "b")
        for name in ("manifest.json", "vectors.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_manifest_shape(self, tmp_path):
        index = sample_index(n=3)
        save_index(index, tmp_path / "idx")
        text = (tmp_path / "idx" / "manifest.json").read_text()
        assert text.endswith("\n")
        manifest = json.loads(text)
        assert manifest["format"] == "HMIR"
        assert manifest["version"] == 1
        assert manifest["levels"] == [1, 2, 3]
        ids = [img["id"] for img in manifest["images"]]
        assert ids == sorted(ids)
        # Offsets tile the payload contiguously: image-major, level-minor.
        expect = 0
        for img in manifest["images"]:
            for g, count in enumerate(manifest["levels"]):
                assert img["offsets"][g] == expect
                expect += count * manifest["dim"] * 4
        assert (tmp_path / "idx" / "vectors.bin").stat().st_size == expect

    def test_payload_is_little_endian_f32(self, tmp_path):
        arrays = [np.array([[[1.5, -2.0]]], dtype=np.float32)]
        save_index(HierarchicalIndex(["a"], [1], arrays), tmp_path / "idx")
        raw = (tmp_path / "idx" / "vectors.bin").read_bytes()
        assert np.frombuffer(raw, dtype="<f4").tolist() == [1.5, -2.0]

    def test_random_round_trips(self, tmp_path):
        rng = np.random.default_rng(9)
        for trial in range(10):
            n = int(rng.integers(1, 8))
            dim = int(rng.integers(1, 6))
            n_levels = int(rng.integers(1, 4))
            counts = [1] + sorted(int(rng.integers(1, 5)) for _ in range(n_levels - 1))
            arrays = [rng.standard_normal((n, c, dim)).astype(np.float32) for c in counts]
            ids = [f"im{i}" for i in range(n)]
            index = HierarchicalIndex(ids, counts, arrays)
            save_index(index, tmp_path / f"t{trial}")
            assert load_index(tmp_path / f"t{trial}") == index


class TestContainerRejections:
    @pytest.fixture
    def saved(self, tmp_path):
        save_index(sample_index(), tmp_path / "idx")
        return tmp_path / "idx"

    def edit_manifest(self, root, fn):
        path = root / "manifest.json"
        manifest = json.loads(path.read_text())
        fn(manifest)
        path.write_text(json.dumps(manifest, indent=2) + "\n")

    def test_unknown_manifest_key(self, saved):
        self.edit_manifest(saved, lambda m: m.update(extra=1))
        with pytest.raises(ValidationError, match="unknown keys"):
            load_index(saved)

    def test_missing_manifest_key(self, saved):
        self.edit_manifest(saved, lambda m: m.pop("dim"))
        with pytest.raises(ValidationError, match="missing keys"):
            load_index(saved)

    def test_wrong_format_name(self, saved):
        self.edit_manifest(saved, lambda m: m.update(format="XXXX"))
        with pytest.raises(ValidationError, match="format"):
            load_index(saved)

    def test_unsupported_version(self, saved):
        self.edit_manifest(saved, lambda m: m.update(version=2))
        with pytest.raises(ValidationError, match="version"):
            load_index(saved)

    def test_truncated_payload(self, saved):
        path = saved / "vectors.bin"
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValidationError, match="runs past end"):
            load_index(saved)

    def test_offset_out_of_bounds(self, saved):
        self.edit_manifest(saved, lambda m: m["images"][0]["offsets"].__setitem__(0, 10 ** 9))
        with pytest.raises(ValidationError, match="runs past end"):
            load_index(saved)

    def test_denormalized_payload_rejected(self, saved):
        path = saved / "vectors.bin"
        raw = bytearray(path.read_bytes())
        raw[:4] = np.array([7.5], dtype="<f4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(ValidationError, match="norm"):
            load_index(saved)

    def test_unknown_image_key(self, saved):
        self.edit_manifest(saved, lambda m: m["images"][0].update(path="x.png"))
        with pytest.raises(ValidationError, match="unknown keys"):
            load_index(saved)


class TestDecomposedQuery:
    def test_basic_shape_checks(self):
        with pytest.raises(ValidationError):
            DecomposedQuery("q", np.zeros((2, 2)), np.zeros((1, 2)), None)
        with pytest.raises(ValidationError):
            DecomposedQuery("q", np.zeros(2), np.zeros((1, 3)), None)
        with pytest.raises(ValidationError):
            DecomposedQuery("q", np.zeros(2), np.zeros((0, 2)), None)
        with pytest.raises(ValidationError):
            DecomposedQuery("q", np.array([np.nan, 0.0]), np.zeros((1, 2)), None)

    def test_vectors_stored_read_only_f32(self):
        q = DecomposedQuery("q", np.array([1.0, 2.0]), np.array([[3.0, 4.0]]), None)
        assert q.global_vec.dtype == np.float32
        with pytest.raises(ValueError):
            q.subs[0, 0] = 9.0

    def test_query_file_round_trip_exact(self, tmp_path):
        queries = sample_queries()
        save_queries(queries, tmp_path / "q.jsonl")
        loaded = load_queries(tmp_path / "q.jsonl")
        assert len(loaded) == len(queries)
        for a, b in zip(queries, loaded):
            assert a == b  # float32 payloads survive the JSON decimal round trip

    def test_ground_truth_optional(self, tmp_path):
        q = DecomposedQuery("q", np.zeros(2), np.zeros((1, 2)), None)
        save_queries([q], tmp_path / "q.jsonl")
        line = json.loads((tmp_path / "q.jsonl").read_text())
        assert line["ground_truth"] is None
        assert load_queries(tmp_path / "q.jsonl")[0].ground_truth is None

    def test_duplicate_query_id_rejected(self, tmp_path):
        queries = sample_queries(2)
        rows = [json.loads(line) for line in
                save_and_read(queries, tmp_path / "q.jsonl")]
        rows[1]["query_id"] = rows[0]["query_id"]
        (tmp_path / "dup.jsonl").write_text(
            "".join(json.dumps(r) + "\n" for r in rows))
        with pytest.raises(ValidationError, match="duplicate query id"):
            load_queries(tmp_path / "dup.jsonl")

    def test_unknown_key_rejected(self, tmp_path):
        (tmp_path / "q.jsonl").write_text(json.dumps({
            "query_id": "q", "global": [1.0], "subs": [[1.0]], "notes": "hi"}) + "\n")
        with pytest.raises(ValidationError, match="unknown keys"):
            load_queries(tmp_path / "q.jsonl")

    def test_dimension_checked_against_index(self, tmp_path):
        save_queries(sample_queries(dim=5), tmp_path / "q.jsonl")
        with pytest.raises(ValidationError, match="dimension"):
            load_queries(tmp_path / "q.jsonl", index=sample_index(dim=4))

    def test_mutual_dimension_consistency(self, tmp_path):
        queries = [DecomposedQuery("a", np.zeros(2), np.zeros((1, 2)), None),
                   DecomposedQuery("b", np.zeros(3), np.zeros((1, 3)), None)]
        save_queries(queries, tmp_path / "q.jsonl")
        with pytest.raises(ValidationError, match="dimension"):
            load_queries(tmp_path / "q.jsonl")

    def test_ground_truth_membership_check(self, tmp_path):
        index = sample_index()
        queries = [DecomposedQuery("q", np.zeros(4), np.zeros((1, 4)), "ghost")]
        save_queries(queries, tmp_path / "q.jsonl")
        load_queries(tmp_path / "q.jsonl", index=index)  # lax by default
        with pytest.raises(ValidationError, match="not in index"):
            load_queries(tmp_path / "q.jsonl", index=index, check_ground_truth=True)

    def test_malformed_json_line(self, tmp_path):
        (tmp_path / "q.jsonl").write_text("{not json\n")
        with pytest.raises(ValidationError, match="line 1"):
            load_queries(tmp_path / "q.jsonl")


def save_and_read(queries, path):
    save_queries(queries, path)
    return path.read_text().splitlines(keepends=True)


class TestSchedulerConfig:
    def test_defaults(self):
        cfg = SchedulerConfig()
        assert cfg.mode == "hierarchical" and cfg.exit_tau is None
        assert cfg.initial_ratio == 1.0 and cfg.decay == 1.0

    def test_levels_sorted_and_deduped_rejected(self):
        assert SchedulerConfig(levels=(9, 4)).levels == (4, 9)
        with pytest.raises(ValidationError, match="repeat"):
            SchedulerConfig(levels=(4, 4))

    def test_range_validation(self):
        with pytest.raises(ValidationError):
            SchedulerConfig(k=0)
        with pytest.raises(ValidationError):
            SchedulerConfig(initial_ratio=0.0)
        with pytest.raises(ValidationError):
            SchedulerConfig(decay=1.5)
        with pytest.raises(ValidationError):
            SchedulerConfig(exit_tau=1.5)
        with pytest.raises(ValidationError):
            SchedulerConfig(mode="fancy")
        with pytest.raises(ValidationError):
            SchedulerConfig(aggregation="mean")

    def test_wire_round_trip(self):
        cfg = SchedulerConfig(k=5, mode="flat_mvr", levels=(4,), initial_ratio=0.3,
                              decay=0.9, exit_tau=0.85, aggregation="product")
        assert SchedulerConfig.from_json_dict(cfg.to_json_dict()) == cfg

    def test_tau_disabled_spelling(self):
        assert SchedulerConfig().to_json_dict()["tau"] == "disabled"
        for spelling in ("disabled", None):
            cfg = SchedulerConfig.from_json_dict({"tau": spelling})
            assert cfg.exit_tau is None
        with pytest.raises(ValidationError, match="tau"):
            SchedulerConfig.from_json_dict({"tau": "off"})

    def test_unknown_wire_key_rejected(self):
        with pytest.raises(ValidationError, match="unknown keys"):
            SchedulerConfig.from_json_dict({"K": 3, "fanout": 2})

    def test_resolved_levels(self):
        index = sample_index(counts=(1, 2, 3))
        assert SchedulerConfig(mode="single").resolved_levels(index) == ()
        assert SchedulerConfig(mode="hierarchical").resolved_levels(index) == (1, 2, 3)
        assert SchedulerConfig(mode="hierarchical", levels=(2,)).resolved_levels(index) == (2,)
        with pytest.raises(ValidationError):
            SchedulerConfig(mode="hierarchical", levels=(7,)).resolved_levels(index)


class TestRankedResult:
    def test_ordering_enforced(self):
        RankedResult((("a", 2.0), ("b", 1.0)))
        RankedResult((("a", 1.0), ("b", 1.0)))  # tie broken by id: valid
        with pytest.raises(ValidationError):
            RankedResult((("a", 1.0), ("b", 2.0)))
        with pytest.raises(ValidationError):
            RankedResult((("b", 1.0), ("a", 1.0)))
        with pytest.raises(ValidationError):
            RankedResult((("a", 1.0), ("a", 0.5)))

    def test_rank_lookup(self):
        r = RankedResult((("x", 3.0), ("y", 2.0)))
        assert r.rank_of("x") == 1 and r.rank_of("y") == 2
        assert r.rank_of("z") is None
        assert r.ids == ("x", "y") and len(r) == 2

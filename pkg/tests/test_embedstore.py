import itertools
import json
import math
import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusebench.embedstore import (
    MAGIC,
    EmbeddingFormatError,
    EmbeddingSet,
    ManifestEntry,
    ManifestError,
    SampleManifest,
    assemble_dataset,
    load_manifest,
    read_embedding_set,
    save_manifest,
    stratified_split,
    write_embedding_set,
)


def make_set(ids, vectors, name="exp", dim=None):
    vectors = np.asarray(vectors, dtype=np.float32)
    return EmbeddingSet(name, dim or vectors.shape[1], list(ids), vectors)


class TestEmbeddingFile:
    def test_roundtrip_known_values_and_exact_size(self, tmp_path):
        es = make_set(["a", "b"], [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        path = tmp_path / "x.emb"
        write_embedding_set(path, es)
        header = 8 + 4 + (4 + 3) + 4 + 8 + 2 * (4 + 1)  # magic/version/name/dim/count/ids
        assert path.stat().st_size == header + 2 * 3 * 4
        assert read_embedding_set(path) == es

    def test_empty_set_roundtrip(self, tmp_path):
        es = make_set([], np.zeros((0, 4), dtype=np.float32), dim=4)
        path = tmp_path / "empty.emb"
        write_embedding_set(path, es)
        back = read_embedding_set(path)
        assert back == es and back.sample_ids == []

    def test_nonfinite_rejected_before_write(self, tmp_path):
        es = make_set(["a"], [[1.0, np.nan]])
        path = tmp_path / "bad.emb"
        with pytest.raises(ValueError, match="non-finite"):
            write_embedding_set(path, es)
        assert not path.exists()

    def test_duplicate_ids_rejected(self, tmp_path):
        es = make_set(["a", "a"], [[1.0], [2.0]])
        with pytest.raises(ValueError, match="duplicate"):
            write_embedding_set(tmp_path / "dup.emb", es)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "t.emb"
        write_embedding_set(path, make_set(["a", "b"], [[1.0, 2.0], [3.0, 4.0]]))
        data = path.read_bytes()
        path.write_bytes(data[:-1])
        with pytest.raises(EmbeddingFormatError, match="truncated"):
            read_embedding_set(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "t.emb"
        write_embedding_set(path, make_set(["a"], [[1.0]]))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(EmbeddingFormatError, match="trailing"):
            read_embedding_set(path)

    def test_wrong_magic_names_it(self, tmp_path):
        path = tmp_path / "m.emb"
        write_embedding_set(path, make_set(["a"], [[1.0]]))
        data = bytearray(path.read_bytes())
        data[:8] = b"NOTMAGIC"
        path.write_bytes(bytes(data))
        with pytest.raises(EmbeddingFormatError, match="NOTMAGIC"):
            read_embedding_set(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "v.emb"
        write_embedding_set(path, make_set(["a"], [[1.0]]))
        data = bytearray(path.read_bytes())
        data[8:12] = struct.pack("<I", 9)
        path.write_bytes(bytes(data))
        with pytest.raises(EmbeddingFormatError, match="version"):
            read_embedding_set(path)

    @given(
        n=st.integers(0, 6),
        dim=st.integers(1, 5),
        seed=st.integers(0, 2**31),
        name=st.text(
            alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12
        ),
    )
    @settings(max_examples=40)
    def test_roundtrip_property(self, n, dim, seed, name):
        rng = np.random.default_rng(seed)
        es = EmbeddingSet(
            expert_name=name,
            dim=dim,
            sample_ids=[f"id{i}" for i in range(n)],
            vectors=rng.normal(size=(n, dim)).astype(np.float32),
        )
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "p.emb"
            write_embedding_set(path, es)
            assert read_embedding_set(path) == es


class TestManifest:
    def write_lines(self, tmp_path, lines):
        path = tmp_path / "m.jsonl"
        path.write_text("\n".join(json.dumps(ln) for ln in lines) + "\n")
        return path

    def test_basic_parse(self, tmp_path):
        path = self.write_lines(
            tmp_path,
            [
                {"task": "t", "num_classes": 2},
                {"id": "a", "label": 0},
                {"id": "b", "label": 0, "split": "train"},
                {"id": "c", "label": 1},
                {"id": "d", "label": 1, "split": "test"},
            ],
        )
        m = load_manifest(path)
        assert m.task_name == "t" and m.num_classes == 2 and len(m.entries) == 4
        assert m.entries[0].split == "unassigned"
        assert m.entries[1].split == "train"

    def test_label_out_of_range_cites_line(self, tmp_path):
        path = self.write_lines(
            tmp_path,
            [{"task": "t", "num_classes": 2}, {"id": "a", "label": 0}, {"id": "b", "label": 5}],
        )
        with pytest.raises(ManifestError, match="line 3"):
            load_manifest(path)

    def test_empty_class_rejected(self, tmp_path):
        path = self.write_lines(
            tmp_path,
            [{"task": "t", "num_classes": 3}, {"id": "a", "label": 0}, {"id": "b", "label": 1}],
        )
        with pytest.raises(ManifestError, match="class 2"):
            load_manifest(path)

    def test_missing_field_cites_line(self, tmp_path):
        path = self.write_lines(tmp_path, [{"task": "t", "num_classes": 2}, {"id": "a"}])
        with pytest.raises(ManifestError, match="line 2.*label"):
            load_manifest(path)

    def test_duplicate_id_cites_line(self, tmp_path):
        path = self.write_lines(
            tmp_path,
            [
                {"task": "t", "num_classes": 2},
                {"id": "a", "label": 0},
                {"id": "a", "label": 1},
            ],
        )
        with pytest.raises(ManifestError, match="line 3.*duplicate"):
            load_manifest(path)

    def test_save_load_roundtrip(self, tmp_path):
        m = SampleManifest(
            "t",
            2,
            [
                ManifestEntry("a", 0, "train"),
                ManifestEntry("b", 1, "val"),
                ManifestEntry("c", 1),
            ],
        )
        path = tmp_path / "rt.jsonl"
        save_manifest(path, m)
        back = load_manifest(path)
        assert back == m


def reference_largest_remainder_allocations(n, ratios):
    """Independent oracle: every allocation a valid largest-remainder rounding
    of n * ratios can produce, enumerated exhaustively."""
    quotas = [n * r for r in ratios]
    floors = [math.floor(q) for q in quotas]
    remainder = n - sum(floors)
    fracs = [q - f for q, f in zip(quotas, floors)]
    valid = set()
    for extra in itertools.combinations(range(3), remainder):
        # extras must all have fracs >= every non-chosen frac (largest remainder)
        chosen = set(extra)
        if all(
            fracs[i] >= fracs[j] - 1e-12
            for i in chosen
            for j in range(3)
            if j not in chosen
        ):
            alloc = tuple(floors[s] + (1 if s in chosen else 0) for s in range(3))
            valid.add(alloc)
    return valid


def two_class_manifest(n0, n1, k=2):
    entries = [ManifestEntry(f"a{i}", 0) for i in range(n0)] + [
        ManifestEntry(f"b{i}", 1) for i in range(n1)
    ]
    return SampleManifest("t", k, entries)


class TestStratifiedSplit:
    def test_spec_example_10_samples(self):
        # 5 per class, ratios (.7,.1,.2): overall must be 7/1/2 and each class
        # one of the two allocations valid under largest remainder.
        m = two_class_manifest(5, 5)
        out = stratified_split(m, (0.7, 0.1, 0.2), seed=1)
        per_class = {}
        for c in (0, 1):
            counts = [0, 0, 0]
            for e in out.entries:
                if e.label == c:
                    counts[("train", "val", "test").index(e.split)] += 1
            per_class[c] = tuple(counts)
        valid = reference_largest_remainder_allocations(5, (0.7, 0.1, 0.2))
        assert valid == {(4, 0, 1), (3, 1, 1)}  # oracle self-check
        assert per_class[0] in valid and per_class[1] in valid
        overall = tuple(sum(pc[s] for pc in per_class.values()) for s in range(3))
        assert overall == (7, 1, 2)

    def test_all_train_ratio(self):
        m = two_class_manifest(4, 3)
        out = stratified_split(m, (1.0, 0.0, 0.0), seed=0)
        assert all(e.split == "train" for e in out.entries)

    def test_deterministic(self):
        m = two_class_manifest(13, 9)
        a = stratified_split(m, (0.7, 0.1, 0.2), seed=42)
        b = stratified_split(m, (0.7, 0.1, 0.2), seed=42)
        assert a == b
        c = stratified_split(m, (0.7, 0.1, 0.2), seed=43)
        assert a != c  # 22 samples: different shuffle virtually certain

    def test_bad_ratio_sum(self):
        with pytest.raises(ValueError, match="sum to 1"):
            stratified_split(two_class_manifest(3, 3), (0.7, 0.2, 0.2), seed=0)

    def test_input_not_mutated(self):
        m = two_class_manifest(5, 5)
        stratified_split(m, (0.7, 0.1, 0.2), seed=1)
        assert all(e.split == "unassigned" for e in m.entries)

    @given(
        n0=st.integers(1, 40),
        n1=st.integers(1, 40),
        seed=st.integers(0, 2**31),
        ratios=st.sampled_from([(0.7, 0.1, 0.2), (0.5, 0.25, 0.25), (0.6, 0.2, 0.2)]),
    )
    @settings(max_examples=50)
    def test_partition_and_proportionality(self, n0, n1, seed, ratios):
        m = two_class_manifest(n0, n1)
        out = stratified_split(m, ratios, seed)
        assert {e.sample_id for e in out.entries} == {e.sample_id for e in m.entries}
        assert all(e.split in ("train", "val", "test") for e in out.entries)
        for c, n in ((0, n0), (1, n1)):
            for s, name in enumerate(("train", "val", "test")):
                count = sum(1 for e in out.entries if e.label == c and e.split == name)
                assert abs(count - n * ratios[s]) <= 1.0


class TestAssemble:
    def _manifest(self):
        return SampleManifest(
            "t",
            2,
            [ManifestEntry("a", 0, "train"), ManifestEntry("b", 1, "val"), ManifestEntry("c", 1, "test")],
        )

    def test_inner_join_with_drop_report(self):
        e1 = make_set(["a", "b", "c"], np.eye(3, 2), name="e1")
        e2 = make_set(["a", "b"], np.ones((2, 4)), name="e2")
        ds = assemble_dataset(self._manifest(), [e1, e2], ["e1", "e2"])
        assert ds.sample_ids == ["a", "b"]
        assert ds.dropped_ids == ["c"]
        assert ds.expert_names == ["e1", "e2"] and ds.dims == [2, 4]
        assert ds.features[0].dtype == np.float64

    def test_single_expert_full_overlap(self):
        e1 = make_set(["a", "b", "c"], np.arange(6.0).reshape(3, 2), name="e1")
        ds = assemble_dataset(self._manifest(), [e1], ["e1"])
        assert len(ds) == 3 and ds.dropped_ids == []
        feats, label, split = ds.sample(1)
        assert np.array_equal(feats[0], [2.0, 3.0]) and label == 1 and split == "val"

    def test_missing_expert(self):
        e1 = make_set(["a"], [[0.0]], name="e1")
        with pytest.raises(ValueError, match="not found"):
            assemble_dataset(self._manifest(), [e1], ["e1", "ghost"])

    def test_empty_join(self):
        e1 = make_set(["x"], [[0.0]], name="e1")
        e2 = make_set(["y"], [[0.0]], name="e2")
        with pytest.raises(ValueError, match="empty"):
            assemble_dataset(self._manifest(), [e1, e2], ["e1", "e2"])

    def test_join_size_bounded_by_smallest_expert(self):
        e1 = make_set(["a", "b", "c"], np.zeros((3, 2)), name="e1")
        e2 = make_set(["b", "c"], np.zeros((2, 2)), name="e2")
        ds = assemble_dataset(self._manifest(), [e1, e2], ["e1", "e2"])
        assert len(ds) <= 2

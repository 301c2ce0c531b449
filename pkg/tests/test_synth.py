import numpy as np
import pytest

from fusebench.embedstore import assemble_dataset, read_embedding_set, stratified_split, write_embedding_set
from fusebench.fusion import FusionConfig, init_model
from fusebench.metrics import macro_auc_ovr, roc_auc
from fusebench.synth import ExpertSpec, SynthSpec, gen_complementary_pair, gen_synthetic_benchmark
from fusebench.train import TrainConfig, predict_table, train


def two_expert_spec(seed=0, separation=2.0):
    return SynthSpec(
        n_per_class=50,
        num_classes=2,
        seed=seed,
        experts=[
            ExpertSpec("a", 6, separation, 1.0, (1,)),
            ExpertSpec("b", 4, separation, 0.5, (0, 1)),
        ],
    )


class TestGenerate:
    def test_shapes_and_labels(self):
        manifest, sets = gen_synthetic_benchmark(two_expert_spec())
        assert manifest.num_classes == 2 and len(manifest.entries) == 100
        assert [es.dim for es in sets] == [6, 4]
        assert all(e.split == "unassigned" for e in manifest.entries)
        assert manifest.entries[0].label == 0 and manifest.entries[99].label == 1

    def test_deterministic_bit_identical_files(self, tmp_path):
        paths = []
        for run in range(2):
            _, sets = gen_synthetic_benchmark(two_expert_spec(seed=123))
            p = tmp_path / f"run{run}.emb"
            write_embedding_set(p, sets[0])
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_different_seeds_differ(self):
        _, a = gen_synthetic_benchmark(two_expert_spec(seed=1))
        _, b = gen_synthetic_benchmark(two_expert_spec(seed=2))
        assert not np.array_equal(a[0].vectors, b[0].vectors)

    def test_per_class_mean_concentration(self):
        spec = SynthSpec(
            n_per_class=400,
            num_classes=3,
            seed=5,
            experts=[ExpertSpec("e", 8, 3.0, 2.0, (0, 2))],
        )
        manifest, (es,) = gen_synthetic_benchmark(spec)
        labels = np.array([e.label for e in manifest.entries])
        bound = 5.0 * 2.0 / np.sqrt(400)  # 5 sigma / sqrt(n), per coordinate
        for c in range(3):
            mean = es.vectors[labels == c].mean(axis=0)
            expected = np.zeros(8)
            if c in (0, 2):
                expected[c] = 3.0
            assert np.abs(mean - expected).max() <= bound

    def test_files_pass_store_validation_and_roundtrip(self, tmp_path):
        _, sets = gen_synthetic_benchmark(two_expert_spec())
        for es in sets:
            es.validate()
            p = tmp_path / f"{es.expert_name}.emb"
            write_embedding_set(p, es)
            assert read_embedding_set(p) == es

    def test_dim_below_classes_rejected(self):
        spec = SynthSpec(
            n_per_class=10,
            num_classes=4,
            seed=0,
            experts=[ExpertSpec("e", 3, 1.0, 1.0, (0,))],
        )
        with pytest.raises(ValueError, match="cannot orthonormalize"):
            gen_synthetic_benchmark(spec)

    def test_zero_separation_trains_to_chance(self):
        # null model: no expert carries signal, trained AUC must hover at 0.5
        spec = SynthSpec(
            n_per_class=500,
            num_classes=2,
            seed=31,
            experts=[ExpertSpec("e", 6, 0.0, 1.0, (1,))],
        )
        manifest, sets = gen_synthetic_benchmark(spec)
        manifest = stratified_split(manifest, (0.7, 0.1, 0.2), seed=8)
        ds = assemble_dataset(manifest, sets, ["e"])
        model = init_model(FusionConfig("single", ("e",), 6, 2), ds.dims, seed=9)
        ckpt = train(model, ds, TrainConfig(epochs=30, seed=10))
        auc = macro_auc_ovr(predict_table(ckpt.model, ds, ds.split_indices("test")))
        assert 0.4 <= auc <= 0.6


class TestComplementaryPair:
    def test_structure(self):
        manifest, sets = gen_complementary_pair(8, 20, seed=3)
        assert manifest.num_classes == 3
        assert [es.expert_name for es in sets] == ["expert_a", "expert_b"]
        labels = np.array([e.label for e in manifest.entries])
        va, vb = sets[0].vectors, sets[1].vectors
        # expert A: class 0 offset along e_0, classes 1/2 centered at origin
        assert va[labels == 0].mean(axis=0)[0] > 2.0
        assert abs(va[labels == 1].mean(axis=0)[0]) < 1.5
        # expert B: class 1 offset along e_1
        assert vb[labels == 1].mean(axis=0)[1] > 2.0
        assert abs(vb[labels == 0].mean(axis=0)[1]) < 1.5

    def test_dim_floor(self):
        with pytest.raises(ValueError, match="dim"):
            gen_complementary_pair(2, 10, seed=0)

    def test_single_expert_cannot_separate_its_blind_pair(self):
        # expert B sees classes 0 and 2 identically: restricted pairwise AUC
        # of its probe stays near chance, while 1-vs-rest is solid
        manifest, sets = gen_complementary_pair(8, 200, seed=7)
        manifest = stratified_split(manifest, (0.7, 0.1, 0.2), seed=7)
        ds = assemble_dataset(manifest, sets, ["expert_b"])
        model = init_model(FusionConfig("single", ("expert_b",), 8, 3), ds.dims, seed=7)
        ckpt = train(model, ds, TrainConfig(epochs=100, seed=7))
        table = predict_table(ckpt.model, ds, ds.split_indices("test"))
        blind = (table.labels == 0) | (table.labels == 2)
        auc_blind = roc_auc(table.scores[blind][:, 0], (table.labels[blind] == 0).astype(int))
        auc_strong = roc_auc(table.scores[:, 1], (table.labels == 1).astype(int))
        assert 0.35 <= auc_blind <= 0.65
        assert auc_strong >= 0.95

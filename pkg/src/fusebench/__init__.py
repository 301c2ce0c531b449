"""Benchmark harness for classification probes over frozen-backbone embeddings.

Trains single-expert probes and two mixture-of-experts fusions (dense gating
and sparse top-k routing) on cached embedding vectors, with label-smoothed
cross-entropy, AdamW + layer-wise LR decay, best-validation-AUC checkpointing,
and percentile-bootstrap confidence intervals.
"""

from fusebench.embedstore import (
    AlignedDataset,
    EmbeddingSet,
    ManifestEntry,
    SampleManifest,
    assemble_dataset,
    load_manifest,
    read_embedding_set,
    stratified_split,
    write_embedding_set,
)
from fusebench.fusion import FusionConfig, FusionModel, init_model, model_forward
from fusebench.metrics import MetricReport, PredictionTable, bootstrap_ci
from fusebench.synth import ExpertSpec, SynthSpec, gen_complementary_pair, gen_synthetic_benchmark
from fusebench.train import Checkpoint, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AlignedDataset",
    "Checkpoint",
    "EmbeddingSet",
    "ExpertSpec",
    "FusionConfig",
    "FusionModel",
    "ManifestEntry",
    "MetricReport",
    "PredictionTable",
    "SampleManifest",
    "SynthSpec",
    "TrainConfig",
    "assemble_dataset",
    "bootstrap_ci",
    "gen_complementary_pair",
    "gen_synthetic_benchmark",
    "init_model",
    "load_manifest",
    "model_forward",
    "read_embedding_set",
    "stratified_split",
    "train",
    "write_embedding_set",
]

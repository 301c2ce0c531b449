"""Synthetic multi-expert embedding benchmarks with controllable per-expert
discriminability.

Classes are isotropic Gaussians whose means sit on orthonormal directions
(the canonical basis), so the Bayes-optimal AUC between any informative class
and the origin cluster is the closed form Phi(separation / (sigma * sqrt(2))).
That gives the training pipeline an analytic oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fusebench.embedstore import EmbeddingSet, ManifestEntry, SampleManifest
from fusebench.nncore import child_seed, seeded_rng


@dataclass
class ExpertSpec:
    """One synthetic expert: class-c mean is separation * e_c for informative
    classes, the origin otherwise."""

    name: str
    dim: int
    separation: float
    noise_sigma: float
    informative_classes: tuple[int, ...]

    def __post_init__(self):
        self.informative_classes = tuple(self.informative_classes)


@dataclass
class SynthSpec:
    n_per_class: int
    num_classes: int
    experts: list[ExpertSpec]
    seed: int

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.n_per_class < 4:
            raise ValueError("need at least 4 samples per class")
        if not self.experts:
            raise ValueError("at least one expert required")
        names = [e.name for e in self.experts]
        if len(set(names)) != len(names):
            raise ValueError("expert names must be unique")
        for e in self.experts:
            if e.dim < 2:
                raise ValueError(f"{e.name}: dim must be >= 2")
            if e.dim < self.num_classes:
                raise ValueError(
                    f"{e.name}: dim {e.dim} < num_classes {self.num_classes}, "
                    "cannot orthonormalize class directions"
                )
            if e.separation < 0:
                raise ValueError(f"{e.name}: separation must be >= 0")
            if e.noise_sigma <= 0:
                raise ValueError(f"{e.name}: noise_sigma must be > 0")
            for c in e.informative_classes:
                if not (0 <= c < self.num_classes):
                    raise ValueError(f"{e.name}: informative class {c} out of range")

    def to_dict(self) -> dict:
        return {
            "n_per_class": self.n_per_class,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "experts": [
                {
                    "name": e.name,
                    "dim": e.dim,
                    "separation": e.separation,
                    "noise_sigma": e.noise_sigma,
                    "informative_classes": list(e.informative_classes),
                }
                for e in self.experts
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "SynthSpec":
        spec = SynthSpec(
            n_per_class=int(d["n_per_class"]),
            num_classes=int(d["num_classes"]),
            seed=int(d["seed"]),
            experts=[
                ExpertSpec(
                    name=e["name"],
                    dim=int(e["dim"]),
                    separation=float(e["separation"]),
                    noise_sigma=float(e["noise_sigma"]),
                    informative_classes=tuple(e.get("informative_classes", [])),
                )
                for e in d["experts"]
            ],
        )
        spec.validate()
        return spec


def gen_synthetic_benchmark(spec: SynthSpec) -> tuple[SampleManifest, list[EmbeddingSet]]:
    """Draw the benchmark deterministically from spec.seed.

    Sample s{idx:05d} belongs to class idx // n_per_class; splits are left
    unassigned. Each expert draws from its own child stream, so adding an
    expert never perturbs the others.
    """
    spec.validate()
    n_total = spec.n_per_class * spec.num_classes
    sample_ids = [f"s{idx:05d}" for idx in range(n_total)]
    labels = [idx // spec.n_per_class for idx in range(n_total)]
    entries = [ManifestEntry(sid, lab) for sid, lab in zip(sample_ids, labels)]
    manifest = SampleManifest(task_name="synthetic", num_classes=spec.num_classes, entries=entries)
    manifest.validate()

    sets = []
    for expert in spec.experts:
        rng = seeded_rng(child_seed(spec.seed, "expert", expert.name))
        means = np.zeros((spec.num_classes, expert.dim))
        for c in expert.informative_classes:
            means[c, c] = expert.separation
        noise = rng.standard_normal((n_total, expert.dim)) * expert.noise_sigma
        vectors = (means[np.array(labels)] + noise).astype(np.float32)
        sets.append(
            EmbeddingSet(
                expert_name=expert.name, dim=expert.dim, sample_ids=list(sample_ids), vectors=vectors
            )
        )
    return manifest, sets


def gen_complementary_pair(
    dim: int, n_per_class: int, seed: int
) -> tuple[SampleManifest, list[EmbeddingSet]]:
    """Three classes, two experts with complementary strengths.

    Expert A separates class 0 from the rest, expert B class 1; class 2 sits
    at the origin for both, so neither expert alone can tell classes 1/2
    (for A) or 0/2 (for B) apart. Uses separation 4, sigma 1.
    """
    if dim < 3:
        raise ValueError("dim must be >= 3 for three classes")
    spec = SynthSpec(
        n_per_class=n_per_class,
        num_classes=3,
        seed=seed,
        experts=[
            ExpertSpec("expert_a", dim, separation=4.0, noise_sigma=1.0, informative_classes=(0,)),
            ExpertSpec("expert_b", dim, separation=4.0, noise_sigma=1.0, informative_classes=(1,)),
        ],
    )
    return gen_synthetic_benchmark(spec)

"""Backbone registry.

A backbone maps a batch of preprocessed images to one embedding row per
image. Entries are registered by id; ``mock`` ships ready to use and is
deterministic in the image bytes alone, so tests need no model weights.

Real encoders (ViT-style models via torch/timm and friends) plug in the same
way: subclass Backbone, set ``dim`` and the published normalization
constants, implement ``embed``, and register. Weights are deliberately not
bundled or downloaded here. ``pooling`` selects the probe feature for
transformer backbones: "cls_token" (default) or "mean_pool" over patch
tokens; backbones without that distinction may ignore it.
"""

from __future__ import annotations

import hashlib

import numpy as np

POOLING_MODES = ("cls_token", "mean_pool")

# ImageNet statistics: the conventional default when a backbone publishes none
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class Backbone:
    """One feature extractor. Subclasses set name/dim and implement embed."""

    name: str
    dim: int
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def embed(self, pixels: np.ndarray, raw: list[bytes], pooling: str) -> np.ndarray:
        """(B, 224, 224, 3) normalized pixels + raw file bytes -> (B, dim) float32."""
        raise NotImplementedError


class MockBackbone(Backbone):
    """Weights-free stand-in: each embedding is a seeded Gaussian drawn from
    the SHA-256 of the image file bytes. Deterministic across platforms and
    independent of pooling mode."""

    name = "mock"
    dim = 16

    def embed(self, pixels: np.ndarray, raw: list[bytes], pooling: str) -> np.ndarray:
        out = np.empty((len(raw), self.dim), dtype=np.float32)
        for i, blob in enumerate(raw):
            seed = int.from_bytes(hashlib.sha256(b"mock-backbone:" + blob).digest()[:8], "little")
            rng = np.random.Generator(np.random.Philox(seed))
            out[i] = rng.standard_normal(self.dim).astype(np.float32)
        return out


_REGISTRY: dict[str, type[Backbone]] = {}


def register_backbone(cls: type[Backbone]) -> type[Backbone]:
    if not getattr(cls, "name", None):
        raise ValueError("backbone class must define a name")
    if cls.name in _REGISTRY:
        raise ValueError(f"backbone {cls.name!r} already registered")
    _REGISTRY[cls.name] = cls
    return cls


def get_backbone(backbone_id: str) -> Backbone:
    try:
        return _REGISTRY[backbone_id]()
    except KeyError:
        raise KeyError(
            f"unknown backbone {backbone_id!r}; available: {sorted(_REGISTRY)}"
        ) from None


def available_backbones() -> list[str]:
    return sorted(_REGISTRY)


register_backbone(MockBackbone)

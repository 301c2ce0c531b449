"""Minimal dense numerics: affine maps, stable softmax, seeded RNG streams,
and a central-finite-difference gradient oracle.

All model math runs in float64. There is deliberately no autodiff here: every
backward pass in this package is derived in closed form and checked against
``finite_diff_grad``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

_MASK64 = (1 << 64) - 1


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic RNG stream: Philox 4x64-10 keyed through numpy's
    SeedSequence.

    The generator family is fixed for the lifetime of this repo so that
    identical seeds always reproduce identical streams. Negative seeds are
    reduced modulo 2**64.
    """
    return np.random.Generator(np.random.Philox(int(seed) & _MASK64))


def child_seed(seed: int, *tags) -> int:
    """Derive an independent 64-bit child seed from ``seed`` and a tag tuple.

    A stream is single-owner: never share one generator across concurrent
    consumers, fork with child seeds instead. Derivation is SHA-256 over the
    canonical repr of (seed, *tags), so it is stable across platforms.
    """
    msg = repr((int(seed) & _MASK64,) + tuple(tags)).encode("utf-8")
    return int.from_bytes(hashlib.sha256(msg).digest()[:8], "little")


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """W @ x + b in float64. Raises ValueError on shape mismatch."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise ValueError(f"affine expects matrix/vector/vector, got {W.shape}/{x.shape}/{b.shape}")
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ValueError(f"affine shape mismatch: W {W.shape}, x {x.shape}, b {b.shape}")
    return W @ x + b


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax (max-subtracted). Input must be finite and non-empty."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of empty vector")
    if not np.isfinite(z).all():
        raise ValueError("softmax input contains non-finite values")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    ``f`` must be pure and deterministic; eps must lie in (0, 1e-2].
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    p = np.asarray(params, dtype=np.float64).copy()
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + eps
        f_hi = float(f(p))
        p[i] = orig - eps
        f_lo = float(f(p))
        p[i] = orig
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise ValueError(f"non-finite function value while probing coordinate {i}")
        grad[i] = (f_hi - f_lo) / (2.0 * eps)
    return grad


@dataclass
class ParamTensor:
    """One named trainable tensor.

    ``depth_group`` is the tensor's position from input (0) to output (D)
    and drives layer-wise learning-rate decay.
    """

    name: str
    values: np.ndarray
    depth_group: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.validate()

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def is_bias(self) -> bool:
        # bias tensors are exempt from weight decay
        return self.name.endswith("bias")

    def validate(self) -> None:
        if self.depth_group < 0:
            raise ValueError(f"{self.name}: depth_group must be >= 0")
        if any(s <= 0 for s in self.values.shape):
            raise ValueError(f"{self.name}: all dimensions must be positive, got {self.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError(f"{self.name}: values contain non-finite entries")

    def clone(self) -> "ParamTensor":
        return ParamTensor(self.name, self.values.copy(), self.depth_group)

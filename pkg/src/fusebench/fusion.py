"""Classification heads over frozen embeddings: single-expert probe, dense
gating fusion, and sparse top-k routing.

All strategies share the same trainable graph: per-expert channel projection
-> (gate) -> convex combination of projected features -> linear head. The
backward pass is closed form; ``_batch_backward`` is validated against the
finite-difference oracle in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from fusebench.nncore import ParamTensor, seeded_rng, softmax

STRATEGIES = ("single", "gating", "topk_router")


@dataclass
class FusionConfig:
    """Architecture of one probe/fusion model.

    ``top_k`` only applies to the topk_router strategy; ``gate_hidden`` of 0
    means a single affine gate, otherwise one tanh hidden layer of that
    width. ``balance_coeff`` scales an opt-in gate load-balance penalty
    (off by default).
    """

    strategy: str
    expert_subset: tuple[str, ...]
    d_fuse: int
    num_classes: int
    top_k: int = 1
    gate_hidden: int = 0
    balance_coeff: float = 0.0

    def __post_init__(self):
        self.expert_subset = tuple(self.expert_subset)
        self.validate()

    @property
    def num_experts(self) -> int:
        return len(self.expert_subset)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        n = len(self.expert_subset)
        if n < 1:
            raise ValueError("expert_subset must be non-empty")
        if len(set(self.expert_subset)) != n:
            raise ValueError("expert_subset contains duplicates")
        if self.strategy == "single" and n != 1:
            raise ValueError(f"strategy=single requires exactly 1 expert, got {n}")
        if self.strategy == "topk_router" and not (1 <= self.top_k <= n):
            raise ValueError(f"top_k must be in [1, {n}], got {self.top_k}")
        if self.d_fuse < 1:
            raise ValueError("d_fuse must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.gate_hidden < 0:
            raise ValueError("gate_hidden must be >= 0")
        if self.balance_coeff < 0:
            raise ValueError("balance_coeff must be >= 0")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "expert_subset": list(self.expert_subset),
            "d_fuse": self.d_fuse,
            "num_classes": self.num_classes,
            "top_k": self.top_k,
            "gate_hidden": self.gate_hidden,
            "balance_coeff": self.balance_coeff,
        }

    @staticmethod
    def from_dict(d: dict) -> "FusionConfig":
        return FusionConfig(
            strategy=d["strategy"],
            expert_subset=tuple(d["expert_subset"]),
            d_fuse=int(d["d_fuse"]),
            num_classes=int(d["num_classes"]),
            top_k=int(d.get("top_k", 1)),
            gate_hidden=int(d.get("gate_hidden", 0)),
            balance_coeff=float(d.get("balance_coeff", 0.0)),
        )


@dataclass
class FusionModel:
    """Trainable parameters plus strategy metadata.

    Immutable during forward evaluation; training mutates tensor values and
    requires exclusive ownership.
    """

    config: FusionConfig
    expert_dims: list[int]
    tensors: dict[str, ParamTensor]

    @property
    def has_gate(self) -> bool:
        return self.config.strategy != "single"

    def tensor(self, name: str) -> np.ndarray:
        return self.tensors[name].values

    def validate(self) -> None:
        for t in self.tensors.values():
            t.validate()

    def clone(self) -> "FusionModel":
        return FusionModel(
            config=self.config,
            expert_dims=list(self.expert_dims),
            tensors={k: t.clone() for k, t in self.tensors.items()},
        )

    def flat_params(self) -> np.ndarray:
        return np.concatenate([t.values.ravel() for t in self.tensors.values()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        off = 0
        for t in self.tensors.values():
            n = t.values.size
            t.values[...] = flat[off : off + n].reshape(t.values.shape)
            off += n
        if off != flat.size:
            raise ValueError(f"flat vector size {flat.size} != parameter count {off}")


def _xavier(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    a = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-a, a, size=(out_dim, in_dim))


def init_model(config: FusionConfig, expert_dims: list[int], seed: int) -> FusionModel:
    """Xavier-uniform weights, zero biases, deterministic in seed.

    Tensors are drawn in a fixed order (projections in subset order, gate,
    head) from a single stream, so identical (config, dims, seed) yield
    bit-identical parameters.
    """
    config.validate()
    n = config.num_experts
    if len(expert_dims) != n:
        raise ValueError(f"expected {n} expert dims, got {len(expert_dims)}")
    rng = seeded_rng(seed)
    head_depth = 2 if config.strategy != "single" else 1
    tensors: dict[str, ParamTensor] = {}
    for i, d_in in enumerate(expert_dims):
        tensors[f"proj.{i}.weight"] = ParamTensor(
            f"proj.{i}.weight", _xavier(rng, config.d_fuse, d_in), depth_group=0
        )
        tensors[f"proj.{i}.bias"] = ParamTensor(
            f"proj.{i}.bias", np.zeros(config.d_fuse), depth_group=0
        )
    if config.strategy != "single":
        gate_in = n * config.d_fuse
        if config.gate_hidden > 0:
            tensors["gate.hidden.weight"] = ParamTensor(
                "gate.hidden.weight", _xavier(rng, config.gate_hidden, gate_in), depth_group=1
            )
            tensors["gate.hidden.bias"] = ParamTensor(
                "gate.hidden.bias", np.zeros(config.gate_hidden), depth_group=1
            )
            tensors["gate.out.weight"] = ParamTensor(
                "gate.out.weight", _xavier(rng, n, config.gate_hidden), depth_group=1
            )
            tensors["gate.out.bias"] = ParamTensor("gate.out.bias", np.zeros(n), depth_group=1)
        else:
            tensors["gate.weight"] = ParamTensor(
                "gate.weight", _xavier(rng, n, gate_in), depth_group=1
            )
            tensors["gate.bias"] = ParamTensor("gate.bias", np.zeros(n), depth_group=1)
    tensors["head.weight"] = ParamTensor(
        "head.weight", _xavier(rng, config.num_classes, config.d_fuse), depth_group=head_depth
    )
    tensors["head.bias"] = ParamTensor(
        "head.bias", np.zeros(config.num_classes), depth_group=head_depth
    )
    return FusionModel(config=config, expert_dims=list(expert_dims), tensors=tensors)


def project(features: list[np.ndarray], model: FusionModel) -> list[np.ndarray]:
    """Per-expert channel alignment: z_i = W_i x_i + b_i, order preserved."""
    if len(features) != model.config.num_experts:
        raise ValueError(f"expected {model.config.num_experts} feature vectors, got {len(features)}")
    out = []
    for i, x in enumerate(features):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (model.expert_dims[i],):
            raise ValueError(
                f"expert {i} feature has shape {x.shape}, expected ({model.expert_dims[i]},)"
            )
        out.append(model.tensor(f"proj.{i}.weight") @ x + model.tensor(f"proj.{i}.bias"))
    return out


def _gate_logits_batch(model: FusionModel, concat: np.ndarray) -> tuple[np.ndarray, dict]:
    """Gate logits for a (B, N*d_fuse) concat matrix, plus backward cache."""
    if model.config.gate_hidden > 0:
        h_pre = concat @ model.tensor("gate.hidden.weight").T + model.tensor("gate.hidden.bias")
        h = np.tanh(h_pre)
        logits = h @ model.tensor("gate.out.weight").T + model.tensor("gate.out.bias")
        return logits, {"hidden": h}
    logits = concat @ model.tensor("gate.weight").T + model.tensor("gate.bias")
    return logits, {}


def gate_forward(z: list[np.ndarray], model: FusionModel) -> np.ndarray:
    """Dense gate weights: softmax over gate(concat(z)). Positive, sum 1."""
    if not model.has_gate:
        raise ValueError("gate_forward is undefined for strategy=single")
    vecs = [np.asarray(v, dtype=np.float64) for v in z]
    if len(vecs) != model.config.num_experts or any(
        v.shape != (model.config.d_fuse,) for v in vecs
    ):
        raise ValueError(
            f"gate_forward expects {model.config.num_experts} vectors of dim {model.config.d_fuse}"
        )
    concat = np.concatenate(vecs)[None, :]
    logits, _ = _gate_logits_batch(model, concat)
    return softmax(logits[0])


def topk_route(logits: np.ndarray, k: int) -> np.ndarray:
    """Sparse routing weights: softmax over the k largest logits, zeros
    elsewhere. Ties break toward the lower expert index."""
    g = np.asarray(logits, dtype=np.float64)
    if g.ndim != 1:
        raise ValueError("topk_route expects a 1-d logit vector")
    n = g.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if not np.isfinite(g).all():
        raise ValueError("logits contain non-finite values")
    # stable sort on (-logit, index): equal logits keep ascending index order
    order = np.argsort(-g, kind="stable")
    selected = np.sort(order[:k])
    weights = np.zeros(n)
    weights[selected] = softmax(g[selected])
    return weights


def gating_fuse(z: list[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Convex combination of projected features: sum_i w_i z_i."""
    w = np.asarray(weights, dtype=np.float64)
    if len(z) != w.shape[0]:
        raise ValueError(f"got {len(z)} vectors for {w.shape[0]} weights")
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must be nonnegative and sum to 1, got {w!r}")
    stacked = np.stack([np.asarray(v, dtype=np.float64) for v in z])
    return w @ stacked


def forward_batch(model: FusionModel, features: list[np.ndarray]) -> tuple[np.ndarray, dict]:
    """Vectorized forward over a batch.

    ``features`` holds one (B, d_i) matrix per expert. Returns class logits
    (B, num_classes) and the cache consumed by ``_batch_backward``.
    """
    cfg = model.config
    n = cfg.num_experts
    if len(features) != n:
        raise ValueError(f"expected {n} feature matrices, got {len(features)}")
    X = [np.atleast_2d(np.asarray(f, dtype=np.float64)) for f in features]
    batch = X[0].shape[0]
    for i, x in enumerate(X):
        if x.shape != (batch, model.expert_dims[i]):
            raise ValueError(
                f"expert {i} features have shape {x.shape}, expected ({batch}, {model.expert_dims[i]})"
            )
    Z = [x @ model.tensor(f"proj.{i}.weight").T + model.tensor(f"proj.{i}.bias") for i, x in enumerate(X)]
    cache: dict = {"X": X, "Z": Z, "batch": batch}

    if cfg.strategy == "single":
        fused = Z[0]
        route = None
    else:
        concat = np.concatenate(Z, axis=1)
        logits, gate_cache = _gate_logits_batch(model, concat)
        dense = softmax(logits)  # row-wise: softmax reduces along the last axis
        if cfg.strategy == "gating":
            route = dense
        else:
            route = np.stack([topk_route(logits[b], cfg.top_k) for b in range(batch)])
        fused = np.einsum("bi,bic->bc", route, np.stack(Z, axis=1))
        cache.update(concat=concat, gate_logits=logits, dense_weights=dense, **gate_cache)
    cache["route"] = route
    cache["fused"] = fused
    class_logits = fused @ model.tensor("head.weight").T + model.tensor("head.bias")
    cache["class_logits"] = class_logits
    return class_logits, cache


def model_forward(
    model: FusionModel, features: list[np.ndarray]
) -> tuple[np.ndarray, np.ndarray | None]:
    """Class logits for one sample, plus gate weights (None for single)."""
    logits, cache = forward_batch(model, [np.asarray(f, dtype=np.float64)[None, :] for f in features])
    route = cache["route"]
    return logits[0], (None if route is None else route[0])


def _softmax_vjp(weights: np.ndarray, d_weights: np.ndarray) -> np.ndarray:
    """Row-wise VJP through softmax: w * (dw - sum_j w_j dw_j).

    Also correct for renormalized top-k rows, where non-selected entries of
    ``weights`` are exactly zero and must receive zero gradient.
    """
    inner = (weights * d_weights).sum(axis=1, keepdims=True)
    return weights * (d_weights - inner)


def balance_penalty(model: FusionModel, cache: dict) -> float:
    """Opt-in load-balance penalty: N * sum_i mean_b(dense_w[b, i])^2.

    Minimized (value 1) when the dense gate is uniform on average.
    """
    dense = cache["dense_weights"]
    m = dense.mean(axis=0)
    return float(model.config.num_experts * (m**2).sum())


def _batch_backward(model: FusionModel, cache: dict, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Closed-form gradients for every tensor given d(loss)/d(class logits).

    ``d_logits`` must already carry the 1/batch factor for mean semantics.
    For topk_router the selection set is treated as constant: gradients flow
    through the renormalized softmax of the selected logits only.
    """
    cfg = model.config
    n = cfg.num_experts
    X, Z, fused = cache["X"], cache["Z"], cache["fused"]
    grads: dict[str, np.ndarray] = {}

    grads["head.weight"] = d_logits.T @ fused
    grads["head.bias"] = d_logits.sum(axis=0)
    d_fused = d_logits @ model.tensor("head.weight")

    if cfg.strategy == "single":
        d_Z = [d_fused]
    else:
        route = cache["route"]
        z_stack = np.stack(Z, axis=1)  # (B, N, d_fuse)
        d_route = np.einsum("bc,bic->bi", d_fused, z_stack)
        d_gate_logits = _softmax_vjp(route, d_route)
        if cfg.balance_coeff > 0.0:
            dense = cache["dense_weights"]
            batch = cache["batch"]
            m = dense.mean(axis=0)
            d_dense = np.broadcast_to(2.0 * cfg.balance_coeff * n * m / batch, dense.shape)
            d_gate_logits = d_gate_logits + _softmax_vjp(dense, d_dense)
        concat = cache["concat"]
        if cfg.gate_hidden > 0:
            h = cache["hidden"]
            grads["gate.out.weight"] = d_gate_logits.T @ h
            grads["gate.out.bias"] = d_gate_logits.sum(axis=0)
            d_h = d_gate_logits @ model.tensor("gate.out.weight")
            d_h_pre = d_h * (1.0 - h**2)
            grads["gate.hidden.weight"] = d_h_pre.T @ concat
            grads["gate.hidden.bias"] = d_h_pre.sum(axis=0)
            d_concat = d_h_pre @ model.tensor("gate.hidden.weight")
        else:
            grads["gate.weight"] = d_gate_logits.T @ concat
            grads["gate.bias"] = d_gate_logits.sum(axis=0)
            d_concat = d_gate_logits @ model.tensor("gate.weight")
        d_Z = []
        for i in range(n):
            gate_slice = d_concat[:, i * cfg.d_fuse : (i + 1) * cfg.d_fuse]
            d_Z.append(route[:, i : i + 1] * d_fused + gate_slice)

    for i in range(n):
        grads[f"proj.{i}.weight"] = d_Z[i].T @ X[i]
        grads[f"proj.{i}.bias"] = d_Z[i].sum(axis=0)

    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for tensor {name!r}")
    return {name: grads[name] for name in model.tensors}


def batch_loss_and_grads(
    model: FusionModel,
    features: list[np.ndarray],
    labels: np.ndarray,
    loss_grad: Callable[[np.ndarray, int], tuple[float, np.ndarray]],
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch and its exact gradients.

    ``loss_grad(probs, label)`` maps one softmax row and its label to
    (loss, d loss / d class logits); the balance penalty from the config is
    added when enabled.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    class_logits, cache = forward_batch(model, features)
    probs = softmax(class_logits)
    batch = labels.shape[0]
    d_logits = np.empty_like(class_logits)
    total = 0.0
    for b in range(batch):
        loss_b, grad_b = loss_grad(probs[b], int(labels[b]))
        total += loss_b
        d_logits[b] = grad_b
    loss = total / batch
    if model.config.balance_coeff > 0.0 and model.has_gate:
        loss += model.config.balance_coeff * balance_penalty(model, cache)
    grads = _batch_backward(model, cache, d_logits / batch)
    return loss, grads


def model_backward(
    model: FusionModel,
    batch: list[tuple[list[np.ndarray], int]],
    loss_grad: Callable[[np.ndarray, int], tuple[float, np.ndarray]],
) -> dict[str, np.ndarray]:
    """Mean-over-batch gradients of the supplied loss for every tensor."""
    if not batch:
        raise ValueError("empty batch")
    features = [
        np.stack([np.asarray(sample[0][i], dtype=np.float64) for sample in batch])
        for i in range(model.config.num_experts)
    ]
    labels = np.array([sample[1] for sample in batch], dtype=np.int64)
    return batch_loss_and_grads(model, features, labels, loss_grad)[1]


def model_to_dict(model: FusionModel) -> dict:
    """JSON-ready snapshot; values as decimal strings so float64 round-trips."""
    return {
        "config": model.config.to_dict(),
        "expert_dims": list(model.expert_dims),
        "tensors": [
            {
                "name": t.name,
                "shape": list(t.shape),
                "depth_group": t.depth_group,
                "values": [repr(float(v)) for v in t.values.ravel()],
            }
            for t in model.tensors.values()
        ],
    }


def model_from_dict(d: dict) -> FusionModel:
    config = FusionConfig.from_dict(d["config"])
    tensors: dict[str, ParamTensor] = {}
    for spec in d["tensors"]:
        values = np.array([float(v) for v in spec["values"]], dtype=np.float64).reshape(
            spec["shape"]
        )
        tensors[spec["name"]] = ParamTensor(spec["name"], values, int(spec["depth_group"]))
    return FusionModel(
        config=config, expert_dims=[int(x) for x in d["expert_dims"]], tensors=tensors
    )

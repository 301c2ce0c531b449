"""Shared test helpers: random model factories and gradient-check scaffolding."""

from __future__ import annotations

import numpy as np

from fusebench.fusion import (
    FusionConfig,
    FusionModel,
    batch_loss_and_grads,
    forward_batch,
    init_model,
)
from fusebench.train import label_smoothed_ce


def random_model_case(rng: np.random.Generator, strategy: str):
    """One random small model plus a random batch (N <= 4, dims <= 8)."""
    n = 1 if strategy == "single" else int(rng.integers(2, 5))
    dims = [int(rng.integers(2, 9)) for _ in range(n)]
    d_fuse = int(rng.integers(2, 7))
    num_classes = int(rng.integers(2, 5))
    gate_hidden = int(rng.choice([0, 0, 3]))
    top_k = int(rng.integers(1, n + 1)) if strategy == "topk_router" else 1
    cfg = FusionConfig(
        strategy=strategy,
        expert_subset=tuple(f"e{i}" for i in range(n)),
        d_fuse=d_fuse,
        num_classes=num_classes,
        top_k=top_k,
        gate_hidden=gate_hidden,
    )
    model = init_model(cfg, dims, seed=int(rng.integers(0, 2**32)))
    batch = int(rng.integers(2, 6))
    feats = [rng.normal(size=(batch, d)) for d in dims]
    labels = rng.integers(0, num_classes, size=batch)
    return model, feats, labels


def selection_sets(model: FusionModel, feats) -> tuple:
    """Frozen per-sample top-k selection sets (empty marker for dense models)."""
    if model.config.strategy != "topk_router":
        return ()
    _, cache = forward_batch(model, feats)
    route = cache["route"]
    return tuple(tuple(np.nonzero(route[b])[0].tolist()) for b in range(route.shape[0]))


def gradcheck(model: FusionModel, feats, labels, eps=1e-5, epsilon_smooth=0.1):
    """Central-difference check of the closed-form gradients.

    Returns (max relative error over checked coordinates, n skipped). For
    topk_router, coordinates whose +/-eps probe flips any sample's selection
    set are skipped: the loss is discontinuous there and finite differences
    are meaningless.
    """
    loss_grad = lambda p, y: label_smoothed_ce(p, y, epsilon_smooth)
    _, grads = batch_loss_and_grads(model, feats, labels, loss_grad)
    analytic = np.concatenate([grads[name].ravel() for name in model.tensors])
    flat0 = model.flat_params()
    base_sel = selection_sets(model, feats)

    def loss_at(flat):
        model.set_flat_params(flat)
        return batch_loss_and_grads(model, feats, labels, loss_grad)[0]

    p = flat0.copy()
    max_rel = 0.0
    skipped = 0
    try:
        for i in range(p.size):
            orig = p[i]
            p[i] = orig + eps
            model.set_flat_params(p)
            if selection_sets(model, feats) != base_sel:
                p[i] = orig
                skipped += 1
                continue
            f_hi = loss_at(p)
            p[i] = orig - eps
            model.set_flat_params(p)
            if selection_sets(model, feats) != base_sel:
                p[i] = orig
                skipped += 1
                continue
            f_lo = loss_at(p)
            p[i] = orig
            fd = (f_hi - f_lo) / (2 * eps)
            rel = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]) + abs(fd))
            max_rel = max(max_rel, rel)
    finally:
        model.set_flat_params(flat0)
    return max_rel, skipped

"""Label-smoothed cross-entropy, AdamW with layer-wise LR decay, the training
loop, and best-validation-AUC checkpoint selection.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from fusebench.embedstore import AlignedDataset
from fusebench.fusion import (
    FusionModel,
    batch_loss_and_grads,
    forward_batch,
    model_from_dict,
    model_to_dict,
)
from fusebench.metrics import PredictionTable, macro_auc_ovr
from fusebench.nncore import child_seed, seeded_rng, softmax

_PROB_FLOOR = 1e-12  # clamp before log so saturated softmax cannot yield -inf


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or parameters; message carries epoch/batch context."""


@dataclass
class TrainConfig:
    """Optimizer, loss, schedule, and seed settings.

    ``epochs`` counts passes over the training split with per-epoch
    validation; set ``max_steps`` to also cap raw optimizer steps.
    ``llrd_decay`` and ``weight_decay`` defaults are plumbing choices, not
    protocol constants.
    """

    base_lr: float = 1e-4
    llrd_decay: float = 0.75
    epsilon_smooth: float = 0.1
    epochs: int = 100
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    seed: int = 0
    max_steps: int | None = None

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not (0.0 < self.llrd_decay <= 1.0):
            raise ValueError("llrd_decay must be in (0, 1]")
        if not (0.0 <= self.epsilon_smooth < 1.0):
            raise ValueError("epsilon_smooth must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        cfg = TrainConfig(**d)
        cfg.validate()
        return cfg


def label_smoothed_ce(probs: np.ndarray, y: int, epsilon: float) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(pre-softmax logits) for one sample.

    loss = -(1 - eps) * log(p_y) - (eps / K) * sum_i log(p_i), the sum
    running over all K classes including y. The logit gradient is p - q with
    q_y = (1 - eps) + eps/K and q_other = eps/K. Probabilities are clamped
    at 1e-12 before the log.
    """
    if not (0.0 <= epsilon < 1.0):
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ValueError("probs must be a vector of length >= 2")
    k = p.shape[0]
    if not (0 <= y < k):
        raise ValueError(f"class index {y} out of range for K={k}")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probs must be a probability distribution within 1e-6")
    logs = np.log(np.maximum(p, _PROB_FLOOR))
    loss = -(1.0 - epsilon) * logs[y] - (epsilon / k) * logs.sum()
    q = np.full(k, epsilon / k)
    q[y] += 1.0 - epsilon
    return float(loss), p - q


def smoothed_target(y: int, k: int, epsilon: float) -> np.ndarray:
    """The target distribution q implied by the smoothed loss."""
    q = np.full(k, epsilon / k)
    q[y] += 1.0 - epsilon
    return q


def llrd_rates(model: FusionModel, base_lr: float, decay: float) -> dict[int, float]:
    """Layer-wise rates: lr(d) = base_lr * decay**(D - d) for depth groups d.

    The output-most group always receives base_lr.
    """
    if not (0.0 < decay <= 1.0):
        raise ValueError("decay must be in (0, 1]")
    depths = sorted({t.depth_group for t in model.tensors.values()})
    max_depth = depths[-1]
    return {d: base_lr * decay ** (max_depth - d) for d in depths}


@dataclass
class OptimizerState:
    """AdamW first/second moments per tensor, plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def for_model(model: FusionModel) -> "OptimizerState":
        return OptimizerState(
            m={name: np.zeros_like(t.values) for name, t in model.tensors.items()},
            v={name: np.zeros_like(t.values) for name, t in model.tensors.items()},
        )


def adamw_step(
    model: FusionModel,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr,
    config: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam step, in place.

    ``lr`` is either a scalar or a depth_group -> rate map (from
    ``llrd_rates``). Bias tensors are exempt from weight decay. The step
    counter advances once per call.
    """
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, tensor in model.tensors.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for {name!r}")
        rate = lr[tensor.depth_group] if isinstance(lr, dict) else float(lr)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        wd = 0.0 if tensor.is_bias else config.weight_decay
        tensor.values -= rate * (m_hat / (np.sqrt(v_hat) + config.adam_eps) + wd * tensor.values)


@dataclass
class Checkpoint:
    """Best-validation snapshot produced by :func:`train`."""

    model: FusionModel
    epoch: int
    val_auc: float
    train_config: TrainConfig

    def to_dict(self) -> dict:
        d = model_to_dict(self.model)
        d.update(
            format="fusebench-checkpoint-v1",
            epoch=self.epoch,
            best_val_auc=self.val_auc,
            train_seed=self.train_config.seed,
            train_config=self.train_config.to_dict(),
        )
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def save_checkpoint(path, ckpt: Checkpoint, extra: dict | None = None) -> None:
    d = ckpt.to_dict()
    if extra:
        d.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(d, sort_keys=True, indent=2) + "\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format") != "fusebench-checkpoint-v1":
        raise ValueError(f"unrecognized checkpoint format {d.get('format')!r}")
    known = {f for f in TrainConfig.__dataclass_fields__}
    cfg = TrainConfig.from_dict({k: v for k, v in d["train_config"].items() if k in known})
    return Checkpoint(
        model=model_from_dict(d),
        epoch=int(d["epoch"]),
        val_auc=float(d["best_val_auc"]),
        train_config=cfg,
    )


def predict_table(
    model: FusionModel, dataset: AlignedDataset, indices: np.ndarray
) -> PredictionTable:
    """Softmax probabilities for the given dataset rows."""
    feats = [f[indices] for f in dataset.features]
    logits, _ = forward_batch(model, feats)
    return PredictionTable(
        scores=softmax(logits),
        labels=dataset.labels[indices],
        sample_ids=[dataset.sample_ids[i] for i in indices],
    )


def train(
    model: FusionModel,
    dataset: AlignedDataset,
    config: TrainConfig,
    val_metric: Callable[[PredictionTable], float] | None = None,
    log_hook: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Minibatch AdamW training with per-epoch validation.

    Each epoch shuffles the train split with a child seed, steps through
    batches of ``batch_size`` (last batch may be smaller), and evaluates the
    validation metric (macro one-vs-rest AUC by default). The best snapshot
    by validation AUC is returned; the whole run is deterministic in
    (config.seed, dataset, initial model).
    """
    config.validate()
    metric = val_metric or macro_auc_ovr
    train_idx = dataset.split_indices("train")
    val_idx = dataset.split_indices("val")
    if train_idx.size == 0:
        raise ValueError("dataset has no train split")
    if val_idx.size == 0:
        raise ValueError("dataset has no val split")

    train_feats = [f[train_idx] for f in dataset.features]
    train_labels = dataset.labels[train_idx]
    n_train = train_idx.size
    rates = llrd_rates(model, config.base_lr, config.llrd_decay)
    state = OptimizerState.for_model(model)
    eps = config.epsilon_smooth
    loss_grad = lambda p, y: label_smoothed_ce(p, y, eps)

    best: Checkpoint | None = None
    steps = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = seeded_rng(child_seed(config.seed, "shuffle", epoch)).permutation(n_train)
        loss_sum = 0.0
        seen = 0
        for start in range(0, n_train, config.batch_size):
            if config.max_steps is not None and steps >= config.max_steps:
                break
            sel = perm[start : start + config.batch_size]
            feats = [f[sel] for f in train_feats]
            labels = train_labels[sel]
            try:
                loss, grads = batch_loss_and_grads(model, feats, labels, loss_grad)
            except ValueError as exc:
                raise TrainingDivergedError(
                    f"epoch {epoch}, batch at offset {start}: {exc}"
                ) from exc
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch at offset {start}"
                )
            adamw_step(model, grads, state, rates, config)
            for name, tensor in model.tensors.items():
                if not np.isfinite(tensor.values).all():
                    raise TrainingDivergedError(
                        f"non-finite parameter {name!r} at epoch {epoch}, batch offset {start}"
                    )
            loss_sum += loss * labels.shape[0]
            seen += labels.shape[0]
            steps += 1

        val_auc = float(metric(predict_table(model, dataset, val_idx)))
        if best is None or val_auc > best.val_auc:
            best = Checkpoint(
                model=model.clone(), epoch=epoch, val_auc=val_auc, train_config=config
            )
        if log_hook is not None:
            log_hook(
                {
                    "epoch": epoch,
                    "mean_train_loss": loss_sum / seen if seen else float("nan"),
                    "val_auc": val_auc,
                    "lr_by_group": {str(d): r for d, r in sorted(rates.items())},
                    "wall_ms": (time.perf_counter() - t0) * 1000.0,
                }
            )
        if config.max_steps is not None and steps >= config.max_steps:
            break
    assert best is not None
    return best

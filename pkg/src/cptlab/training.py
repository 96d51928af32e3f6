"""Continual-pretraining loop with per-unit adaptive learning rates.

The optimizer is plain SGD: the update for a parameter in unit U at step t
is theta -= schedule(t) * m_U * lr_base * grad, where m_U = 2 * (1 - I_U)
comes from the unit's normalized importance and schedule(t) is linear
warmup followed by cosine (or constant) decay. The three factors never
interact: `effective_lr` is literally their product, so reassigning
multipliers cannot perturb the schedule.

Importance is recomputed every `recompute_interval` steps (including step
0) on the next batch of training documents, so training never runs with
undefined multipliers. Modes:

    full              -- no expansion, every parameter trains, multiplier 1
    adept             -- expanded model, copies train with decoupled LRs
    uniform_expand    -- expanded model (uniform plan), copies train, no decoupling
    expand_no_decouple-- expanded model (importance plan), copies train, no decoupling
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .importance import UnitImportanceReport, probe_loss, unit_importance
from .model import Model, lm_loss
from .tensor import Graph, NonFiniteValue

MODES = ("adept", "full", "uniform_expand", "expand_no_decouple")
SCHEDULES = ("cosine", "constant")


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_base: float
    total_steps: int
    batch_size: int = 8
    warmup_ratio: float = 0.03
    schedule: str = "cosine"
    recompute_interval: int = 500
    seed: int = 0
    mode: str = "adept"
    normalization_mode: str = "minmax"
    grad_clip: float | None = None
    eval_interval: int | None = None  # defaults to recompute_interval

    def validate(self) -> None:
        problems = []
        if not self.lr_base > 0:
            problems.append("lr_base must be positive")
        if self.total_steps < 1:
            problems.append("total_steps must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0 <= self.warmup_ratio < 1:
            problems.append("warmup_ratio must be in [0, 1)")
        if self.recompute_interval < 1:
            problems.append("recompute_interval must be >= 1")
        if self.schedule not in SCHEDULES:
            problems.append(f"schedule must be one of {SCHEDULES}")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        if self.normalization_mode not in ("minmax", "budget_exact"):
            problems.append("normalization_mode must be minmax or budget_exact")
        if problems:
            raise TrainError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "lr_base": self.lr_base, "total_steps": self.total_steps,
            "batch_size": self.batch_size, "warmup_ratio": self.warmup_ratio,
            "schedule": self.schedule, "recompute_interval": self.recompute_interval,
            "seed": self.seed, "mode": self.mode,
            "normalization_mode": self.normalization_mode,
            "grad_clip": self.grad_clip, "eval_interval": self.eval_interval,
        }


@dataclass
class LrAssignment:
    """Multiplier m_U = 2 * (1 - I_U) per trainable (layer, unit)."""

    per_unit: dict[tuple[int, str], float]
    step_computed: int = 0

    def multiplier(self, key) -> float:
        layer, name = key
        if layer is None:
            return 1.0  # embedding / final norm / untied head (full mode)
        if key not in self.per_unit:
            raise TrainError(f"no learning-rate multiplier for unit {key}")
        return self.per_unit[key]

    def hash(self) -> str:
        body = json.dumps(
            [[k[0], k[1], repr(v)] for k, v in sorted(self.per_unit.items())],
            separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()[:16]


def assign_unit_lrs(report: UnitImportanceReport, model: Model | None = None) -> LrAssignment:
    """Turn normalized unit importances into LR multipliers, 2 * (1 - I).

    With a model given, verifies the report covers every trainable unit.
    """
    per_unit = {(s.layer, s.unit): 2.0 * (1.0 - s.normalized) for s in report.per_unit}
    if model is not None:
        missing = [key for key, _ in model.trainable_params()
                   if key[0] is not None and key not in per_unit]
        if missing:
            raise TrainError(f"report missing trainable units: {missing}")
    return LrAssignment(per_unit=per_unit, step_computed=report.computed_at_step)


def identity_assignment(model: Model, step: int = 0) -> LrAssignment:
    """Multiplier 1 for every trainable unit (non-decoupled modes)."""
    per_unit = {key: 1.0 for key, _ in model.trainable_params() if key[0] is not None}
    return LrAssignment(per_unit=per_unit, step_computed=step)


def schedule_lr(step: int, config: TrainConfig) -> float:
    """Global LR factor: linear warmup to 1, then cosine decay to 0
    (or flat 1 for the constant schedule)."""
    if not 0 <= step < config.total_steps:
        raise TrainError(f"step {step} outside [0, {config.total_steps})")
    warmup = int(config.warmup_ratio * config.total_steps)
    if step < warmup:
        return step / warmup
    if config.schedule == "constant":
        return 1.0
    span = config.total_steps - warmup
    return 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def effective_lr(step: int, config: TrainConfig, multiplier: float) -> float:
    """The factored form: schedule(t) * m_U * lr_base, nothing else."""
    return schedule_lr(step, config) * multiplier * config.lr_base


def sgd_update(trainables, assignment: LrAssignment, step: int,
               config: TrainConfig) -> None:
    """Apply theta -= effective_lr * grad to (key, tensor) pairs in place."""
    for key, t in trainables:
        lr = effective_lr(step, config, assignment.multiplier(key))
        t.data -= lr * t.grad


def _doc_fields(doc):
    if hasattr(doc, "tokens"):
        return doc.tokens, getattr(doc, "loss_mask", None)
    return np.asarray(doc, dtype=np.int64), None


def global_grad_norm(model: Model) -> float:
    total = 0.0
    for _, t in model.trainable_params():
        total += float((t.grad * t.grad).sum())
    return math.sqrt(total)


def train_step(model: Model, batch, assignment: LrAssignment, step: int,
               config: TrainConfig) -> float:
    """One SGD step over a batch of documents; returns the mean loss.

    Gradients accumulate per document in a fixed order with seed 1/B, so the
    result is independent of any parallel schedule that preserves that
    order. If the loss or any gradient is non-finite the step aborts with
    the parameters untouched.
    """
    if not batch:
        raise TrainError("empty batch")
    model.zero_grads()
    total = 0.0
    for doc in batch:
        tokens, mask = _doc_fields(doc)
        g = Graph()
        loss = lm_loss(model, tokens, mask, graph=g)
        g.backward(seed=1.0 / len(batch))
        total += loss.item()
    mean_loss = total / len(batch)

    trainables = list(model.trainable_params())
    for key, t in trainables:
        if not np.all(np.isfinite(t.grad)):
            raise NonFiniteValue(f"step {step}: non-finite gradient in {key}; step not applied")
    if config.grad_clip is not None:
        norm = global_grad_norm(model)
        if norm > config.grad_clip:
            factor = config.grad_clip / norm
            for _, t in trainables:
                t.grad *= factor
    sgd_update(trainables, assignment, step, config)
    model.zero_grads()
    return mean_loss


def _check_mode_pairing(model: Model, config: TrainConfig) -> None:
    if config.mode == "full":
        if model.is_expanded():
            raise TrainError("full mode expects an un-expanded model")
        for _, t in model.named_params():
            t.set_requires_grad(True)
    else:
        if not model.is_expanded():
            raise TrainError(f"{config.mode} mode expects an expanded model")


def train_cpt(model: Model, corpus: Corpus, config: TrainConfig,
              probe_corpus: Corpus | None = None,
              heldout_target: Corpus | None = None,
              metrics_path: str | None = None) -> tuple[Model, list[dict]]:
    """Run the continual-pretraining loop, mutating the model in place.

    Documents are shuffled once by config.seed and then cycled in that
    order. In adept mode, unit importance is recomputed on the upcoming
    batch at every step t with t % recompute_interval == 0 (including
    t = 0) and the multipliers refreshed. `probe_corpus` serves as the
    general-domain held-out set for periodic loss logging; `heldout_target`
    likewise for the target domain.
    """
    config.validate()
    _check_mode_pairing(model, config)
    if len(corpus) == 0:
        raise TrainError("empty training corpus")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(corpus))
    docs = [corpus[int(i)] for i in order]
    decouple = config.mode == "adept"
    expanded_layers = model.expanded_layer_indices()
    eval_interval = config.eval_interval or config.recompute_interval

    assignment = None if decouple else identity_assignment(model)
    metrics: list[dict] = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        cursor = 0
        for step in range(config.total_steps):
            batch = []
            for _ in range(min(config.batch_size, len(docs))):
                batch.append(docs[cursor])
                cursor = (cursor + 1) % len(docs)
            if decouple and step % config.recompute_interval == 0:
                report = unit_importance(
                    model, Corpus(documents=list(batch)), layer_set=expanded_layers,
                    normalization=config.normalization_mode, computed_at_step=step)
                assignment = assign_unit_lrs(report, model)
            loss = train_step(model, batch, assignment, step, config)
            record = {
                "step": step,
                "loss": loss,
                "assignment_hash": assignment.hash(),
                "lr_factor": schedule_lr(step, config),
            }
            if step % eval_interval == 0 or step == config.total_steps - 1:
                if probe_corpus is not None:
                    record["general_heldout_loss"] = probe_loss(model, probe_corpus)
                if heldout_target is not None:
                    record["target_heldout_loss"] = probe_loss(model, heldout_target)
            metrics.append(record)
            if sink is not None:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if sink is not None:
            sink.close()
    return model, metrics

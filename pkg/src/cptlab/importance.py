"""Layer- and unit-level importance estimation.

Layer importance comes in four flavors: residual-bypass masking (loss
increase when one layer is skipped), cumulative first-order Taylor scores,
module-wise rank aggregation, and a Fisher-information approximation. All
four report "smallest score = least important" so downstream selection can
uniformly take the k smallest.

Unit importance is the mean of theta * dL/dtheta over each named parameter
unit, normalized to [0, 1] for learning-rate assignment. Gradients for the
Taylor-style scores accumulate over the whole probe batch in one pass, so
document order cannot perturb the result.

Every probing routine restores the model exactly as it found it: masks,
requires_grad flags, and gradient buffers are snapshotted and put back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, corpus_hash
from .model import Model, UNIT_NAMES, lm_loss
from .tensor import Graph

LAYER_METHODS = ("masking_out", "taylor_cumulation", "rank_aggregation", "fisher")


class ProbeError(ValueError):
    pass


@dataclass
class LayerScore:
    layer: int
    score: float


@dataclass
class LayerImportanceReport:
    method: str
    base_loss: float
    per_layer: list[LayerScore]
    probe_corpus_id: str

    def scores(self) -> dict[int, float]:
        return {s.layer: s.score for s in self.per_layer}

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "base_loss": self.base_loss,
            "per_layer": [{"layer": s.layer, "score": s.score} for s in self.per_layer],
            "probe_corpus_id": self.probe_corpus_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerImportanceReport":
        return cls(method=d["method"], base_loss=d["base_loss"],
                   per_layer=[LayerScore(x["layer"], x["score"]) for x in d["per_layer"]],
                   probe_corpus_id=d["probe_corpus_id"])


@dataclass
class UnitScore:
    layer: int
    unit: str
    raw: float
    normalized: float
    size: int


@dataclass
class UnitImportanceReport:
    per_unit: list[UnitScore]
    normalization: str
    computed_at_step: int
    probe_corpus_id: str = ""

    def multiplier_basis(self) -> dict[tuple[int, str], float]:
        return {(s.layer, s.unit): s.normalized for s in self.per_unit}

    def to_dict(self) -> dict:
        return {
            "per_unit": [
                {"layer": s.layer, "unit": s.unit, "raw": s.raw,
                 "normalized": s.normalized, "size": s.size}
                for s in self.per_unit
            ],
            "normalization": self.normalization,
            "computed_at_step": self.computed_at_step,
            "probe_corpus_id": self.probe_corpus_id,
        }


def probe_loss(model: Model, probe: Corpus) -> float:
    """Mean over probe documents of the masked-position NLL."""
    if len(probe) == 0:
        raise ProbeError("probe corpus is empty")
    total = 0.0
    for doc in probe:
        total += lm_loss(model, doc.tokens, doc.loss_mask).item()
    return total / len(probe)


class _GradScope:
    """Route gradients to exactly the given layers' parameters.

    On entry the selected parameters get requires_grad with zeroed buffers
    and every other parameter stops tracking (so probe passes do no wasted
    work and leak nothing). On exit all requires_grad flags and gradient
    buffer contents are restored bit-identically."""

    def __init__(self, model: Model, layer_indices):
        self.model = model
        self.params = [model.layers[i].params[u] for i in layer_indices for u in UNIT_NAMES]
        selected = {id(t) for t in self.params}
        self.others = [t for _, t in model.named_params() if id(t) not in selected]

    def __enter__(self):
        self.saved = [(t, t.requires_grad,
                       None if t.grad is None else t.grad.copy())
                      for t in self.params + self.others]
        for t in self.params:
            t.set_requires_grad(True)
            t.zero_grad()
        for t in self.others:
            t.set_requires_grad(False)
        return self

    def __exit__(self, *exc):
        for t, flag, grad in self.saved:
            t.set_requires_grad(flag)
            if flag:
                t.grad[:] = grad
        return False

    def zero(self):
        for t in self.params:
            t.zero_grad()


def _accumulate_probe_gradients(model: Model, probe: Corpus) -> None:
    """One effective batch: grads become the gradient of the mean probe loss."""
    n = len(probe)
    for doc in probe:
        g = Graph()
        lm_loss(model, doc.tokens, doc.loss_mask, graph=g)
        g.backward(seed=1.0 / n)


def _require_clean_model(model: Model) -> None:
    masked = [i for i, l in enumerate(model.layers) if l.masked]
    if masked:
        raise ProbeError(f"model has masked layers on entry: {masked}")


def layer_importance_masking(model: Model, probe: Corpus) -> LayerImportanceReport:
    """Score each layer by the probe-loss increase when only it is bypassed.

    Scores may be negative (masking a layer can lower the loss); selection
    consumes the raw signed values.
    """
    _require_clean_model(model)
    if len(probe) == 0:
        raise ProbeError("probe corpus is empty")
    base = probe_loss(model, probe)
    scores = []
    for i in model.original_layer_indices():
        layer = model.layers[i]
        layer.masked = True
        try:
            masked_loss = probe_loss(model, probe)
        finally:
            layer.masked = False
        scores.append(LayerScore(layer=i, score=masked_loss - base))
    return LayerImportanceReport(method="masking_out", base_loss=base,
                                 per_layer=scores, probe_corpus_id=corpus_hash(probe))


def _unit_raw_scores(model: Model, probe: Corpus, layer_indices) -> dict:
    """Signed mean of theta*grad per (layer, unit), from one accumulated pass."""
    if len(probe) == 0:
        raise ProbeError("probe corpus is empty")
    with _GradScope(model, layer_indices):
        _accumulate_probe_gradients(model, probe)
        raw = {}
        for i in layer_indices:
            for u in UNIT_NAMES:
                t = model.layers[i].params[u]
                raw[(i, u)] = float((t.data * t.grad).mean())
    return raw


def layer_importance_taylor_cumulation(model: Model, probe: Corpus) -> LayerImportanceReport:
    """Sum of theta * dL/dtheta over each layer's parameters."""
    _require_clean_model(model)
    if len(probe) == 0:
        raise ProbeError("probe corpus is empty")
    layers = model.original_layer_indices()
    base = probe_loss(model, probe)
    with _GradScope(model, layers):
        _accumulate_probe_gradients(model, probe)
        scores = [
            LayerScore(layer=i, score=float(sum(
                (model.layers[i].params[u].data * model.layers[i].params[u].grad).sum()
                for u in UNIT_NAMES)))
            for i in layers
        ]
    return LayerImportanceReport(method="taylor_cumulation", base_loss=base,
                                 per_layer=scores, probe_corpus_id=corpus_hash(probe))


def layer_importance_fisher(model: Model, probe: Corpus) -> LayerImportanceReport:
    """Per-document squared gradients averaged over the probe, summed per layer."""
    _require_clean_model(model)
    if len(probe) == 0:
        raise ProbeError("probe corpus is empty")
    layers = model.original_layer_indices()
    base = probe_loss(model, probe)
    with _GradScope(model, layers) as scope:
        sq = {i: 0.0 for i in layers}
        acc = {(i, u): np.zeros_like(model.layers[i].params[u].data)
               for i in layers for u in UNIT_NAMES}
        for doc in probe:
            scope.zero()
            g = Graph()
            lm_loss(model, doc.tokens, doc.loss_mask, graph=g)
            g.backward()
            for i in layers:
                for u in UNIT_NAMES:
                    grad = model.layers[i].params[u].grad
                    acc[(i, u)] += grad * grad
        for i in layers:
            sq[i] = float(sum(acc[(i, u)].sum() for u in UNIT_NAMES)) / len(probe)
    scores = [LayerScore(layer=i, score=sq[i]) for i in layers]
    return LayerImportanceReport(method="fisher", base_loss=base,
                                 per_layer=scores, probe_corpus_id=corpus_hash(probe))


def rank_layers_per_unit(unit_scores: dict, layers, units=UNIT_NAMES) -> dict[int, int]:
    """Aggregate rank per layer: within each unit type, rank layers by
    descending score (rank 1 = most important, ties to the lower layer
    index), then sum ranks across unit types."""
    aggregate = {i: 0 for i in layers}
    for u in units:
        ordered = sorted(layers, key=lambda i: (-unit_scores[(i, u)], i))
        for rank, i in enumerate(ordered, start=1):
            aggregate[i] += rank
    return aggregate


def layer_importance_rank_aggregation(model: Model, probe: Corpus) -> LayerImportanceReport:
    """Module-wise rank aggregation over Taylor unit scores; the reported
    score is the negated aggregate rank so smaller still means less important."""
    _require_clean_model(model)
    layers = model.original_layer_indices()
    base = probe_loss(model, probe)
    raw = _unit_raw_scores(model, probe, layers)
    aggregate = rank_layers_per_unit(raw, layers)
    scores = [LayerScore(layer=i, score=float(-aggregate[i])) for i in layers]
    return LayerImportanceReport(method="rank_aggregation", base_loss=base,
                                 per_layer=scores, probe_corpus_id=corpus_hash(probe))


def layer_importance(model: Model, probe: Corpus, method: str = "masking_out"):
    fn = {
        "masking_out": layer_importance_masking,
        "taylor_cumulation": layer_importance_taylor_cumulation,
        "rank_aggregation": layer_importance_rank_aggregation,
        "fisher": layer_importance_fisher,
    }.get(method)
    if fn is None:
        raise ProbeError(f"unknown layer importance method {method!r}")
    return fn(model, probe)


def normalize_importance(raw, sizes, mode: str = "minmax") -> np.ndarray:
    """Map signed raw unit scores to [0, 1] by magnitude.

    minmax: |raw| min-max scaled (all-equal input collapses to all 0.5).
    budget_exact: the minmax result shifted toward a size-weighted mean of
    exactly 0.5; entries that clamp at 0 or 1 drop out and the remaining
    free entries absorb the residual until the mean lands within 1e-9 (a
    fixed point over the finite entry set). If everything clamps, all 0.5.
    """
    a = np.abs(np.asarray(raw, dtype=np.float64))
    w = np.asarray(sizes, dtype=np.float64)
    if a.size == 0:
        raise ProbeError("no units to normalize")
    if a.size != w.size:
        raise ProbeError("raw/sizes length mismatch")
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full(a.shape, 0.5)
    x = (a - lo) / (hi - lo)
    if mode == "minmax":
        return x
    if mode != "budget_exact":
        raise ProbeError(f"unknown normalization mode {mode!r}")

    total = w.sum()
    free = np.ones(a.size, dtype=bool)
    for _ in range(a.size + 1):
        mean = float((w * x).sum() / total)
        if abs(mean - 0.5) <= 1e-15:
            break
        if not free.any():
            return np.full(a.shape, 0.5)
        shift = (0.5 - mean) * total / w[free].sum()
        x[free] += shift
        clamped = (x < 0.0) | (x > 1.0)
        np.clip(x, 0.0, 1.0, out=x)
        free &= ~clamped
    return x


def unit_importance(model: Model, corpus: Corpus, layer_set,
                    normalization: str = "minmax",
                    computed_at_step: int = 0) -> UnitImportanceReport:
    """First-order Taylor importance per (layer, unit) over layer_set,
    normalized over exactly those units."""
    layer_set = sorted(set(int(i) for i in layer_set))
    if not layer_set:
        raise ProbeError("layer_set is empty")
    for i in layer_set:
        if not 0 <= i < model.n_layers:
            raise ProbeError(f"layer index {i} out of range")
    raw = _unit_raw_scores(model, corpus, layer_set)
    keys = [(i, u) for i in layer_set for u in UNIT_NAMES]
    sizes = [model.layers[i].params[u].size for i, u in keys]
    normalized = normalize_importance([raw[k] for k in keys], sizes, mode=normalization)
    per_unit = [
        UnitScore(layer=i, unit=u, raw=raw[(i, u)], normalized=float(nv), size=sz)
        for (i, u), nv, sz in zip(keys, normalized, sizes)
    ]
    return UnitImportanceReport(per_unit=per_unit, normalization=normalization,
                                computed_at_step=computed_at_step,
                                probe_corpus_id=corpus_hash(corpus))

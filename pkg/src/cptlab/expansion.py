"""Selective layer expansion with function-preserving initialization.

The k least-important layers are duplicated, each copy inserted directly
after its source so that no two copies are ever adjacent. Copies start as
identical parameter clones except for zeroed attention and feed-forward
output projections, which makes the expanded model's outputs equal the
original's until training moves the copies. Originals (and the embedding
and head) are frozen; only the copies train.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LayerState, Model, UNIT_NAMES, clone_model, forward_logits
from .importance import LayerImportanceReport
from .tensor import Tensor

ZEROED_UNITS = ("o_proj", "down_proj")

STRATEGIES = ("importance_guided", "uniform", "uniform_first_half", "uniform_last_half")

_METHOD_LABELS = {
    "masking_out": "Masking Out",
    "taylor_cumulation": "Importance Cumulation",
    "rank_aggregation": "Rank Aggregation",
    "fisher": "Fisher",
    "uniform": "Uniformly Expansion",
    "uniform_first_half": "Uniformly Expansion (first half)",
    "uniform_last_half": "Uniformly Expansion (last half)",
}


class ExpansionError(ValueError):
    pass


@dataclass(frozen=True)
class ExpansionPlan:
    """Which layers to duplicate, and where the copies go.

    `source_layers` are indices in the un-expanded model; each copy is
    inserted immediately after its source. `n_layers` pins the layer count
    the plan was built for.
    """

    strategy: str
    k: int
    source_layers: tuple[int, ...]
    n_layers: int
    source_report_hash: str = ""
    label: str = ""

    def __post_init__(self):
        if self.k != len(self.source_layers):
            raise ExpansionError("k != number of source layers")
        if len(set(self.source_layers)) != self.k:
            raise ExpansionError("duplicate source layers")
        if any(not 0 <= s < self.n_layers for s in self.source_layers):
            raise ExpansionError("source layer out of range")
        object.__setattr__(self, "source_layers", tuple(sorted(self.source_layers)))

    @property
    def insertion_positions(self) -> dict[int, int]:
        """Source layer -> position of its copy in the expanded layer list."""
        positions = {}
        shift = 0
        for i in range(self.n_layers):
            if i in self.source_layers:
                shift += 1
                positions[i] = i + shift
        return positions

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy, "k": self.k,
            "source_layers": list(self.source_layers),
            "insertion_positions": {str(k): v for k, v in self.insertion_positions.items()},
            "n_layers": self.n_layers,
            "source_report_hash": self.source_report_hash,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExpansionPlan":
        return cls(strategy=d["strategy"], k=d["k"],
                   source_layers=tuple(d["source_layers"]), n_layers=d["n_layers"],
                   source_report_hash=d.get("source_report_hash", ""),
                   label=d.get("label", ""))


def select_layers(report: LayerImportanceReport, k: int) -> ExpansionPlan:
    """Pick the k smallest-score layers (ties to the lower index).

    Because the selection objective is a plain sum of per-layer scores, the
    k smallest scores minimize it over all size-k subsets.
    """
    n = len(report.per_layer)
    if not 1 <= k <= n:
        raise ExpansionError(f"k={k} out of range [1, {n}]")
    ordered = sorted(report.per_layer, key=lambda s: (s.score, s.layer))
    sources = tuple(sorted(s.layer for s in ordered[:k]))
    label = f"{_METHOD_LABELS.get(report.method, report.method)} ({','.join(map(str, sources))})"
    return ExpansionPlan(strategy="importance_guided", k=k, source_layers=sources,
                         n_layers=n, source_report_hash=report.probe_corpus_id,
                         label=label)


def plan_uniform(n_layers: int, k: int, variant: str = "uniform") -> ExpansionPlan:
    """Evenly spaced sources anchored at the deep end of the chosen span
    (whole stack, first half, or last half), walking back by ceil(span/k)."""
    if variant == "uniform":
        start, end = 0, n_layers - 1
    elif variant == "uniform_first_half":
        start, end = 0, n_layers // 2 - 1
    elif variant == "uniform_last_half":
        start, end = n_layers // 2, n_layers - 1
    else:
        raise ExpansionError(f"unknown uniform variant {variant!r}")
    span = end - start + 1
    if not 1 <= k <= span:
        raise ExpansionError(f"k={k} does not fit span of {span} layers")
    step = -(-span // k)
    sources = tuple(sorted(end - step * i for i in range(k)))
    if sources[0] < start:
        raise ExpansionError(f"k={k} too large for span [{start}, {end}]")
    label = f"{_METHOD_LABELS[variant]} ({','.join(map(str, sources))})"
    return ExpansionPlan(strategy=variant, k=k, source_layers=sources,
                         n_layers=n_layers, label=label)


def _copy_layer(layer: LayerState, source_index: int) -> LayerState:
    params = {}
    for u in UNIT_NAMES:
        data = layer.params[u].data.copy()
        if u in ZEROED_UNITS:
            data[:] = 0.0
        params[u] = Tensor(data, requires_grad=True)
    return LayerState(params=params, origin="expanded", source=source_index,
                      frozen=False, masked=False)


def expand(model: Model, plan: ExpansionPlan) -> Model:
    """Build the expanded model; the input model is left untouched.

    Copies are trainable; originals, embedding, and head are frozen. With
    k=0 the result is a plain clone.
    """
    if model.is_expanded():
        raise ExpansionError("model is already expanded")
    if plan.n_layers != model.n_layers:
        raise ExpansionError(
            f"plan built for {plan.n_layers} layers, model has {model.n_layers}")
    out = clone_model(model)
    if plan.k == 0:
        return out
    layers: list[LayerState] = []
    for i, layer in enumerate(out.layers):
        layer.set_frozen(True)
        layers.append(layer)
        if i in plan.source_layers:
            layers.append(_copy_layer(model.layers[i], source_index=i))
    out.layers = layers
    out.token_embedding.set_requires_grad(False)
    out.final_norm.set_requires_grad(False)
    if out.lm_head is not None:
        out.lm_head.set_requires_grad(False)
    return out


def verify_function_preserving(m0: Model, m1: Model, trials: int = 100,
                               seed: int = 0) -> float:
    """Max |logit difference| between the two models over random sequences."""
    if m0.config.vocab_size != m1.config.vocab_size:
        raise ExpansionError("vocab mismatch")
    rng = np.random.default_rng(seed)
    max_len = min(m0.config.max_seq_len, m1.config.max_seq_len, 32)
    worst = 0.0
    for _ in range(trials):
        t = int(rng.integers(2, max_len + 1))
        tokens = rng.integers(0, m0.config.vocab_size, size=t)
        a = forward_logits(m0, tokens).data
        b = forward_logits(m1, tokens).data
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def assert_interleaved(model: Model) -> None:
    """No two expanded layers adjacent in the layer list."""
    for a, b in zip(model.layers, model.layers[1:]):
        if a.origin == "expanded" and b.origin == "expanded":
            raise ExpansionError("adjacent expanded layers found")

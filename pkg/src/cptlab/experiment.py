"""Two-domain forgetting experiment and its merge follow-up.

Pretrains a small model on the synthetic general domain, then continues
pretraining on a synthetic target domain under three regimes: full-parameter
tuning, uniform expansion, and importance-guided expansion with decoupled
unit learning rates. The question asked of the run is directional: how much
general-domain loss does each regime give up for how much target-domain
gain.

The merge follow-up trains a second decoupled extension (on the product-
flavored target) from the same expanded base, merges the two extensions
linearly, and reports the merged model's general-domain loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .analysis import MergeSpec, merge_expanded
from .corpus import Corpus, segment_corpus, synth_general_corpus, synth_target_corpus
from .expansion import ExpansionPlan, expand, select_layers
from .importance import LayerImportanceReport, layer_importance, probe_loss
from .model import Model, ModelConfig, clone_model, init_model
from .training import TrainConfig, train_cpt

EXPERIMENT_MODES = ("full", "uniform_expand", "adept")


@dataclass
class ForgettingConfig:
    """Calibrated defaults for the desk-scale two-domain experiment."""

    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        n_layers=6, d_model=64, n_heads=4, d_ff=128,
        vocab_size=259, max_seq_len=64, seed=101))
    window: int = 64
    stride: int = 48
    overlap: int = 16

    n_general_docs: int = 2000
    n_target_docs: int = 1000
    n_heldout_docs: int = 48
    n_probe_docs: int = 32
    general_seed: int = 1
    heldout_general_seed: int = 2
    target_seed: int = 3
    heldout_target_seed: int = 4
    probe_seed: int = 5

    # two-phase pretraining: a hot cosine leg, then a cool polishing leg
    pretrain_steps: int = 1600
    pretrain_lr: float = 0.35
    polish_steps: int = 1000
    polish_lr: float = 0.2
    pretrain_batch: int = 8
    pretrain_seed: int = 7
    polish_seed: int = 17

    cpt_steps: int = 1000
    cpt_lr: float = 0.5
    cpt_batch: int = 8
    cpt_seed: int = 11
    recompute_interval: int = 250
    grad_clip: float = 2.0
    normalization_mode: str = "minmax"

    k: int = 2
    importance_method: str = "masking_out"

    merge_steps: int = 600
    merge_weights: tuple[float, float] = (0.5, 0.5)

    def segmented(self, corpus: Corpus) -> Corpus:
        return segment_corpus(corpus, self.window, self.stride, self.overlap)


@dataclass
class ExperimentCorpora:
    train_general: Corpus
    train_target: Corpus
    heldout_general: Corpus
    heldout_target: Corpus
    probe: Corpus
    train_target2: Corpus
    heldout_target2: Corpus


def build_corpora(cfg: ForgettingConfig) -> ExperimentCorpora:
    return ExperimentCorpora(
        train_general=cfg.segmented(synth_general_corpus(cfg.n_general_docs,
                                                         cfg.general_seed)),
        train_target=cfg.segmented(synth_target_corpus(cfg.n_target_docs,
                                                       cfg.target_seed, "sums")),
        heldout_general=cfg.segmented(synth_general_corpus(cfg.n_heldout_docs,
                                                           cfg.heldout_general_seed)),
        heldout_target=cfg.segmented(synth_target_corpus(cfg.n_heldout_docs,
                                                         cfg.heldout_target_seed, "sums")),
        probe=cfg.segmented(synth_general_corpus(cfg.n_probe_docs, cfg.probe_seed)),
        train_target2=cfg.segmented(synth_target_corpus(cfg.n_target_docs,
                                                        cfg.target_seed + 100,
                                                        "products")),
        heldout_target2=cfg.segmented(synth_target_corpus(cfg.n_heldout_docs,
                                                          cfg.heldout_target_seed + 100,
                                                          "products")),
    )


def pretrain_base(cfg: ForgettingConfig, corpora: ExperimentCorpora) -> Model:
    """General-domain pretraining to a stable plateau (both legs)."""
    model = init_model(cfg.model)
    leg1 = TrainConfig(lr_base=cfg.pretrain_lr, total_steps=cfg.pretrain_steps,
                       batch_size=cfg.pretrain_batch, warmup_ratio=0.03,
                       schedule="cosine", seed=cfg.pretrain_seed, mode="full")
    train_cpt(model, corpora.train_general, leg1)
    if cfg.polish_steps:
        leg2 = TrainConfig(lr_base=cfg.polish_lr, total_steps=cfg.polish_steps,
                           batch_size=cfg.pretrain_batch, warmup_ratio=0.0,
                           schedule="cosine", seed=cfg.polish_seed, mode="full")
        train_cpt(model, corpora.train_general, leg2)
    return model


def cpt_config(cfg: ForgettingConfig, mode: str, steps: int | None = None) -> TrainConfig:
    return TrainConfig(lr_base=cfg.cpt_lr, total_steps=steps or cfg.cpt_steps,
                       batch_size=cfg.cpt_batch, warmup_ratio=0.03,
                       schedule="constant", recompute_interval=cfg.recompute_interval,
                       seed=cfg.cpt_seed, mode=mode, grad_clip=cfg.grad_clip,
                       normalization_mode=cfg.normalization_mode)


@dataclass
class ModeOutcome:
    mode: str
    model: Model = field(repr=False)
    general_loss: float = 0.0
    target_loss: float = 0.0
    metrics: list = field(default_factory=list, repr=False)


@dataclass
class ForgettingResult:
    base: Model = field(repr=False)
    report: LayerImportanceReport = field(repr=False, default=None)
    plan: ExpansionPlan = None
    base_general_loss: float = 0.0
    base_target_loss: float = 0.0
    outcomes: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def general_increase(self, mode: str) -> float:
        return self.outcomes[mode].general_loss - self.base_general_loss

    def target_decrease(self, mode: str) -> float:
        return self.base_target_loss - self.outcomes[mode].target_loss

    def summary(self) -> dict:
        out = {
            "base_general_loss": self.base_general_loss,
            "base_target_loss": self.base_target_loss,
            "plan": list(self.plan.source_layers),
            "wall_seconds": self.wall_seconds,
        }
        for mode, o in self.outcomes.items():
            out[mode] = {
                "general_loss": o.general_loss,
                "target_loss": o.target_loss,
                "general_increase": self.general_increase(mode),
                "target_decrease": self.target_decrease(mode),
            }
        return out


def run_forgetting_experiment(cfg: ForgettingConfig | None = None,
                              corpora: ExperimentCorpora | None = None,
                              base: Model | None = None,
                              modes=EXPERIMENT_MODES) -> ForgettingResult:
    """Pretrain (unless a base is supplied), probe, expand, and run the
    continual-pretraining regimes; returns models and loss bookkeeping."""
    cfg = cfg or ForgettingConfig()
    start = time.perf_counter()
    corpora = corpora or build_corpora(cfg)
    base = base or pretrain_base(cfg, corpora)

    result = ForgettingResult(base=base)
    result.base_general_loss = probe_loss(base, corpora.heldout_general)
    result.base_target_loss = probe_loss(base, corpora.heldout_target)
    result.report = layer_importance(base, corpora.probe, method=cfg.importance_method)
    result.plan = select_layers(result.report, cfg.k)

    from .expansion import plan_uniform
    for mode in modes:
        if mode == "full":
            model = clone_model(base)
        elif mode == "uniform_expand":
            model = expand(base, plan_uniform(base.n_layers, cfg.k, "uniform"))
        else:
            model = expand(base, result.plan)
        _, metrics = train_cpt(model, corpora.train_target, cpt_config(cfg, mode))
        result.outcomes[mode] = ModeOutcome(
            mode=mode, model=model,
            general_loss=probe_loss(model, corpora.heldout_general),
            target_loss=probe_loss(model, corpora.heldout_target),
            metrics=metrics)
    result.wall_seconds = time.perf_counter() - start
    return result


@dataclass
class MergeOutcome:
    merged: Model = field(repr=False)
    second: Model = field(repr=False)
    merged_general_loss: float = 0.0
    first_general_loss: float = 0.0
    second_general_loss: float = 0.0
    merged_target_loss: float = 0.0
    merged_target2_loss: float = 0.0


def run_merge_followup(cfg: ForgettingConfig, corpora: ExperimentCorpora,
                       result: ForgettingResult) -> MergeOutcome:
    """Train a second decoupled extension on the product-flavored domain from
    the same base and plan, then merge the two extensions linearly."""
    first = result.outcomes["adept"].model
    second = expand(result.base, result.plan)
    train_cpt(second, corpora.train_target2,
              cpt_config(cfg, "adept", steps=cfg.merge_steps))
    merged = merge_expanded([first, second], MergeSpec(weights=cfg.merge_weights))
    return MergeOutcome(
        merged=merged, second=second,
        merged_general_loss=probe_loss(merged, corpora.heldout_general),
        first_general_loss=result.outcomes["adept"].general_loss,
        second_general_loss=probe_loss(second, corpora.heldout_general),
        merged_target_loss=probe_loss(merged, corpora.heldout_target),
        merged_target2_loss=probe_loss(merged, corpora.heldout_target2))

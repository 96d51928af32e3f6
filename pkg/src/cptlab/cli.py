"""Command-line entry point and experiment orchestration.

Commands mirror the pipeline: gen-corpus, probe, expand, train, eval,
analyze-shift, merge, sweep-k, grad-check. Configuration comes from a JSON
file with a versioned "format" field; command-line flags override file
values. Every artifact is written atomically and its sha256 printed, so a
rerun with the same config and seed produces byte-identical outputs.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, checkpoint, corpus as corpus_mod, evaluation, expansion
from . import importance, model as model_mod, training
from .tensor import Graph, NonFiniteValue, Tensor, fd_gradient_oracle

CONFIG_FORMAT = 1
REPORT_DIR_ENV = "CPTLAB_REPORT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_INVARIANT = 4

CONFIG_ERRORS = (
    model_mod.ConfigError, corpus_mod.CorpusError, evaluation.EvalError,
    importance.ProbeError, training.TrainError, checkpoint.CheckpointError,
    FileNotFoundError, KeyError, json.JSONDecodeError,
)
INVARIANT_ERRORS = (expansion.ExpansionError, analysis.AnalysisError)

FPI_TOLERANCE = 1e-12
FPI_RELOAD_TOLERANCE = 1e-6


class InvariantViolation(RuntimeError):
    pass


class RunConfig:
    """Validated view over the config file plus flag overrides."""

    def __init__(self, raw: dict, base_dir: str = "."):
        if raw.get("format") != CONFIG_FORMAT:
            raise model_mod.ConfigError(
                f"config format {raw.get('format')!r} unsupported (want {CONFIG_FORMAT})")
        self.model = model_mod.ModelConfig(**raw["model"])
        self.model.validate()
        self.train = training.TrainConfig(**raw.get("train", {"lr_base": 0.1, "total_steps": 1}))
        self.train.validate()
        exp = raw.get("expansion", {})
        self.strategy = exp.get("strategy", "importance_guided")
        self.k = int(exp.get("k", 1))
        self.importance_method = exp.get("importance_method", "masking_out")
        if self.strategy not in expansion.STRATEGIES:
            raise model_mod.ConfigError(f"unknown expansion strategy {self.strategy!r}")
        if self.importance_method not in importance.LAYER_METHODS:
            raise model_mod.ConfigError(
                f"unknown importance method {self.importance_method!r}")
        if not 0 <= self.k <= self.model.n_layers:
            raise model_mod.ConfigError(
                f"k={self.k} inconsistent with n_layers={self.model.n_layers}")
        self.paths = dict(raw.get("paths", {}))
        self.base_dir = base_dir
        seg = raw.get("segmentation", {})
        self.window = int(seg.get("window", corpus_mod.DEFAULT_WINDOW))
        self.stride = int(seg.get("stride", corpus_mod.DEFAULT_STRIDE))
        self.overlap = int(seg.get("overlap", corpus_mod.DEFAULT_OVERLAP))

    def path(self, key: str, required: bool = True) -> str | None:
        value = self.paths.get(key)
        if value is None:
            if required:
                raise model_mod.ConfigError(f"config paths.{key} is required here")
            return None
        resolved = value if os.path.isabs(value) else os.path.join(self.base_dir, value)
        return resolved

    def report_dir(self) -> str:
        return (self.paths.get("report_dir")
                or os.environ.get(REPORT_DIR_ENV)
                or os.path.join(self.base_dir, "reports"))

    def load_corpus(self, key: str, segmented: bool = True):
        path = self.path(key)
        if not os.path.exists(path):
            raise model_mod.ConfigError(f"paths.{key}: no such file {path}")
        loaded = corpus_mod.load_corpus(path)
        if segmented:
            window = min(self.window, self.model.max_seq_len)
            overlap = min(self.overlap, window - 1)
            return corpus_mod.segment_corpus(loaded, window, window - overlap, overlap)
        return loaded


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    return RunConfig(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def _emit(path: str, obj) -> None:
    digest = checkpoint.write_json_atomic(obj, path)
    print(f"wrote {path} sha256={digest}")


def _save_ckpt(model, path: str) -> None:
    digest = checkpoint.save_model(model, path)
    print(f"wrote {path} sha256={digest}")


# -- commands -----------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    rows = corpus_mod.corpus_rows_for_generator(args.generator, args.docs, args.seed)
    corpus_mod.save_corpus_rows(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} documents)")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = load_run_config(args.config)
    method = args.method or cfg.importance_method
    mdl = checkpoint.load_model(args.checkpoint) if args.checkpoint \
        else model_mod.init_model(cfg.model)
    probe = cfg.load_corpus("probe_corpus")
    layer_report = importance.layer_importance(mdl, probe, method=method)
    unit_report = importance.unit_importance(
        mdl, probe, layer_set=range(mdl.n_layers),
        normalization=cfg.train.normalization_mode)
    out_dir = cfg.report_dir()
    _emit(os.path.join(out_dir, "layer_importance.json"), layer_report.to_dict())
    _emit(os.path.join(out_dir, "unit_importance.json"), unit_report.to_dict())
    for s in layer_report.per_layer:
        print(f"layer {s.layer}: {s.score:+.6f}")
    print(f"base_loss {layer_report.base_loss:.6f}")
    return EXIT_OK


def cmd_expand(args) -> int:
    cfg = load_run_config(args.config)
    mdl = checkpoint.load_model(args.checkpoint)
    k = args.k if args.k is not None else cfg.k
    if cfg.strategy == "importance_guided":
        with open(args.report, "r", encoding="utf-8") as f:
            report = importance.LayerImportanceReport.from_dict(json.load(f))
        plan = expansion.select_layers(report, k)
    else:
        plan = expansion.plan_uniform(mdl.n_layers, k, cfg.strategy)
    expanded = expansion.expand(mdl, plan)
    expansion.assert_interleaved(expanded)
    worst = expansion.verify_function_preserving(mdl, expanded, trials=args.trials)
    if worst > FPI_TOLERANCE:
        raise InvariantViolation(
            f"function preservation violated: max |logit diff| {worst:.3e}")
    out = args.out or os.path.join(os.path.dirname(args.checkpoint), "expanded.ckpt")
    _save_ckpt(expanded, out)
    plan_path = os.path.join(cfg.report_dir(), "expansion_plan.json")
    _emit(plan_path, {**plan.to_dict(), "fpi_max_logit_diff": worst})
    print(f"plan {plan.label or plan.source_layers} max|diff|={worst:.3e}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    mdl = checkpoint.load_model(args.checkpoint)
    train_cfg = cfg.train
    if args.steps is not None:
        train_cfg.total_steps = args.steps
    corpus = cfg.load_corpus("train_corpus")
    heldout_general = (cfg.load_corpus("heldout_general")
                       if cfg.paths.get("heldout_general") else None)
    heldout_target = (cfg.load_corpus("heldout_target")
                      if cfg.paths.get("heldout_target") else None)
    metrics_path = args.metrics or os.path.join(cfg.report_dir(), "metrics.jsonl")
    os.makedirs(os.path.dirname(os.path.abspath(metrics_path)), exist_ok=True)
    _, metrics = training.train_cpt(mdl, corpus, train_cfg,
                                    probe_corpus=heldout_general,
                                    heldout_target=heldout_target,
                                    metrics_path=metrics_path)
    _save_ckpt(mdl, args.out)
    print(f"wrote {metrics_path} ({len(metrics)} steps, "
          f"final loss {metrics[-1]['loss']:.6f})")
    return EXIT_OK


def _segment_for_model(loaded, mdl):
    window = min(corpus_mod.DEFAULT_WINDOW, mdl.config.max_seq_len)
    overlap = max(1, window // 4)
    return corpus_mod.segment_corpus(loaded, window, window - overlap, overlap)


def cmd_eval(args) -> int:
    mdl = checkpoint.load_model(args.checkpoint)
    if args.items:
        items = evaluation.load_items(args.items)
        acc = evaluation.accuracy(mdl, items)
        report = {"kind": "accuracy", "items": len(items), "accuracy": acc}
        print(f"accuracy {acc:.4f} over {len(items)} items")
    else:
        loaded = _segment_for_model(corpus_mod.load_corpus(args.corpus), mdl)
        loss = evaluation.heldout_loss(mdl, loaded)
        report = {"kind": "heldout_loss", "documents": len(loaded),
                  "loss_nats": loss}
        print(f"held-out loss {loss:.6f} nats over {len(loaded)} documents")
    if args.out:
        _emit(args.out, report)
    return EXIT_OK


def cmd_analyze_shift(args) -> int:
    base = checkpoint.load_model(args.base)
    tuned = checkpoint.load_model(args.tuned)
    loaded = _segment_for_model(corpus_mod.load_corpus(args.corpus), base)
    report = analysis.token_shift_analysis(base, tuned, loaded, keep_records=False)
    if args.out:
        _emit(args.out, report.to_dict())
    for cat in analysis.SHIFT_CATEGORIES:
        print(f"{cat}: {report.counts[cat]} ({100 * report.fractions[cat]:.2f}%)")
    return EXIT_OK


def cmd_merge(args) -> int:
    models = [checkpoint.load_model(p) for p in args.checkpoints]
    spec = analysis.MergeSpec(weights=tuple(args.weights))
    merged = analysis.merge_expanded(models, spec)
    _save_ckpt(merged, args.out)
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    cfg = load_run_config(args.config)
    base = checkpoint.load_model(args.checkpoint)
    train_corpus = cfg.load_corpus("train_corpus")
    heldout_general = (cfg.load_corpus("heldout_general")
                       if cfg.paths.get("heldout_general") else None)
    heldout_target = (cfg.load_corpus("heldout_target")
                      if cfg.paths.get("heldout_target") else None)
    if cfg.strategy == "importance_guided":
        probe = cfg.load_corpus("probe_corpus")
        report = importance.layer_importance(base, probe, method=cfg.importance_method)
    rows = []
    for k in args.ks:
        if cfg.strategy == "importance_guided":
            plan = expansion.select_layers(report, k)
        else:
            plan = expansion.plan_uniform(base.n_layers, k, cfg.strategy)
        mdl = expansion.expand(base, plan)
        training.train_cpt(mdl, train_corpus, cfg.train)
        row = {"k": k, "sources": list(plan.source_layers)}
        if heldout_general is not None:
            row["general_loss"] = evaluation.heldout_loss(mdl, heldout_general)
        if heldout_target is not None:
            row["target_loss"] = evaluation.heldout_loss(mdl, heldout_target)
        rows.append(row)
        print(f"k={k} sources={plan.source_layers} "
              + " ".join(f"{key}={val:.4f}" for key, val in row.items()
                         if isinstance(val, float)))
    out = args.out or os.path.join(cfg.report_dir(), "sweep_k.json")
    _emit(out, {"strategy": cfg.strategy, "rows": rows})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    cfg = model_mod.ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                                vocab_size=64, max_seq_len=32, seed=args.seed)
    mdl = model_mod.init_model(cfg)
    tokens = rng.integers(0, cfg.vocab_size, size=16)
    g = Graph()
    model_mod.lm_loss(mdl, tokens, graph=g)
    mdl.zero_grads()
    g.backward()
    worst_name, worst = "", 0.0
    for name, param in mdl.named_params():
        def f(t, _p=param):
            keep = _p.data
            _p.data = t.data
            try:
                return model_mod.lm_loss(mdl, tokens).item()
            finally:
                _p.data = keep
        fd = fd_gradient_oracle(f, param, epsilon=1e-5)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(param.grad)), 1e-5)
        err = float((np.abs(param.grad - fd) / denom).max())
        if err > worst:
            worst_name, worst = name, err
    passed = worst < 1e-4
    report = {"max_relative_error": worst, "worst_parameter": worst_name,
              "tolerance": 1e-4, "passed": passed}
    if args.out:
        _emit(args.out, report)
    print(f"grad-check: max relative error {worst:.3e} at {worst_name} "
          f"-> {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_NUMERIC


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cptlab",
        description="Continual-pretraining laboratory: selective layer expansion "
                    "and unit-wise decoupled tuning on a small transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus file")
    p.add_argument("--generator", required=True,
                   choices=("general", "target-sums", "target-products"))
    p.add_argument("--docs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("probe", help="layer and unit importance reports")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", help="probe this checkpoint (default: fresh init)")
    p.add_argument("--method", choices=importance.LAYER_METHODS)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("expand", help="duplicate selected layers with FPI")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", help="layer importance report (importance_guided)")
    p.add_argument("--k", type=int)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_expand)

    p = sub.add_parser("train", help="continual-pretraining loop")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--metrics")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="multiple-choice accuracy or held-out loss")
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--items")
    group.add_argument("--corpus")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze-shift", help="token distribution shift report")
    p.add_argument("--base", required=True)
    p.add_argument("--tuned", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_analyze_shift)

    p = sub.add_parser("merge", help="linear merge of expanded checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--weights", nargs="+", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("sweep-k", help="expansion-count sweep harness")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ks", type=lambda s: [int(x) for x in s.split(",")],
                   required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep_k)

    p = sub.add_parser("grad-check", help="autodiff vs finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NonFiniteValue as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except INVARIANT_ERRORS as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

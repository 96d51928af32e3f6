"""Trainer checks: the Eq-style multiplier map, schedule shape, hand-checked
SGD updates, reference-loop bit equivalence, freezing, and the LR budget."""

import math

import numpy as np
import pytest

from cptlab.corpus import Corpus, Document, synth_general_corpus
from cptlab.expansion import expand, plan_uniform
from cptlab.importance import UnitImportanceReport, UnitScore, unit_importance
from cptlab.model import Model, ModelConfig, UNIT_NAMES, clone_model, init_model, lm_loss
from cptlab.tensor import Graph, NonFiniteValue, Tensor
from cptlab.training import (
    LrAssignment,
    TrainConfig,
    TrainError,
    assign_unit_lrs,
    effective_lr,
    identity_assignment,
    schedule_lr,
    sgd_update,
    train_cpt,
    train_step,
)


def report_with(normalized: dict, sizes=None) -> UnitImportanceReport:
    per_unit = [UnitScore(layer=l, unit=u, raw=0.0, normalized=v,
                          size=(sizes or {}).get((l, u), 1))
                for (l, u), v in normalized.items()]
    return UnitImportanceReport(per_unit=per_unit, normalization="minmax",
                                computed_at_step=0)


def token_corpus(n, length, vocab, seed) -> Corpus:
    rng = np.random.default_rng(seed)
    return Corpus([Document(tokens=rng.integers(0, vocab, size=length),
                            loss_mask=np.ones(length, dtype=bool))
                   for _ in range(n)])


@pytest.fixture
def cfg():
    return TrainConfig(lr_base=0.1, total_steps=100, batch_size=2,
                       warmup_ratio=0.1, schedule="cosine", recompute_interval=10,
                       seed=3, mode="full")


class TestAssignment:
    def test_midpoint_and_endpoints(self):
        report = report_with({(0, "q_proj"): 0.5, (0, "k_proj"): 1.0, (0, "v_proj"): 0.0})
        assignment = assign_unit_lrs(report)
        assert assignment.per_unit[(0, "q_proj")] == 1.0
        assert assignment.per_unit[(0, "k_proj")] == 0.0
        assert assignment.per_unit[(0, "v_proj")] == 2.0

    def test_multipliers_bounded(self):
        rng = np.random.default_rng(0)
        normalized = {(0, u): float(rng.uniform()) for u in UNIT_NAMES}
        assignment = assign_unit_lrs(report_with(normalized))
        assert all(0.0 <= m <= 2.0 for m in assignment.per_unit.values())

    def test_monotone_importance_to_multiplier(self):
        rng = np.random.default_rng(1)
        vals = {(0, u): float(rng.uniform()) for u in UNIT_NAMES}
        assignment = assign_unit_lrs(report_with(vals))
        for a in vals:
            for b in vals:
                if vals[a] > vals[b]:
                    assert assignment.per_unit[a] < assignment.per_unit[b]

    def test_budget_exact_weighted_mean_is_one(self):
        # against direct summation, for random budget_exact-style reports
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 15))
            sizes = rng.integers(1, 5000, size=n)
            from cptlab.importance import normalize_importance
            normalized = normalize_importance(rng.normal(size=n), sizes,
                                              mode="budget_exact")
            report = report_with(
                {(0, f"u{i}"): float(v) for i, v in enumerate(normalized)},
                sizes={(0, f"u{i}"): int(s) for i, s in enumerate(sizes)})
            assignment = assign_unit_lrs(report)
            mean = sum(assignment.per_unit[(0, f"u{i}")] * sizes[i]
                       for i in range(n)) / sizes.sum()
            assert abs(mean - 1.0) <= 1e-9

    def test_missing_unit_listed(self):
        cfg6 = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                           vocab_size=32, max_seq_len=16, seed=0)
        model = expand(init_model(cfg6), plan_uniform(2, 1, "uniform"))
        report = report_with({(1, "q_proj"): 0.5})  # everything else missing
        with pytest.raises(TrainError, match="missing trainable units"):
            assign_unit_lrs(report, model)


class TestSchedule:
    def test_step_zero_with_warmup(self, cfg):
        assert schedule_lr(0, cfg) == 0.0

    def test_warmup_end_is_one(self, cfg):
        assert schedule_lr(10, cfg) == 1.0

    def test_cosine_midpoint(self, cfg):
        mid = (10 + cfg.total_steps) // 2
        want = 0.5 * (1 + math.cos(math.pi * (mid - 10) / 90))
        assert abs(schedule_lr(mid, cfg) - want) <= 1e-12
        assert abs(schedule_lr(55, cfg) - 0.5) <= 1e-12

    def test_constant_after_warmup(self, cfg):
        c = TrainConfig(lr_base=0.1, total_steps=100, warmup_ratio=0.1,
                        schedule="constant")
        assert schedule_lr(50, c) == 1.0 and schedule_lr(99, c) == 1.0

    def test_factorization(self, cfg):
        for step in (0, 7, 42, 99):
            for m in (0.0, 0.5, 1.7):
                assert effective_lr(step, cfg, m) == schedule_lr(step, cfg) * m * cfg.lr_base

    def test_out_of_range_step(self, cfg):
        with pytest.raises(TrainError):
            schedule_lr(100, cfg)


class TestSgdUpdate:
    def test_hand_computed_step(self):
        t = Tensor([3.0], requires_grad=True)
        t.grad[:] = 2.0
        c = TrainConfig(lr_base=0.25, total_steps=10, warmup_ratio=0.0,
                        schedule="constant")
        sgd_update([((0, "q_proj"), t)], LrAssignment({(0, "q_proj"): 1.0}), 0, c)
        assert t.data[0] == 3.0 - 0.25 * 2.0

    def test_zero_multiplier_freezes_bitwise(self):
        t = Tensor(np.random.default_rng(0).normal(size=(4, 4)), requires_grad=True)
        t.grad[:] = 1.0
        before = t.data.copy()
        c = TrainConfig(lr_base=0.5, total_steps=10, warmup_ratio=0.0,
                        schedule="constant")
        sgd_update([((0, "q_proj"), t)], LrAssignment({(0, "q_proj"): 0.0}), 3, c)
        np.testing.assert_array_equal(t.data, before)

    def test_convex_toy_descends(self):
        # logistic regression over one token: w is the only parameter
        w = Tensor(np.zeros((2, 3)), requires_grad=True)
        x = Tensor([[1.0, -0.5], [0.25, 0.75]])
        c = TrainConfig(lr_base=0.1, total_steps=10, warmup_ratio=0.0,
                        schedule="constant")

        def loss_and_grad():
            w.zero_grad()
            g = Graph()
            out = g.cross_entropy(g.matmul(x, w), np.array([0, 2]),
                                  np.array([False, True]))
            g.backward()
            return out.item()

        l0 = loss_and_grad()
        sgd_update([((0, "w"), w)], LrAssignment({(0, "w"): 1.0}), 0, c)
        l1 = loss_and_grad()
        sgd_update([((0, "w"), w)], LrAssignment({(0, "w"): 1.0}), 1, c)
        l2 = loss_and_grad()
        assert l1 < l0 and l2 < l1


class TestTrainStep:
    def test_full_mode_single_step_matches_manual(self):
        cfg2 = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16,
                           vocab_size=32, max_seq_len=16, seed=4)
        model = init_model(cfg2)
        manual = clone_model(model)
        doc = Document(tokens=np.arange(8) % 32, loss_mask=np.ones(8, dtype=bool))
        c = TrainConfig(lr_base=0.05, total_steps=5, warmup_ratio=0.0,
                        schedule="constant", mode="full")
        loss = train_step(model, [doc], identity_assignment(model), 0, c)

        g = Graph()
        ref_loss = lm_loss(manual, doc.tokens, doc.loss_mask, graph=g)
        manual.zero_grads()
        g.backward()
        for _, t in manual.named_params():
            t.data -= 0.05 * t.grad
        assert loss == ref_loss.item()
        for (_, a), (_, b) in zip(model.named_params(), manual.named_params()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_nonfinite_aborts_without_update(self):
        cfg2 = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16,
                           vocab_size=32, max_seq_len=16, seed=4)
        model = init_model(cfg2)
        model.token_embedding.data *= 1e160  # forward overflows
        before = {n: t.data.copy() for n, t in model.named_params()}
        doc = Document(tokens=np.arange(8) % 32, loss_mask=np.ones(8, dtype=bool))
        c = TrainConfig(lr_base=0.1, total_steps=5, mode="full")
        with np.errstate(all="ignore"), pytest.raises(NonFiniteValue):
            train_step(model, [doc], identity_assignment(model), 0, c)
        for n, t in model.named_params():
            np.testing.assert_array_equal(t.data, before[n])


class TestTrainCpt:
    def test_full_matches_reference_loop_bitwise(self):
        cfg2 = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                           vocab_size=259, max_seq_len=256, seed=11)
        corpus = synth_general_corpus(12, seed=5)
        c = TrainConfig(lr_base=0.05, total_steps=7, batch_size=3,
                        warmup_ratio=0.0, schedule="cosine", seed=2, mode="full")

        model, _ = train_cpt(init_model(cfg2), corpus, c)

        # reference unadorned loop, re-implemented from the documented contract
        ref = init_model(cfg2)
        order = np.random.default_rng(2).permutation(len(corpus))
        docs = [corpus[int(i)] for i in order]
        cursor = 0
        for step in range(7):
            batch = []
            for _ in range(3):
                batch.append(docs[cursor])
                cursor = (cursor + 1) % len(docs)
            ref.zero_grads()
            for d in batch:
                g = Graph()
                lm_loss(ref, d.tokens, d.loss_mask, graph=g)
                g.backward(seed=1.0 / 3)
            factor = 0.5 * (1 + math.cos(math.pi * step / 7))
            for _, t in ref.named_params():
                t.data -= 0.05 * factor * t.grad
            ref.zero_grads()

        for (_, a), (_, b) in zip(model.named_params(), ref.named_params()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_recompute_once_when_interval_exceeds_steps(self):
        cfg6 = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                           vocab_size=259, max_seq_len=256, seed=12)
        model = expand(init_model(cfg6), plan_uniform(2, 1, "uniform"))
        corpus = synth_general_corpus(6, seed=6)
        c = TrainConfig(lr_base=0.01, total_steps=5, batch_size=2,
                        recompute_interval=50, warmup_ratio=0.0, mode="adept")
        _, metrics = train_cpt(model, corpus, c)
        hashes = {m["assignment_hash"] for m in metrics}
        assert len(hashes) == 1

    def test_adept_leaves_originals_bit_identical(self):
        cfg6 = ModelConfig(n_layers=3, d_model=8, n_heads=2, d_ff=16,
                           vocab_size=259, max_seq_len=256, seed=13)
        base = init_model(cfg6)
        model = expand(base, plan_uniform(3, 1, "uniform"))
        corpus = synth_general_corpus(8, seed=7)
        c = TrainConfig(lr_base=0.05, total_steps=12, batch_size=2,
                        recompute_interval=4, warmup_ratio=0.0, mode="adept")
        train_cpt(model, corpus, c)
        for i in model.original_layer_indices():
            src = model.layers[i].source
            for u in UNIT_NAMES:
                np.testing.assert_array_equal(
                    model.layers[i].params[u].data, base.layers[src].params[u].data)
        np.testing.assert_array_equal(model.token_embedding.data,
                                      base.token_embedding.data)

    def test_assignment_refreshes_on_interval(self):
        cfg6 = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                           vocab_size=259, max_seq_len=256, seed=14)
        model = expand(init_model(cfg6), plan_uniform(2, 1, "uniform"))
        corpus = synth_general_corpus(10, seed=8)
        c = TrainConfig(lr_base=0.05, total_steps=6, batch_size=2,
                        recompute_interval=3, warmup_ratio=0.0, mode="adept")
        _, metrics = train_cpt(model, corpus, c)
        assert metrics[0]["assignment_hash"] == metrics[2]["assignment_hash"]
        assert metrics[0]["assignment_hash"] != metrics[3]["assignment_hash"]

    def test_effective_lr_bounds(self):
        # for every unit and step: 0 <= effective lr <= 2 * lr_base
        cfg6 = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                           vocab_size=259, max_seq_len=256, seed=15)
        model = expand(init_model(cfg6), plan_uniform(2, 2, "uniform"))
        corpus = synth_general_corpus(6, seed=9)
        c = TrainConfig(lr_base=0.03, total_steps=4, batch_size=2,
                        recompute_interval=2, warmup_ratio=0.25, mode="adept")
        report = unit_importance(model, corpus, model.expanded_layer_indices())
        assignment = assign_unit_lrs(report, model)
        for step in range(4):
            for key in assignment.per_unit:
                lr = effective_lr(step, c, assignment.multiplier(key))
                assert 0.0 <= lr <= 2 * c.lr_base + 1e-18

    def test_mode_pairing_enforced(self):
        cfg6 = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                           vocab_size=259, max_seq_len=256, seed=16)
        base = init_model(cfg6)
        corpus = synth_general_corpus(4, seed=10)
        with pytest.raises(TrainError, match="expanded"):
            train_cpt(base, corpus, TrainConfig(lr_base=0.01, total_steps=1, mode="adept"))
        expanded = expand(base, plan_uniform(2, 1, "uniform"))
        with pytest.raises(TrainError, match="un-expanded"):
            train_cpt(expanded, corpus, TrainConfig(lr_base=0.01, total_steps=1, mode="full"))

    def test_metrics_log_written(self, tmp_path):
        import json
        cfg6 = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                           vocab_size=259, max_seq_len=256, seed=17)
        model = init_model(cfg6)
        corpus = synth_general_corpus(4, seed=11)
        heldout = synth_general_corpus(2, seed=12)
        path = str(tmp_path / "metrics.jsonl")
        c = TrainConfig(lr_base=0.01, total_steps=3, batch_size=2, mode="full",
                        warmup_ratio=0.0, eval_interval=2)
        _, metrics = train_cpt(model, corpus, c, probe_corpus=heldout,
                               metrics_path=path)
        lines = [json.loads(l) for l in open(path)]
        assert len(lines) == 3
        assert {"step", "loss", "assignment_hash", "lr_factor"} <= set(lines[0])
        assert "general_heldout_loss" in lines[0]
        assert "general_heldout_loss" not in lines[1]
        assert "general_heldout_loss" in lines[2]  # final step always evaluated

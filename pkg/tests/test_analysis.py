"""Analysis checks: shift categorization against hand-computed ranks, merge
linearity against elementwise arithmetic, activation means against a direct
computation, KDE against a brute-force kernel sum, and the closed-form LR
allocation against random search on the budget hyperplane."""

import numpy as np
import pytest

from cptlab.analysis import (
    AnalysisError,
    MergeSpec,
    OptimalLrProblem,
    activation_capture,
    categorize_rank,
    kde_1d,
    lr_bound_value,
    merge_expanded,
    optimal_lr_closed_form,
    project_onto_budget,
    silverman_bandwidth,
    token_shift_analysis,
)
from cptlab.corpus import Corpus, Document, synth_general_corpus
from cptlab.expansion import expand, plan_uniform
from cptlab.model import (
    Model,
    ModelConfig,
    UNIT_NAMES,
    clone_model,
    forward_logits,
    init_model,
    residual_stream_after,
)


def token_corpus(n, length, vocab, seed) -> Corpus:
    rng = np.random.default_rng(seed)
    return Corpus([Document(tokens=rng.integers(0, vocab, size=length),
                            loss_mask=np.ones(length, dtype=bool))
                   for _ in range(n)])


@pytest.fixture
def model4():
    cfg = ModelConfig(n_layers=4, d_model=8, n_heads=2, d_ff=16,
                      vocab_size=64, max_seq_len=32, seed=31)
    return init_model(cfg)


class TestTokenShift:
    def test_identical_models_fully_unshifted(self, model4):
        corpus = token_corpus(3, 10, 64, seed=0)
        report = token_shift_analysis(model4, clone_model(model4), corpus)
        assert report.fractions["unshifted"] == 1.0
        assert all(r.rank_improvement_ratio == 1.0 for r in report.records)

    def test_hand_built_rank_tables(self, model4):
        # 2 target positions; base ranks the tuned-greedy token 2nd then 5th
        corpus = Corpus([Document(tokens=np.array([0, 1, 2]),
                                  loss_mask=np.ones(3, dtype=bool))])
        vocab = 64

        def tuned_fn(model, tokens):
            logits = np.zeros((len(tokens), vocab))
            logits[0, 7] = 5.0   # greedy -> token 7
            logits[1, 9] = 5.0   # greedy -> token 9
            return logits

        def base_fn(model, tokens):
            logits = np.zeros((len(tokens), vocab))
            logits[0, 3] = 9.0   # token 7 sits at rank 2... after 3
            logits[0, 7] = 8.0
            logits[1, [1, 2, 3, 4]] = 9.0  # token 9 at rank 5
            logits[1, 9] = 8.0
            return logits

        # drive the analysis through stub models via monkeypatched logits
        import cptlab.analysis as analysis_mod
        original = analysis_mod.forward_logits

        class _FakeTensor:
            def __init__(self, data):
                self.data = data

        calls = {"n": 0}

        def fake_forward(model, tokens):
            calls["n"] += 1
            fn = base_fn if calls["n"] % 2 == 1 else tuned_fn
            return _FakeTensor(fn(model, tokens))

        analysis_mod.forward_logits = fake_forward
        try:
            report = token_shift_analysis(model4, model4, corpus)
        finally:
            analysis_mod.forward_logits = original

        assert report.counts == {"unshifted": 0, "marginal": 1, "shifted": 1}
        assert report.fractions["marginal"] == 0.5
        assert report.fractions["shifted"] == 0.5
        by_pos = {r.position: r for r in report.records}
        assert by_pos[0].base_rank == 2 and by_pos[1].base_rank == 5

    def test_category_thresholds(self):
        assert categorize_rank(1) == "unshifted"
        assert categorize_rank(2) == "marginal"
        assert categorize_rank(3) == "marginal"
        assert categorize_rank(4) == "shifted"

    def test_fractions_partition(self, model4):
        tuned = clone_model(model4)
        for _, t in tuned.named_params():
            t.data += np.random.default_rng(1).normal(0, 0.05, size=t.shape)
        report = token_shift_analysis(model4, tuned, token_corpus(4, 12, 64, seed=2))
        assert abs(sum(report.fractions.values()) - 1.0) <= 1e-12
        assert sum(report.counts.values()) == report.total

    def test_non_argmax_logits_irrelevant(self, model4):
        # tweaking sub-argmax logits of the tuned model never changes the report
        corpus = token_corpus(2, 8, 64, seed=3)
        tuned = clone_model(model4)
        base_report = token_shift_analysis(model4, tuned, corpus)

        import cptlab.analysis as analysis_mod
        original = analysis_mod.forward_logits

        def warped_forward(model, tokens):
            out = original(model, tokens)
            if model is tuned:
                data = out.data.copy()
                for row in data:
                    top = row.argmax()
                    keep = row[top]
                    row[:] -= np.abs(np.sin(row)) * 0.1  # perturb everything
                    row[top] = keep                      # argmax preserved
                out.data = data
            return out

        analysis_mod.forward_logits = warped_forward
        try:
            warped_report = token_shift_analysis(model4, tuned, corpus)
        finally:
            analysis_mod.forward_logits = original
        assert warped_report.counts == base_report.counts

    def test_vocab_mismatch_rejected(self, model4):
        other = init_model(ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16,
                                       vocab_size=32, max_seq_len=32, seed=1))
        with pytest.raises(AnalysisError):
            token_shift_analysis(model4, other, token_corpus(1, 5, 32, seed=0))


class TestMerge:
    def make_pair(self, seed=40):
        cfg = ModelConfig(n_layers=4, d_model=8, n_heads=2, d_ff=16,
                          vocab_size=64, max_seq_len=32, seed=seed)
        base = init_model(cfg)
        plan = plan_uniform(4, 2, "uniform")
        a, b = expand(base, plan), expand(base, plan)
        rng = np.random.default_rng(seed + 1)
        for m in (a, b):
            for i in m.expanded_layer_indices():
                for u in UNIT_NAMES:
                    m.layers[i].params[u].data += rng.normal(
                        0, 0.01, size=m.layers[i].params[u].shape)
        return base, a, b

    def test_weight_one_zero_is_first_model(self):
        _, a, b = self.make_pair()
        merged = merge_expanded([a, b], MergeSpec(weights=(1.0, 0.0)))
        for (_, x), (_, y) in zip(merged.named_params(), a.named_params()):
            np.testing.assert_array_equal(x.data, y.data)

    def test_half_half_is_elementwise_mean(self):
        _, a, b = self.make_pair()
        merged = merge_expanded([a, b], MergeSpec(weights=(0.5, 0.5)))
        for i in merged.expanded_layer_indices():
            for u in UNIT_NAMES:
                np.testing.assert_array_equal(
                    merged.layers[i].params[u].data,
                    0.5 * a.layers[i].params[u].data + 0.5 * b.layers[i].params[u].data)

    def test_self_merge_idempotent(self):
        _, a, _ = self.make_pair()
        merged = merge_expanded([a, a], MergeSpec(weights=(0.5, 0.5)))
        for (_, x), (_, y) in zip(merged.named_params(), a.named_params()):
            np.testing.assert_array_equal(x.data, y.data)

    def test_merge_linearity(self):
        _, a, b = self.make_pair()
        alpha, beta = 0.3, 0.7
        merged = merge_expanded([a, b], MergeSpec(weights=(alpha, beta)))
        for i in merged.expanded_layer_indices():
            for u in UNIT_NAMES:
                np.testing.assert_array_equal(
                    merged.layers[i].params[u].data,
                    alpha * a.layers[i].params[u].data + beta * b.layers[i].params[u].data)

    def test_plan_mismatch_rejected(self):
        cfg = ModelConfig(n_layers=4, d_model=8, n_heads=2, d_ff=16,
                          vocab_size=64, max_seq_len=32, seed=44)
        base = init_model(cfg)
        a = expand(base, plan_uniform(4, 2, "uniform"))
        b = expand(base, plan_uniform(4, 2, "uniform_last_half"))
        with pytest.raises(AnalysisError, match="plans differ"):
            merge_expanded([a, b], MergeSpec(weights=(0.5, 0.5)))

    def test_divergent_originals_rejected(self):
        _, a, b = self.make_pair()
        b.layers[0].params["q_proj"].data[0, 0] += 1.0
        with pytest.raises(AnalysisError, match="diverges"):
            merge_expanded([a, b], MergeSpec(weights=(0.5, 0.5)))


class TestActivationCapture:
    def test_zero_model_zero_activations(self, model4):
        m = clone_model(model4)
        for _, t in m.named_params():
            t.data[:] = 0.0
        capture = activation_capture(m, token_corpus(4, 8, 64, seed=4),
                                     layer=2, n_samples=3)
        np.testing.assert_array_equal(capture.values(), 0.0)

    def test_deterministic_given_seed(self, model4):
        corpus = token_corpus(8, 8, 64, seed=5)
        a = activation_capture(model4, corpus, layer=1, n_samples=4, seed=9)
        b = activation_capture(model4, corpus, layer=1, n_samples=4, seed=9)
        assert [s.doc_index for s in a.samples] == [s.doc_index for s in b.samples]
        np.testing.assert_array_equal(a.values(), b.values())

    def test_mean_of_means_matches_direct(self, model4):
        corpus = token_corpus(3, 8, 64, seed=6)
        capture = activation_capture(model4, corpus, layer=3, n_samples=3)
        for sample in capture.samples:
            hidden = residual_stream_after(model4, corpus[sample.doc_index].tokens, 3)
            assert sample.value == float(hidden.mean())

    def test_oversampling_flags_and_uses_full(self, model4):
        corpus = token_corpus(3, 8, 64, seed=7)
        capture = activation_capture(model4, corpus, layer=0, n_samples=10)
        assert capture.used_full_corpus
        assert len(capture.samples) == 3


class TestKde:
    def test_integrates_to_one(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            samples = rng.normal(size=rng.integers(2, 200)) * rng.uniform(0.5, 4)
            curve = kde_1d(samples)
            mass = np.trapezoid(curve.density, curve.grid)
            assert abs(mass - 1.0) <= 1e-3

    def test_single_cluster_peak_at_zero(self):
        curve = kde_1d(np.zeros(10), bandwidth=1.0)
        assert abs(curve.grid[np.argmax(curve.density)]) < 0.05

    def test_matches_brute_force_gaussian_sum(self):
        rng = np.random.default_rng(9)
        samples = rng.normal(size=50)
        curve = kde_1d(samples)
        h = curve.bandwidth
        for idx in np.linspace(0, curve.grid.size - 1, 10, dtype=int):
            x = curve.grid[idx]
            want = sum(np.exp(-0.5 * ((x - s) / h) ** 2) /
                       (h * np.sqrt(2 * np.pi)) for s in samples) / samples.size
            assert abs(curve.density[idx] - want) < 1e-10

    def test_silverman_rule(self):
        rng = np.random.default_rng(10)
        samples = rng.normal(size=100)
        want = 1.06 * samples.std(ddof=1) * 100 ** (-0.2)
        assert silverman_bandwidth(samples) == pytest.approx(want)

    def test_zero_variance_suggests_bandwidth(self):
        with pytest.raises(AnalysisError, match="bandwidth"):
            kde_1d(np.ones(5))

    def test_too_few_samples(self):
        with pytest.raises(AnalysisError):
            kde_1d([1.0])


class TestOptimalLr:
    def random_problem(self, rng, n=5):
        return OptimalLrProblem(
            sizes=rng.integers(1, 1000, size=n).astype(float),
            importances=rng.uniform(0, 1, size=n),
            a=float(rng.uniform(0.1, 5)), b=float(rng.uniform(0.1, 5)),
            eta_avg=float(rng.uniform(0.01, 1)))

    def test_equal_importances_give_budget_everywhere(self):
        p = OptimalLrProblem(sizes=np.array([3.0, 5.0, 9.0]),
                             importances=np.array([0.4, 0.4, 0.4]),
                             a=1.0, b=2.0, eta_avg=0.3)
        sol = optimal_lr_closed_form(p)
        np.testing.assert_allclose(sol.eta, 0.3)

    def test_budget_satisfied(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            p = self.random_problem(rng)
            sol = optimal_lr_closed_form(p)
            got = (p.sizes * sol.eta).sum()
            want = p.sizes.sum() * p.eta_avg
            assert abs(got - want) <= 1e-12 * max(1.0, abs(want))

    def test_beats_random_search(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            p = self.random_problem(rng)
            sol = optimal_lr_closed_form(p)
            for _ in range(2000):
                trial = project_onto_budget(p, rng.normal(0, 2 * p.eta_avg, size=5))
                assert lr_bound_value(p, trial) >= sol.bound_value - 1e-9

    def test_affine_slope_matches_lr_rule(self):
        # with a/(2b) = 2 * eta_avg and importances centered at 0.5, the
        # closed form coincides with the 2 * (1 - I) * lr_base assignment
        rng = np.random.default_rng(13)
        imp = rng.uniform(0, 1, size=6)
        sizes = np.ones(6)
        imp = imp - imp.mean() + 0.5
        eta_avg = 0.123
        b = 1.7
        p = OptimalLrProblem(sizes=sizes, importances=imp,
                             a=4 * b * eta_avg, b=b, eta_avg=eta_avg)
        sol = optimal_lr_closed_form(p)
        want = 2.0 * (1.0 - imp) * eta_avg
        np.testing.assert_allclose(sol.eta, want, atol=1e-12)

    def test_validation(self):
        with pytest.raises(AnalysisError):
            OptimalLrProblem(sizes=np.array([1.0]), importances=np.array([0.5]),
                             a=1.0, b=0.0, eta_avg=0.1)
        with pytest.raises(AnalysisError):
            OptimalLrProblem(sizes=np.array([]), importances=np.array([]),
                             a=1.0, b=1.0, eta_avg=0.1)

"""Post-hoc analyses: token-distribution shift between a base and tuned
model, linear merging of domain extensions, residual-activation capture
with 1-D kernel density export, and the closed-form optimal learning-rate
allocation with its bound evaluator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, detokenize
from .model import Model, UNIT_NAMES, clone_model, forward_logits, residual_stream_after

SHIFT_CATEGORIES = ("unshifted", "marginal", "shifted")


class AnalysisError(ValueError):
    pass


# -- token distribution shift -------------------------------------------------

def categorize_rank(eta: int) -> str:
    """unshifted at rank 1, marginal up to rank 3, shifted beyond."""
    if eta == 1:
        return "unshifted"
    if eta <= 3:
        return "marginal"
    return "shifted"


def _rank_of(row: np.ndarray, token: int) -> int:
    """1-based rank of `token` in a logit row; ties broken by ascending id."""
    value = row[token]
    better = int((row > value).sum())
    equal_earlier = int((row[:token] == value).sum())
    return 1 + better + equal_earlier


@dataclass
class TokenShiftRecord:
    doc_index: int
    position: int
    aligned_token: int
    base_rank: int
    aligned_rank: int
    category: str
    rank_improvement_ratio: float


@dataclass
class TokenShiftReport:
    counts: dict[str, int]
    fractions: dict[str, float]
    total: int
    top_shifted: list[dict]
    records: list[TokenShiftRecord] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"counts": self.counts, "fractions": self.fractions,
                "total": self.total, "top_shifted": self.top_shifted}


def _token_repr(token: int) -> str:
    if token < 256:
        try:
            return detokenize([token])
        except (UnicodeDecodeError, ValueError):
            pass
    return f"<{token}>"


def token_shift_analysis(base: Model, tuned: Model, corpus: Corpus,
                         top_n: int = 20, keep_records: bool = True) -> TokenShiftReport:
    """Teacher-forced comparison over the corpus text.

    At every position the tuned model's greedy token is ranked under the
    base model's distribution at the same position; positions partition into
    unshifted (rank 1), marginal (rank 2-3), and shifted (rank > 3). Both
    the base and aligned ranks are recorded: under greedy decoding the
    aligned rank is identically 1, so the improvement ratio reduces to the
    base rank.
    """
    if base.config.vocab_size != tuned.config.vocab_size:
        raise AnalysisError("vocab size mismatch between base and tuned models")
    if len(corpus) == 0:
        raise AnalysisError("empty corpus")

    counts = {c: 0 for c in SHIFT_CATEGORIES}
    records: list[TokenShiftRecord] = []
    for di, doc in enumerate(corpus):
        base_logits = forward_logits(base, doc.tokens).data
        tuned_logits = forward_logits(tuned, doc.tokens).data
        for t in range(doc.tokens.size - 1):
            row = tuned_logits[t]
            aligned_token = int(np.argmax(row))  # ties resolve to the lowest id
            eta = _rank_of(base_logits[t], aligned_token)
            aligned_rank = _rank_of(row, aligned_token)
            category = categorize_rank(eta)
            counts[category] += 1
            records.append(TokenShiftRecord(
                doc_index=di, position=t, aligned_token=aligned_token,
                base_rank=eta, aligned_rank=aligned_rank, category=category,
                rank_improvement_ratio=eta / aligned_rank))
    total = sum(counts.values())
    fractions = {c: counts[c] / total for c in SHIFT_CATEGORIES}
    shifted = sorted((r for r in records if r.category == "shifted"),
                     key=lambda r: -r.rank_improvement_ratio)[:top_n]
    top = [{"token": r.aligned_token, "text": _token_repr(r.aligned_token),
            "ratio": r.rank_improvement_ratio} for r in shifted]
    return TokenShiftReport(counts=counts, fractions=fractions, total=total,
                            top_shifted=top,
                            records=records if keep_records else [])


# -- linear merging of domain extensions --------------------------------------

@dataclass(frozen=True)
class MergeSpec:
    weights: tuple[float, ...]

    def __post_init__(self):
        if not self.weights:
            raise AnalysisError("merge needs at least one weight")
        if not all(np.isfinite(self.weights)):
            raise AnalysisError("merge weights must be finite")


def _expansion_signature(model: Model) -> list[tuple[str, int]]:
    return [(l.origin, l.source) for l in model.layers]


def merge_expanded(models: list[Model], spec: MergeSpec) -> Model:
    """Weighted sum of the expanded-layer parameters; originals come from
    the first model and must be bit-identical across all inputs."""
    if len(models) != len(spec.weights):
        raise AnalysisError(f"{len(models)} models vs {len(spec.weights)} weights")
    first = models[0]
    if not first.is_expanded():
        raise AnalysisError("models are not expanded")
    sig = _expansion_signature(first)
    for m in models[1:]:
        if _expansion_signature(m) != sig:
            raise AnalysisError("expansion plans differ between models")
        for i in first.original_layer_indices():
            for u in UNIT_NAMES:
                if not np.array_equal(first.layers[i].params[u].data,
                                      m.layers[i].params[u].data):
                    raise AnalysisError(f"original layer {i} diverges between models")
        if not np.array_equal(first.token_embedding.data, m.token_embedding.data):
            raise AnalysisError("token embeddings diverge between models")

    out = clone_model(first)
    for i in out.expanded_layer_indices():
        for u in UNIT_NAMES:
            acc = spec.weights[0] * models[0].layers[i].params[u].data
            for w, m in zip(spec.weights[1:], models[1:]):
                acc = acc + w * m.layers[i].params[u].data
            out.layers[i].params[u].data[:] = acc
    return out


# -- activation capture and KDE -----------------------------------------------

@dataclass
class ActivationSample:
    doc_index: int
    value: float


@dataclass
class ActivationCapture:
    layer: int
    corpus_tag: str
    samples: list[ActivationSample]
    used_full_corpus: bool = False  # set when n_samples exceeded the corpus

    def values(self) -> np.ndarray:
        return np.array([s.value for s in self.samples])


def activation_capture(model: Model, corpus: Corpus, layer: int,
                       n_samples: int, seed: int = 0,
                       corpus_tag: str = "") -> ActivationCapture:
    """Scalar activation per sampled document: the mean over positions and
    hidden dimensions of the residual stream right after `layer`."""
    if len(corpus) == 0:
        raise AnalysisError("empty corpus")
    used_full = n_samples > len(corpus)
    if used_full:
        indices = np.arange(len(corpus))
    else:
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.permutation(len(corpus))[:n_samples])
    samples = []
    for i in indices:
        hidden = residual_stream_after(model, corpus[int(i)].tokens, layer)
        samples.append(ActivationSample(doc_index=int(i), value=float(hidden.mean())))
    return ActivationCapture(layer=layer, corpus_tag=corpus_tag,
                             samples=samples, used_full_corpus=used_full)


@dataclass
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def to_dict(self) -> dict:
        return {"grid": self.grid.tolist(), "density": self.density.tolist(),
                "bandwidth": self.bandwidth}


def silverman_bandwidth(samples: np.ndarray) -> float:
    n = samples.size
    return 1.06 * float(samples.std(ddof=1)) * n ** (-1 / 5)


def kde_1d(samples, bandwidth: float | None = None,
           grid_points: int = 256) -> KdeCurve:
    """Gaussian-kernel density on a uniform grid spanning [min-3h, max+3h]."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise AnalysisError("kde needs at least 2 samples")
    if bandwidth is None:
        h = silverman_bandwidth(x)
        if h == 0.0:
            raise AnalysisError(
                "samples have zero variance; pass an explicit bandwidth")
    else:
        h = float(bandwidth)
        if h <= 0:
            raise AnalysisError("bandwidth must be positive")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, grid_points)
    z = (grid[:, None] - x[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * np.sqrt(2 * np.pi))
    return KdeCurve(grid=grid, density=density, bandwidth=h)


# -- closed-form optimal LR allocation ----------------------------------------

@dataclass
class OptimalLrProblem:
    """Forgetting-bound ingredients: unit sizes w, importances I in [0, 1],
    positive bound coefficients a and b, and the per-parameter LR budget."""

    sizes: np.ndarray
    importances: np.ndarray
    a: float
    b: float
    eta_avg: float

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.float64)
        self.importances = np.asarray(self.importances, dtype=np.float64)
        if self.sizes.shape != self.importances.shape or self.sizes.size == 0:
            raise AnalysisError("sizes/importances must be equal-length and non-empty")
        if not (self.a > 0 and self.b > 0):
            raise AnalysisError("bound coefficients a, b must be positive")
        if self.sizes.sum() <= 0:
            raise AnalysisError("total size must be positive")


def lr_bound_value(problem: OptimalLrProblem, eta: np.ndarray) -> float:
    """a * sum(w_i I_i eta_i) + b * sum(w_i eta_i^2)."""
    w, imp = problem.sizes, problem.importances
    return float(problem.a * (w * imp * eta).sum() + problem.b * (w * eta * eta).sum())


@dataclass
class OptimalLrSolution:
    eta: np.ndarray
    bound_value: float


def optimal_lr_closed_form(problem: OptimalLrProblem) -> OptimalLrSolution:
    """Bound-minimizing allocation under the fixed-average-LR budget:
    an affine map of each unit's importance around the weighted mean."""
    w, imp = problem.sizes, problem.importances
    centered = imp - (w * imp).sum() / w.sum()
    eta = problem.eta_avg - (problem.a / (2.0 * problem.b)) * centered
    return OptimalLrSolution(eta=eta, bound_value=lr_bound_value(problem, eta))


def project_onto_budget(problem: OptimalLrProblem, eta: np.ndarray) -> np.ndarray:
    """Shift an allocation uniformly so it satisfies the budget constraint."""
    w = problem.sizes
    shift = (problem.eta_avg * w.sum() - (w * eta).sum()) / w.sum()
    return eta + shift

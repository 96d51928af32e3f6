"""Perplexity-based multiple-choice scoring and held-out loss evaluation.

Each option is scored by the perplexity of its tokens conditioned on the
question prefix (question tokens excluded from the average); the predicted
label is the option with the lowest perplexity, earlier options winning
ties. Zero-shot prompts by default; few-shot context can simply be
prepended to the question string.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, tokenize
from .importance import probe_loss
from .model import Model, forward_logits


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class MCItem:
    question: str
    options: tuple[tuple[str, str], ...]  # ordered (label, text)
    answer_label: str

    def __post_init__(self):
        labels = [lab for lab, _ in self.options]
        if not 2 <= len(labels) <= 26:
            raise EvalError(f"need 2..26 options, got {len(labels)}")
        if len(set(labels)) != len(labels):
            raise EvalError("duplicate option labels")
        if self.answer_label not in labels:
            raise EvalError(f"answer {self.answer_label!r} not among labels {labels}")


def _model_logits(model: Model, tokens) -> np.ndarray:
    return forward_logits(model, tokens).data


def _log_softmax_row(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def option_ppl(model: Model, question: str, option_text: str,
               logits_fn=_model_logits) -> float:
    """exp of the mean NLL of the option tokens given the question prefix."""
    vocab = model.config.vocab_size
    q = tokenize(question, vocab_size=vocab)
    o = tokenize(option_text, vocab_size=vocab)
    if q.size == 0:
        raise EvalError("question must tokenize to at least one token")
    if o.size == 0:
        raise EvalError("option text must tokenize to at least one token")
    tokens = np.concatenate([q, o])
    if tokens.size > model.config.max_seq_len:
        raise EvalError(
            f"question+option length {tokens.size} exceeds max_seq_len "
            f"{model.config.max_seq_len}")
    logits = logits_fn(model, tokens)
    nll = 0.0
    for j in range(o.size):
        pos = q.size + j
        nll -= _log_softmax_row(logits[pos - 1])[tokens[pos]]
    return float(np.exp(nll / o.size))


def mc_predict(model: Model, item: MCItem, logits_fn=_model_logits) -> str:
    """Label of the lowest-perplexity option; earlier options win ties."""
    best_label, best_ppl = None, None
    for label, text in item.options:
        ppl = option_ppl(model, item.question, text, logits_fn=logits_fn)
        if best_ppl is None or ppl < best_ppl:
            best_label, best_ppl = label, ppl
    return best_label


def accuracy(model: Model, items, logits_fn=_model_logits) -> float:
    items = list(items)
    if not items:
        raise EvalError("no items to score")
    correct = sum(1 for item in items
                  if mc_predict(model, item, logits_fn=logits_fn) == item.answer_label)
    return correct / len(items)


def heldout_loss(model: Model, corpus: Corpus) -> float:
    """Mean masked-position NLL over the corpus (nats)."""
    return probe_loss(model, corpus)


def load_items(path: str) -> list[MCItem]:
    items = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise EvalError(f"{path}:{lineno}: bad JSON ({e})") from e
            items.append(MCItem(question=row["question"],
                                options=tuple((lab, text) for lab, text in row["options"]),
                                answer_label=row["answer"]))
    return items

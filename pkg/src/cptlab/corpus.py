"""Tokenization, segmentation, and corpus construction.

Tokenization is byte-level and reversible: ids 0..255 are raw UTF-8 bytes,
with pad/bos/eos reserved above them (vocab 259). Documents carry a
per-token loss mask so answer-only gradient masking and plain pretraining
masks flow through one shape of data.

Corpus files are UTF-8 JSON lines. Each line is one of:
    {"kind": "pretrain", "text": ..., "language_tag": ...}
    {"kind": "sft", "question": ..., "analysis": ..., "answer": ..., "language_tag": ...}
    {"kind": "probe", "prompt": ..., "answer": ..., "language_tag": ...}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
BYTE_VOCAB_SIZE = 259

# desk-scale defaults keep the production 4096/3072/1024 ratios (4:3:1)
DEFAULT_WINDOW = 256
DEFAULT_STRIDE = 192
DEFAULT_OVERLAP = 64


class CorpusError(ValueError):
    pass


def tokenize(text: str, vocab_size: int | None = None) -> np.ndarray:
    """Reversible byte-level encoding of UTF-8 text."""
    ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    if vocab_size is not None and ids.size and int(ids.max()) >= vocab_size:
        bad = int(ids[ids >= vocab_size][0])
        raise CorpusError(f"token id {bad} >= vocab_size {vocab_size}")
    return ids


def detokenize(tokens) -> str:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size and (toks.min() < 0 or toks.max() > 255):
        raise CorpusError("detokenize: non-byte token id present")
    return bytes(toks.astype(np.uint8).tolist()).decode("utf-8")


@dataclass
class ProbeExample:
    """Token sequence plus the boolean mask of gradient-contributing positions."""

    tokens: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.tokens.shape != self.loss_mask.shape:
            raise CorpusError("mask length != token length")
        if not self.loss_mask.any():
            raise CorpusError("loss mask has no true entry")


@dataclass
class Document:
    tokens: np.ndarray
    loss_mask: np.ndarray
    kind: str = "pretrain"
    language_tag: str | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)


@dataclass
class Corpus:
    documents: list[Document] = field(default_factory=list)

    def __len__(self):
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def __getitem__(self, i):
        return self.documents[i]


def corpus_hash(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for doc in corpus.documents:
        h.update(doc.tokens.astype("<i8").tobytes())
        h.update(doc.loss_mask.astype(np.uint8).tobytes())
    return h.hexdigest()


@dataclass
class Segment:
    tokens: np.ndarray
    source_doc: int
    start_offset: int


def segment_sliding_window(tokens, window: int, stride: int, overlap: int,
                           source_doc: int = 0) -> list[Segment]:
    """Overlapping fixed-window segmentation of one token sequence.

    Requires stride == window - overlap with 0 < overlap < window. A
    sequence of length L <= window yields a single segment; otherwise
    ceil((L - overlap) / stride) segments, segment k starting at k*stride.
    The final segment simply ends at L.
    """
    toks = np.asarray(tokens, dtype=np.int64)
    if not 0 < overlap < window:
        raise CorpusError(f"need 0 < overlap < window, got overlap={overlap} window={window}")
    if stride != window - overlap:
        raise CorpusError(f"stride {stride} != window {window} - overlap {overlap}")
    length = toks.size
    if length == 0:
        return []
    if length <= window:
        return [Segment(tokens=toks.copy(), source_doc=source_doc, start_offset=0)]
    count = -(-(length - overlap) // stride)  # ceil division
    return [
        Segment(tokens=toks[k * stride: k * stride + window].copy(),
                source_doc=source_doc, start_offset=k * stride)
        for k in range(count)
    ]


def segment_corpus(corpus: Corpus, window: int = DEFAULT_WINDOW,
                   stride: int = DEFAULT_STRIDE, overlap: int = DEFAULT_OVERLAP) -> Corpus:
    """Segment every document; masks are sliced alongside the tokens."""
    out = []
    for i, doc in enumerate(corpus.documents):
        for seg in segment_sliding_window(doc.tokens, window, stride, overlap, source_doc=i):
            mask = doc.loss_mask[seg.start_offset: seg.start_offset + seg.tokens.size]
            out.append(Document(tokens=seg.tokens, loss_mask=mask.copy(),
                                kind=doc.kind, language_tag=doc.language_tag))
    return Corpus(documents=out)


def build_sft_example(question: str, analysis: str, answer: str) -> np.ndarray:
    """Concatenate question/analysis/answer into one pretrain-format document,
    a single newline separating the non-empty parts."""
    if not answer:
        raise CorpusError("answer must be non-empty")
    parts = [p for p in (question, analysis, answer) if p]
    return tokenize("\n".join(parts))


def build_probe_example(prompt: str, answer: str) -> ProbeExample:
    """Probe example whose loss mask selects exactly the answer tokens."""
    if not answer:
        raise CorpusError("answer must be non-empty")
    p_tokens = tokenize(prompt)
    a_tokens = tokenize(answer)
    tokens = np.concatenate([p_tokens, a_tokens])
    mask = np.zeros(tokens.size, dtype=bool)
    mask[p_tokens.size:] = True
    return ProbeExample(tokens=tokens, loss_mask=mask)


def probe_from_text(text: str) -> ProbeExample:
    """Pretrain-style probe document: every token contributes."""
    tokens = tokenize(text)
    if tokens.size == 0:
        raise CorpusError("empty probe text")
    return ProbeExample(tokens=tokens, loss_mask=np.ones(tokens.size, dtype=bool))


def order_documents(documents: list[Document]) -> list[Document]:
    """Stable ordering: pretrain-format docs first, then SFT-derived ones,
    each block grouped by language tag."""
    return sorted(documents,
                  key=lambda d: (0 if d.kind == "pretrain" else 1, d.language_tag or ""))


def load_corpus(path: str, ordered: bool = True) -> Corpus:
    docs: list[Document] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: bad JSON ({e})") from e
            kind = row.get("kind")
            tag = row.get("language_tag")
            if kind == "pretrain":
                ex = probe_from_text(row["text"])
            elif kind == "sft":
                tokens = build_sft_example(row.get("question", ""),
                                           row.get("analysis", ""), row["answer"])
                ex = ProbeExample(tokens=tokens, loss_mask=np.ones(tokens.size, dtype=bool))
            elif kind == "probe":
                ex = build_probe_example(row.get("prompt", ""), row["answer"])
            else:
                raise CorpusError(f"{path}:{lineno}: unknown kind {kind!r}")
            docs.append(Document(tokens=ex.tokens, loss_mask=ex.loss_mask,
                                 kind=kind, language_tag=tag))
    if ordered:
        docs = order_documents(docs)
    return Corpus(documents=docs)


def save_corpus_rows(rows: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


# -- synthetic two-domain generators ----------------------------------------
#
# Stand-ins for real pretraining corpora. The general domain is templated
# English-like text over a small closed vocabulary, mixed with structured
# snippets (quantities, key-value annotations, symbolic equation runs with
# uniform digit fillers) the way web text mixes prose with markup. A target
# domain is pure symbolic-equation text whose digit distribution is heavily
# skewed toward a domain-salient digit, so adapting to it means acquiring a
# token-salience shift over machinery the base model already has -- while
# full-parameter training on it erodes the word-level machinery.

_ADJECTIVES = ("red", "blue", "green", "small", "large", "quiet", "bright", "cold")
_NOUNS = ("fox", "river", "stone", "cloud", "garden", "door", "lamp", "ship")
_VERBS = ("crosses", "watches", "follows", "holds", "opens", "paints", "finds", "keeps")
_PLACES = ("near the hill", "by the shore", "in the town", "under the tree")

TARGET_FLAVORS = {
    "sums": {"op": "+", "favored_digit": 7},
    "products": {"op": "*", "favored_digit": 3},
}


def _equation_run(rng, count: int, op=None, digit=None) -> str:
    if digit is None:
        digit = lambda: int(rng.integers(0, 10))
    ops = ("+", "*")
    pick_op = (lambda: op) if op else (lambda: ops[int(rng.integers(0, 2))])
    return " ".join(f"{digit()} {pick_op()} {digit()} = {digit()} ;"
                    for _ in range(count))


def _general_sentence(rng) -> str:
    a1, a2 = rng.choice(_ADJECTIVES), rng.choice(_ADJECTIVES)
    n1, n2 = rng.choice(_NOUNS), rng.choice(_NOUNS)
    v = rng.choice(_VERBS)
    draw = rng.random()
    if draw < 0.20:
        # quantities keep digit bytes in-distribution outside equations
        return f"the {a1} {n1} {v} {rng.integers(0, 10)}{rng.integers(0, 10)} {n2}s ."
    if draw < 0.37:
        return " ".join(f"{rng.choice(_NOUNS)} = {int(rng.integers(0, 10))} ;"
                        for _ in range(int(rng.integers(2, 4))))
    if draw < 0.52:
        return _equation_run(rng, int(rng.integers(2, 4)))
    if draw < 0.76:
        return f"the {a1} {n1} {v} the {a2} {n2} ."
    return f"the {a1} {n1} {v} the {n2} {rng.choice(_PLACES)} ."


def synth_general_corpus(n_docs: int, seed: int, language_tag: str = "en") -> Corpus:
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        text = " ".join(_general_sentence(rng) for _ in range(int(rng.integers(2, 5))))
        ex = probe_from_text(text)
        docs.append(Document(tokens=ex.tokens, loss_mask=ex.loss_mask,
                             kind="pretrain", language_tag=language_tag))
    return Corpus(documents=docs)


def synth_target_corpus(n_docs: int, seed: int, flavor: str = "sums",
                        favored_p: float = 0.85) -> Corpus:
    """Pure symbolic-equation corpus with domain-salient digit statistics."""
    if flavor not in TARGET_FLAVORS:
        raise CorpusError(f"unknown target flavor {flavor!r}")
    spec = TARGET_FLAVORS[flavor]
    weights = np.full(10, (1.0 - favored_p) / 9)
    weights[spec["favored_digit"]] = favored_p
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        digit = lambda: int(rng.choice(10, p=weights))
        text = _equation_run(rng, int(rng.integers(4, 7)), op=spec["op"], digit=digit)
        ex = probe_from_text(text)
        docs.append(Document(tokens=ex.tokens, loss_mask=ex.loss_mask,
                             kind="pretrain", language_tag=flavor))
    return Corpus(documents=docs)


def corpus_rows_for_generator(name: str, n_docs: int, seed: int) -> list[dict]:
    """JSONL rows for a named synthetic generator (used by the CLI)."""
    if name == "general":
        corpus = synth_general_corpus(n_docs, seed)
    elif name == "target-sums":
        corpus = synth_target_corpus(n_docs, seed, flavor="sums")
    elif name == "target-products":
        corpus = synth_target_corpus(n_docs, seed, flavor="products")
    else:
        raise CorpusError(f"unknown generator {name!r}")
    return [{"kind": d.kind, "text": detokenize(d.tokens), "language_tag": d.language_tag}
            for d in corpus.documents]

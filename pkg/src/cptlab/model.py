"""Decoder-only transformer with named per-layer parameter units.

Pre-norm residual blocks, RMS normalization, SwiGLU feed-forward, rotary
positions computed on the fly, and tied embeddings by default. Every
trainable per-layer parameter belongs to exactly one of the nine named
units, so importance probing and learning-rate assignment can address
parameters as (layer, unit) pairs.

A layer can be masked: its whole residual contribution (attention and
feed-forward branches) is skipped and the stream passes through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Graph, Tensor

UNIT_NAMES = (
    "q_proj", "k_proj", "v_proj", "o_proj",
    "gate_proj", "up_proj", "down_proj",
    "input_layernorm", "post_attention_layernorm",
)

RMS_EPS = 1e-6
INIT_STD = 0.02
ROPE_BASE = 10000.0


class ConfigError(ValueError):
    """Model configuration violates a constraint."""


class ModelStateError(RuntimeError):
    """Operation applied to a model in the wrong state."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    seed: int = 0
    tie_embeddings: bool = True

    def validate(self) -> None:
        checks = [
            (self.n_layers >= 1, "n_layers must be >= 1"),
            (self.d_model >= 1, "d_model must be >= 1"),
            (self.n_heads >= 1, "n_heads must be >= 1"),
            (self.d_ff >= 1, "d_ff must be >= 1"),
            (self.vocab_size >= 2, "vocab_size must be >= 2"),
            (self.max_seq_len >= 2, "max_seq_len must be >= 2"),
            (self.seed >= 0, "seed must be a non-negative integer"),
        ]
        failed = [msg for ok, msg in checks if not ok]
        if self.d_model % self.n_heads != 0:
            failed.append(
                f"d_model not divisible by n_heads ({self.d_model} % {self.n_heads} != 0)")
        elif (self.d_model // self.n_heads) % 2 != 0:
            failed.append("head dimension must be even for rotary positions")
        if failed:
            raise ConfigError("; ".join(failed))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_ff": self.d_ff,
            "vocab_size": self.vocab_size, "max_seq_len": self.max_seq_len,
            "seed": self.seed, "tie_embeddings": self.tie_embeddings,
        }


@dataclass
class LayerState:
    """Parameters of one transformer layer plus its bookkeeping flags.

    `origin` is "original" or "expanded"; `source` is the layer index in the
    pre-expansion model this layer derives from (its own index for originals).
    """

    params: dict[str, Tensor]
    origin: str = "original"
    source: int = 0
    frozen: bool = False
    masked: bool = False

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def set_frozen(self, flag: bool) -> None:
        self.frozen = bool(flag)
        for t in self.params.values():
            t.set_requires_grad(not flag)


@dataclass
class Model:
    config: ModelConfig
    token_embedding: Tensor
    layers: list[LayerState]
    final_norm: Tensor
    lm_head: Tensor | None = None  # None when tied to token_embedding

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def is_expanded(self) -> bool:
        return any(l.origin == "expanded" for l in self.layers)

    def original_layer_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.origin == "original"]

    def expanded_layer_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.origin == "expanded"]

    def non_layer_params(self) -> list[tuple[str, Tensor]]:
        out = [("token_embedding", self.token_embedding), ("final_norm", self.final_norm)]
        if self.lm_head is not None:
            out.append(("lm_head", self.lm_head))
        return out

    def named_params(self):
        """Yield (name, tensor) over every parameter, layers in list order."""
        for name, t in self.non_layer_params():
            yield name, t
        for i, layer in enumerate(self.layers):
            for unit in UNIT_NAMES:
                yield f"layers.{i}.{unit}", layer.params[unit]

    def trainable_params(self):
        """Yield ((layer, unit) or (None, name), tensor) for requires_grad params."""
        for name, t in self.non_layer_params():
            if t.requires_grad:
                yield (None, name), t
        for i, layer in enumerate(self.layers):
            for unit in UNIT_NAMES:
                t = layer.params[unit]
                if t.requires_grad:
                    yield (i, unit), t

    def zero_grads(self) -> None:
        for _, t in self.named_params():
            t.zero_grad()

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_params())


def _unit_shape(unit: str, config: ModelConfig) -> tuple[int, ...]:
    d, f = config.d_model, config.d_ff
    return {
        "q_proj": (d, d), "k_proj": (d, d), "v_proj": (d, d), "o_proj": (d, d),
        "gate_proj": (d, f), "up_proj": (d, f), "down_proj": (f, d),
        "input_layernorm": (d,), "post_attention_layernorm": (d,),
    }[unit]


def init_model(config: ModelConfig) -> Model:
    """Deterministically initialize a model from config.seed.

    Projections and embeddings draw from N(0, 0.02); normalization weights
    start at 1. Two inits with the same seed are bit-identical.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)

    def gauss(shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    embedding = gauss((config.vocab_size, config.d_model))
    layers = []
    for i in range(config.n_layers):
        params = {}
        for unit in UNIT_NAMES:
            shape = _unit_shape(unit, config)
            if unit.endswith("layernorm"):
                params[unit] = Tensor(np.ones(shape), requires_grad=True)
            else:
                params[unit] = gauss(shape)
        layers.append(LayerState(params=params, origin="original", source=i))
    final_norm = Tensor(np.ones(config.d_model), requires_grad=True)
    lm_head = None if config.tie_embeddings else gauss((config.d_model, config.vocab_size))
    return Model(config=config, token_embedding=embedding, layers=layers,
                 final_norm=final_norm, lm_head=lm_head)


_ROPE_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _rope_tables(seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    key = (seq_len, head_dim)
    if key not in _ROPE_CACHE:
        half = head_dim // 2
        freqs = ROPE_BASE ** (-np.arange(half) * 2.0 / head_dim)
        angles = np.arange(seq_len)[:, None] * freqs[None, :]
        angles = np.concatenate((angles, angles), axis=-1)  # value repeated per half
        _ROPE_CACHE[key] = (np.cos(angles), np.sin(angles))
    return _ROPE_CACHE[key]


def _validate_tokens(model: Model, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise ConfigError(f"tokens must be a non-empty 1-D sequence, got shape {toks.shape}")
    if toks.size > model.config.max_seq_len:
        raise ConfigError(
            f"sequence length {toks.size} exceeds max_seq_len {model.config.max_seq_len}")
    bad = np.nonzero((toks < 0) | (toks >= model.config.vocab_size))[0]
    if bad.size:
        p = int(bad[0])
        raise ConfigError(f"token {int(toks[p])} at position {p} out of vocab range")
    return toks


def _residual_stream(model: Model, toks: np.ndarray, g: Graph,
                     upto_layer: int | None = None) -> Tensor:
    """Residual stream after the first `upto_layer + 1` layers (all if None)."""
    cfg = model.config
    t = toks.size
    h, hd = cfg.n_heads, cfg.head_dim
    cos, sin = _rope_tables(t, hd)

    x = g.embedding(model.token_embedding, toks)
    stop = model.n_layers if upto_layer is None else upto_layer + 1
    for layer in model.layers[:stop]:
        if layer.masked:
            continue
        p = layer.params
        # attention branch
        xn = g.rms_norm(x, p["input_layernorm"], eps=RMS_EPS)
        q = g.transpose(g.reshape(g.matmul(xn, p["q_proj"]), (t, h, hd)), (1, 0, 2))
        k = g.transpose(g.reshape(g.matmul(xn, p["k_proj"]), (t, h, hd)), (1, 0, 2))
        v = g.transpose(g.reshape(g.matmul(xn, p["v_proj"]), (t, h, hd)), (1, 0, 2))
        q = g.rope(q, cos, sin)
        k = g.rope(k, cos, sin)
        scores = g.scale(g.matmul(q, g.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
        attn = g.softmax(g.causal_mask(scores))
        ctx = g.reshape(g.transpose(g.matmul(attn, v), (1, 0, 2)), (t, cfg.d_model))
        x = g.add(x, g.matmul(ctx, p["o_proj"]))
        # feed-forward branch (SwiGLU)
        xn = g.rms_norm(x, p["post_attention_layernorm"], eps=RMS_EPS)
        gate = g.silu(g.matmul(xn, p["gate_proj"]))
        up = g.matmul(xn, p["up_proj"])
        x = g.add(x, g.matmul(g.mul(gate, up), p["down_proj"]))
    return x


def forward_logits(model: Model, tokens, graph: Graph | None = None) -> Tensor:
    """Run the stack on one token sequence and return logits [seq, vocab].

    Masked layers contribute identity: the residual stream passes through
    them untouched. Pass a Graph to retain the tape for backward.
    """
    g = graph if graph is not None else Graph()
    toks = _validate_tokens(model, tokens)
    x = _residual_stream(model, toks, g)
    x = g.rms_norm(x, model.final_norm, eps=RMS_EPS)
    if model.lm_head is not None:
        return g.matmul(x, model.lm_head)
    return g.matmul(x, g.transpose(model.token_embedding, (1, 0)))


def residual_stream_after(model: Model, tokens, layer: int) -> np.ndarray:
    """Hidden states [seq, d_model] right after the given layer's residual add."""
    if not 0 <= layer < model.n_layers:
        raise ConfigError(f"layer index {layer} out of range [0, {model.n_layers})")
    toks = _validate_tokens(model, tokens)
    return _residual_stream(model, toks, Graph(), upto_layer=layer).data


def lm_loss(model: Model, tokens, loss_mask=None, graph: Graph | None = None) -> Tensor:
    """Mean negative log-likelihood over masked target positions.

    `loss_mask[t]` marks whether predicting token t contributes to the loss;
    position 0 has no prefix and never contributes. With no mask, every
    target position counts (plain autoregressive objective).
    """
    g = graph if graph is not None else Graph()
    toks = np.asarray(tokens, dtype=np.int64)
    if loss_mask is None:
        loss_mask = np.ones(toks.shape, dtype=bool)
    mask = np.asarray(loss_mask, dtype=bool)
    if mask.shape != toks.shape:
        raise ConfigError(f"loss_mask length {mask.shape} != token length {toks.shape}")
    if not mask[1:].any():
        raise ConfigError("loss_mask selects no target position (position 0 never counts)")
    logits = forward_logits(model, toks, graph=g)
    return g.cross_entropy(logits, toks, mask)


@dataclass(frozen=True)
class UnitView:
    """Stable handle on the parameters of one (layer, unit) pair."""

    layer: int
    unit: str
    tensor: Tensor = field(repr=False)

    @property
    def size(self) -> int:
        return self.tensor.size


def unit_view(model: Model, layer: int, unit: str) -> UnitView:
    """Handle on exactly the parameters of (layer, unit); pairs are disjoint
    and jointly cover all per-layer parameters. Masking does not affect it."""
    if not 0 <= layer < model.n_layers:
        raise ConfigError(f"layer index {layer} out of range [0, {model.n_layers})")
    if unit not in UNIT_NAMES:
        raise ConfigError(f"unknown unit {unit!r}")
    return UnitView(layer=layer, unit=unit, tensor=model.layers[layer].params[unit])


def clone_model(model: Model) -> Model:
    """Deep copy: fresh parameter buffers, same flags; grads not copied."""
    def copy_tensor(t: Tensor) -> Tensor:
        c = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)
        return c

    layers = []
    for layer in model.layers:
        layers.append(LayerState(
            params={u: copy_tensor(layer.params[u]) for u in UNIT_NAMES},
            origin=layer.origin, source=layer.source,
            frozen=layer.frozen, masked=layer.masked))
    return Model(
        config=model.config,
        token_embedding=copy_tensor(model.token_embedding),
        layers=layers,
        final_norm=copy_tensor(model.final_norm),
        lm_head=None if model.lm_head is None else copy_tensor(model.lm_head))

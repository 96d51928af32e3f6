"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: a `Tensor` is a flat container around a
float64 ndarray, and a `Graph` records every primitive executed through it.
Calling `Graph.backward()` replays the tape in exact reverse order and
accumulates adjoints additively into every `requires_grad` leaf.

All arithmetic is 64-bit. Every primitive validates its operand shapes and
checks its output for NaN/Inf, so a non-finite value surfaces as a structured
error naming the offending node instead of propagating silently.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

MASK_FILL = -1e30  # finite stand-in for -inf in causal masking


class TensorError(Exception):
    """Base class for engine errors."""


class ShapeMismatch(TensorError):
    """Operand shapes incompatible for the named node."""


class NonFiniteValue(TensorError):
    """A NaN or Inf appeared in the named node's output."""


class GraphStateError(TensorError):
    """Graph used out of order (e.g. backward before any forward)."""


class Tensor:
    """N-dimensional float64 array, optionally carrying a gradient buffer.

    `grad` exists iff `requires_grad` is set, and always matches `data`'s
    shape. Tensors produced by a `Graph` keep a reference to their producing
    node so backward can route adjoints; leaf tensors have `node is None`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"tensor {name or '<unnamed>'}: non-finite input data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self.node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def set_requires_grad(self, flag: bool) -> None:
        """Toggle gradient tracking, allocating or dropping the grad buffer."""
        flag = bool(flag)
        if flag and not self.requires_grad:
            self.grad = np.zeros_like(self.data)
        elif not flag and self.requires_grad:
            self.grad = None
        self.requires_grad = flag

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "index", "inputs", "output", "backward_fn")

    def __init__(self, op, index, inputs, output, backward_fn):
        self.op = op
        self.index = index
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


def _needs_adjoint(t: Tensor) -> bool:
    return t.node is not None or t.requires_grad


class Graph:
    """Tape of primitive operations recorded during one forward evaluation.

    Nodes are appended in execution order, which is by construction a valid
    topological order; `backward` traverses the exact reverse order. A graph
    never mutates the tensors fed into it, so several graphs may evaluate
    concurrently over one read-only parameter set.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    # -- plumbing ----------------------------------------------------------

    def _record(self, op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
                backward_fn) -> Tensor:
        index = len(self.nodes)
        if not np.all(np.isfinite(out_data)):
            raise NonFiniteValue(f"node {index} ({op}): non-finite output")
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.requires_grad = False
        out.grad = None
        out.name = None
        node = _Node(op, index, inputs, out, backward_fn)
        out.node = node
        self.nodes.append(node)
        return out

    def _shape_error(self, op: str, detail: str) -> ShapeMismatch:
        return ShapeMismatch(f"node {len(self.nodes)} ({op}): {detail}")

    # -- primitives ---------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise add; `b` may also be a trailing-dimension bias."""
        bias = a.shape != b.shape
        if bias and b.shape != a.shape[-1:]:
            raise self._shape_error("add", f"{a.shape} + {b.shape}")
        out = a.data + b.data

        def backward(g, acc):
            acc(a, g)
            if bias:
                acc(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
            else:
                acc(b, g)

        return self._record("add", (a, b), out, backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise self._shape_error("multiply", f"{a.shape} * {b.shape}")
        out = a.data * b.data

        def backward(g, acc):
            acc(a, g * b.data)
            acc(b, g * a.data)

        return self._record("multiply", (a, b), out, backward)

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """2-D x 2-D, or batched 3-D x 3-D with equal leading dimension."""
        ok = (
            (a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0])
            or (a.data.ndim == 3 and b.data.ndim == 3
                and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
        )
        if not ok:
            raise self._shape_error("matmul", f"{a.shape} @ {b.shape}")
        out = a.data @ b.data

        def backward(g, acc):
            if _needs_adjoint(a):
                acc(a, g @ b.data.swapaxes(-1, -2))
            if _needs_adjoint(b):
                acc(b, a.data.swapaxes(-1, -2) @ g)

        return self._record("matmul", (a, b), out, backward)

    def transpose(self, a: Tensor, axes: Sequence[int]) -> Tensor:
        axes = tuple(axes)
        if sorted(axes) != list(range(a.data.ndim)):
            raise self._shape_error("transpose", f"axes {axes} invalid for {a.shape}")
        inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
        out = np.ascontiguousarray(np.transpose(a.data, axes))

        def backward(g, acc):
            acc(a, np.transpose(g, inverse))

        return self._record("transpose", (a,), out, backward)

    def reshape(self, a: Tensor, shape: Sequence[int]) -> Tensor:
        shape = tuple(shape)
        if int(np.prod(shape)) != a.size:
            raise self._shape_error("reshape", f"{a.shape} -> {shape}")
        out = a.data.reshape(shape)
        old = a.shape

        def backward(g, acc):
            acc(a, g.reshape(old))

        return self._record("reshape", (a,), out, backward)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        factor = float(factor)
        out = a.data * factor

        def backward(g, acc):
            acc(a, g * factor)

        return self._record("scalar-scale", (a,), out, backward)

    def softmax(self, a: Tensor) -> Tensor:
        """Row softmax over the last axis, stabilized by max subtraction."""
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

        def backward(g, acc):
            inner = (g * out).sum(axis=-1, keepdims=True)
            acc(a, out * (g - inner))

        return self._record("softmax", (a,), out, backward)

    def rms_norm(self, a: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
        """y = a / rms(a) * weight, rms over the last axis."""
        if weight.shape != a.shape[-1:]:
            raise self._shape_error("rms-normalize", f"{a.shape} with weight {weight.shape}")
        n = a.shape[-1]
        ms = np.mean(a.data * a.data, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(ms + eps)
        normed = a.data * inv
        out = normed * weight.data

        def backward(g, acc):
            gw = g * weight.data
            if _needs_adjoint(a):
                inner = (gw * a.data).sum(axis=-1, keepdims=True)
                acc(a, gw * inv - a.data * (inv ** 3) * inner / n)
            if _needs_adjoint(weight):
                acc(weight, (g * normed).reshape(-1, n).sum(axis=0))

        return self._record("rms-normalize", (a, weight), out, backward)

    def embedding(self, table: Tensor, ids: np.ndarray) -> Tensor:
        """Row lookup: out[t] = table[ids[t]]."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or table.data.ndim != 2:
            raise self._shape_error("embedding-lookup", f"ids {ids.shape}, table {table.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise self._shape_error("embedding-lookup", "id out of table range")
        out = table.data[ids]

        def backward(g, acc):
            if _needs_adjoint(table):
                dt = np.zeros_like(table.data)
                np.add.at(dt, ids, g)
                acc(table, dt)

        return self._record("embedding-lookup", (table,), out, backward)

    def causal_mask(self, a: Tensor) -> Tensor:
        """Fill entries above the diagonal of the trailing (T, T) block."""
        if a.data.ndim < 2 or a.shape[-1] != a.shape[-2]:
            raise self._shape_error("causal-mask", f"needs trailing square block, got {a.shape}")
        t = a.shape[-1]
        allowed = np.tril(np.ones((t, t), dtype=bool))
        out = np.where(allowed, a.data, MASK_FILL)

        def backward(g, acc):
            acc(a, np.where(allowed, g, 0.0))

        return self._record("causal-mask", (a,), out, backward)

    def cross_entropy(self, logits: Tensor, tokens: np.ndarray,
                      target_mask: np.ndarray) -> Tensor:
        """Mean NLL of tokens[t] under logits[t-1], over masked target positions.

        `target_mask[t]` marks whether predicting token t contributes;
        position 0 has no prefix and never contributes. Fused with
        log-softmax so a confident correct prediction yields exactly 0.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        target_mask = np.asarray(target_mask, dtype=bool)
        if logits.data.ndim != 2 or logits.shape[0] != tokens.shape[0]:
            raise self._shape_error(
                "cross-entropy-from-logits",
                f"logits {logits.shape} vs {tokens.shape[0]} tokens")
        if target_mask.shape != tokens.shape:
            raise self._shape_error("cross-entropy-from-logits", "mask length != token length")
        rows = np.nonzero(target_mask[1:])[0]  # predicting token rows+1 from row `rows`
        if rows.size == 0:
            raise self._shape_error("cross-entropy-from-logits",
                                    "no contributing target position in mask")
        targets = tokens[rows + 1]
        if targets.min() < 0 or targets.max() >= logits.shape[1]:
            raise self._shape_error("cross-entropy-from-logits", "target token out of vocab")
        z = logits.data[rows]
        zmax = z.max(axis=-1, keepdims=True)
        shifted = z - zmax
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - lse
        nll = -logp[np.arange(rows.size), targets]
        out = np.array(nll.mean())

        def backward(g, acc):
            if _needs_adjoint(logits):
                probs = np.exp(logp)
                probs[np.arange(rows.size), targets] -= 1.0
                dl = np.zeros_like(logits.data)
                dl[rows] = probs * (float(g) / rows.size)
                acc(logits, dl)

        return self._record("cross-entropy-from-logits", (logits,), out, backward)

    def silu(self, a: Tensor) -> Tensor:
        """x * sigmoid(x), computed with overflow-safe sigmoid."""
        x = a.data
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        sig[~pos] = ex / (1.0 + ex)
        out = x * sig

        def backward(g, acc):
            acc(a, g * sig * (1.0 + x * (1.0 - sig)))

        return self._record("silu", (a,), out, backward)

    def rope(self, a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
        """Rotary position mix over the last axis: y = a*cos + rot_half(a)*sin.

        `a` is (heads, T, head_dim); cos/sin are (T, head_dim) constants with
        the per-frequency values repeated across the two halves.
        """
        if a.data.ndim != 3 or a.shape[-1] % 2 or cos.shape != a.shape[1:]:
            raise self._shape_error("rope", f"{a.shape} with tables {cos.shape}")

        def rot_half(x):
            h = x.shape[-1] // 2
            return np.concatenate((-x[..., h:], x[..., :h]), axis=-1)

        out = a.data * cos + rot_half(a.data) * sin

        def backward(g, acc):
            acc(a, g * cos - rot_half(g * sin))

        return self._record("rope", (a,), out, backward)

    def sum(self, a: Tensor) -> Tensor:
        out = np.array(a.data.sum())
        shape = a.shape

        def backward(g, acc):
            acc(a, np.full(shape, float(g)))

        return self._record("sum", (a,), out, backward)

    def mean(self, a: Tensor) -> Tensor:
        n = a.size
        out = np.array(a.data.mean())
        shape = a.shape

        def backward(g, acc):
            acc(a, np.full(shape, float(g) / n))

        return self._record("mean", (a,), out, backward)

    # -- reverse pass --------------------------------------------------------

    def backward(self, seed: float = 1.0, loss: Tensor | None = None) -> None:
        """Propagate adjoints from the scalar loss back to every grad leaf.

        The loss defaults to the output of the last recorded node. Gradient
        accumulation is additive; callers zero leaf grads explicitly.
        """
        if not self.nodes:
            raise GraphStateError("backward before any forward evaluation")
        if loss is None:
            loss = self.nodes[-1].output
        if loss.node is None or loss.node not in self.nodes:
            raise GraphStateError("loss tensor was not produced by this graph")
        if loss.data.size != 1:
            raise GraphStateError(f"loss must be scalar, got shape {loss.shape}")

        adjoints: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, float(seed))}

        def acc(t: Tensor, value: np.ndarray) -> None:
            if t.node is not None:
                key = id(t)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + value
                else:
                    adjoints[key] = value
            elif t.requires_grad:
                t.grad += value

        for node in reversed(self.nodes):
            g = adjoints.pop(id(node.output), None)
            if g is None:
                continue
            node.backward_fn(g, acc)


def fd_gradient_oracle(f: Callable[[Tensor], float], x: Tensor,
                       epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a deterministic scalar function of x.

    Returns (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps) per coordinate,
    evaluated on a private copy of x. Used as the independent oracle that
    every backward rule is checked against.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")

    def evaluate(arr: np.ndarray) -> float:
        val = f(Tensor(arr))
        return val.item() if isinstance(val, Tensor) else float(val)

    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + epsilon
        hi = evaluate(base)
        flat[i] = keep - epsilon
        lo = evaluate(base)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * epsilon)
    return grad

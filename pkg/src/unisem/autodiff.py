"""Dense float64 tensors with a dynamic reverse-mode tape.

Only the handful of operations the LSTM parser needs are provided. A
:class:`Graph` records every operation applied through it; calling
:meth:`Graph.backward` walks the tape in reverse and accumulates
gradients into every tensor that requires them. Parameter gradients
accumulate across calls until :meth:`ParamStore.zero_grad`.

A ``Graph(record=False)`` runs the same operations without building a
tape, which is what beam search and evaluation use.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

# Logit offset that removes non-emittable tokens from a softmax. exp() of it
# underflows to exactly 0, while 0 * offset stays finite.
NEG_INF = -1e30


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def values(self) -> list[float]:
        """Row-major flattened values."""
        return self.value.ravel().tolist()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _check_same(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


class Graph:
    """Operation tape. Build a fresh one per example or batch."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []

    def _emit(self, kind, inputs, value, backward) -> Tensor:
        needs = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(value, requires_grad=needs)
        if needs:
            self.nodes.append(Node(kind, tuple(inputs), out, backward))
        return out

    # -- linear algebra -------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        av, bv = a.value, b.value
        return self._emit("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))

    # -- elementwise ----------------------------------------------------

    def add(self, a: Tensor, b: Tensor | np.ndarray) -> Tensor:
        """Sum of equal shapes; a 1-D ``b`` is added to every row of ``a``.

        A plain ndarray ``b`` is treated as a constant.
        """
        if isinstance(b, np.ndarray):
            return self._emit("add_const", (a,), a.value + b, lambda g: (g,))
        if b.value.ndim == 1 and a.value.ndim == 2:
            if b.shape[0] != a.shape[1]:
                raise DimensionError(f"add: bias {b.shape} does not fit rows of {a.shape}")
            return self._emit("add_bias", (a, b), a.value + b.value, lambda g: (g, g.sum(axis=0)))
        _check_same("add", a, b)
        return self._emit("add", (a, b), a.value + b.value, lambda g: (g, g))

    def mul(self, a: Tensor, b: Tensor | np.ndarray) -> Tensor:
        if isinstance(b, np.ndarray):
            return self._emit("mul_const", (a,), a.value * b, lambda g: (g * b,))
        _check_same("mul", a, b)
        av, bv = a.value, b.value
        return self._emit("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.value)
        return self._emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))

    def sigmoid(self, a: Tensor) -> Tensor:
        y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
        return self._emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))

    def elementwise(self, kind: str, *args: Tensor) -> Tensor:
        ops = {"add": self.add, "mul": self.mul, "tanh": self.tanh, "sigmoid": self.sigmoid}
        if kind not in ops:
            raise ContractError(f"unknown elementwise kind {kind!r}")
        return ops[kind](*args)

    def blend(self, mask: np.ndarray, new: Tensor, old: Tensor) -> Tensor:
        """Rows where ``mask`` is 1 take ``new``; the rest keep ``old``."""
        _check_same("blend", new, old)
        m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
        value = m * new.value + (1.0 - m) * old.value
        return self._emit("blend", (new, old), value, lambda g: (g * m, g * (1.0 - m)))

    # -- reshaping ------------------------------------------------------

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        """Concatenate 2-D tensors along columns."""
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise DimensionError(f"concat: row counts differ {[p.shape for p in parts]}")
        widths = [p.shape[1] for p in parts]
        bounds = np.cumsum([0] + widths)

        def backward(g):
            return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

        return self._emit("concat", tuple(parts), np.concatenate([p.value for p in parts], axis=1), backward)

    def columns(self, a: Tensor, start: int, stop: int) -> Tensor:
        ncols = a.shape[1]

        def backward(g):
            full = np.zeros((a.shape[0], ncols))
            full[:, start:stop] = g
            return (full,)

        return self._emit("columns", (a,), a.value[:, start:stop], backward)

    def rows(self, a: Tensor, index: np.ndarray) -> Tensor:
        """Gather rows of ``a`` (an embedding lookup when ``a`` is a table)."""
        index = np.asarray(index, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
            raise DimensionError(f"rows: index out of range for {a.shape}")

        def backward(g):
            full = np.zeros_like(a.value)
            np.add.at(full, index, g)
            return (full,)

        return self._emit("rows", (a,), a.value[index], backward)

    def stack(self, parts: Sequence[Tensor]) -> Tensor:
        """Stack T tensors of shape (B, H) into (B, T, H)."""
        shapes = {p.shape for p in parts}
        if len(shapes) != 1:
            raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
        n = len(parts)
        return self._emit(
            "stack", tuple(parts), np.stack([p.value for p in parts], axis=1),
            lambda g: [g[:, i, :] for i in range(n)],
        )

    # -- attention ------------------------------------------------------

    def bdot(self, states: Tensor, query: Tensor) -> Tensor:
        """Scores (B, T) = per-row dot products of (B, T, H) states with a (B, H) query."""
        sv, qv = states.value, query.value
        if sv.ndim != 3 or qv.shape != (sv.shape[0], sv.shape[2]):
            raise DimensionError(f"bdot: states {sv.shape} vs query {qv.shape}")
        value = np.einsum("bth,bh->bt", sv, qv)
        return self._emit(
            "bdot", (states, query), value,
            lambda g: (g[:, :, None] * qv[:, None, :], np.einsum("bt,bth->bh", g, sv)),
        )

    def bweight(self, weights: Tensor, states: Tensor) -> Tensor:
        """Context (B, H) = weights (B, T) applied to states (B, T, H)."""
        wv, sv = weights.value, states.value
        if sv.ndim != 3 or wv.shape != sv.shape[:2]:
            raise DimensionError(f"bweight: weights {wv.shape} vs states {sv.shape}")
        value = np.einsum("bt,bth->bh", wv, sv)
        return self._emit(
            "bweight", (weights, states), value,
            lambda g: (np.einsum("bh,bth->bt", g, sv), wv[:, :, None] * g[:, None, :]),
        )

    def softmax(self, a: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Row softmax; positions where ``mask`` is 0 get probability 0."""
        x = a.value
        if mask is not None:
            x = np.where(mask > 0, x, NEG_INF)
        y = softmax_rows(x)

        def backward(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._emit("softmax", (a,), y, backward)

    # -- reductions and losses --------------------------------------------

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self._emit("sum", (a,), np.array(a.value.sum()), lambda g: (np.full(shape, float(g)),))

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._emit("scale", (a,), a.value * c, lambda g: (g * c,))

    def softmax_xent(self, logits: Tensor, target, weights=None) -> Tensor:
        """Weighted cross-entropy ``-sum_r w_r sum_v t_rv log softmax(l_r)_v``.

        ``logits`` is (V,) or (B, V); ``target`` holds one distribution per
        row. Rows with weight 0 are ignored, including for the
        normalisation check.
        """
        lv = logits.value
        single = lv.ndim == 1
        l2 = lv.reshape(1, -1) if single else lv
        t = np.asarray(target, dtype=np.float64).reshape(l2.shape)
        w = np.ones(l2.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != l2.shape[0]:
            raise DimensionError(f"softmax_xent: {w.shape[0]} weights for {l2.shape[0]} rows")
        live = w != 0
        if np.any(t[live] < 0) or np.any(np.abs(t[live].sum(axis=1) - 1.0) > 1e-9):
            raise ContractError("softmax_xent: target rows must be non-negative and sum to 1")
        logp = log_softmax_rows(l2)
        # 0 * log(0-probability) terms are dropped explicitly.
        per_row = -np.where(t > 0, t * logp, 0.0).sum(axis=1)
        value = np.array(float(np.dot(w, per_row)))

        def backward(g):
            grad = float(g) * w[:, None] * (np.exp(logp) - t)
            return (grad.reshape(lv.shape),)

        return self._emit("softmax_xent", (logits,), value, backward)

    # -- reverse pass ---------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into every reachable tensor's ``grad``.

        Calling twice without zeroing parameter grads adds the two results.
        """
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        # Intermediate grads belong to this pass only.
        for node in self.nodes:
            node.output.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is not None and inp.requires_grad:
                    _accumulate(inp, gi)


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class ParamStore:
    """Named parameter tensors plus the RMSprop cache that updates them."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.cache: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        t.zero_grad()
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def num_params(self) -> int:
        return int(sum(t.value.size for t in self.params.values()))

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in self.params.values()))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            scale = max_norm / norm
            for t in self.params.values():
                t.grad *= scale
        return norm

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.params.items()}

    def load_snapshot(self, values: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if values[k].shape != t.shape:
                raise DimensionError(f"{k}: snapshot shape {values[k].shape} != {t.shape}")
            t.value = np.array(values[k], dtype=np.float64, copy=True)


def rmsprop_update(params: ParamStore, lr: float = 0.001, decay: float = 0.9, eps: float = 1e-8) -> None:
    """One RMSprop step using the gradients currently held by ``params``.

    cache <- decay * cache + (1 - decay) * g**2;  p <- p - lr * g / sqrt(cache + eps)
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not 0 <= decay < 1:
        raise ConfigError(f"decay must lie in [0, 1), got {decay}")
    for name, t in params.items():
        g = t.grad
        c = params.cache.get(name)
        if c is None:
            c = np.zeros_like(t.value)
        c = decay * c + (1.0 - decay) * g * g
        params.cache[name] = c
        t.value = t.value - lr * g / np.sqrt(c + eps)


@dataclass
class RMSprop:
    """Optimizer wrapper: optional global-norm clipping, then an RMSprop step."""

    params: ParamStore
    lr: float = 0.001
    decay: float = 0.9
    eps: float = 1e-8
    clip: float | None = 5.0
    steps: int = field(default=0, init=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    def step(self) -> float:
        norm = self.params.clip_grad_norm(self.clip) if self.clip else self.params.grad_norm()
        rmsprop_update(self.params, self.lr, self.decay, self.eps)
        self.steps += 1
        return norm


def numeric_grad(f: Callable[[], float], t: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``t.value``."""
    out = np.zeros_like(t.value)
    flat = t.value.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max|a - b| scaled by the larger of max|a|, max|b| (and ``floor``)."""
    a, b = np.asarray(a), np.asarray(b)
    if not a.size:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale


def gradient_check(build: Callable[[Graph], Tensor], tensors: Iterable[Tensor], h: float = 1e-4) -> float:
    """Worst relative error between taped and finite-difference gradients.

    ``build`` must construct the scalar loss from scratch on the graph it
    is handed, reading the current values of ``tensors``.
    """
    tensors = list(tensors)
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    g = Graph()
    g.backward(build(g))
    analytic = [t.grad.copy() for t in tensors]

    def f():
        return float(build(Graph(record=False)).value)

    worst = 0.0
    for t, a in zip(tensors, analytic):
        worst = max(worst, relative_error(a, numeric_grad(f, t, h)))
    return worst

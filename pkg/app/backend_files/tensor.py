"""
Dense tensors with reverse-mode automatic differentiation (NumPy backend).

Every differentiable op builds its output eagerly and, when any input requires a
gradient, attaches the input tensors plus a closure that maps the output
gradient to one gradient per input. The graph is therefore rebuilt on every
training step (define-by-run) and node outputs are never mutated in place.

Frozen tensors (encoder weights after pre-training) never require gradients, so
gradients flow *through* them to injected inputs without ever being stored for
them.
"""
from __future__ import annotations

import contextlib
import itertools
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy.special import erf

from .errors import FrozenParameterError, GraphError, NonFiniteError, ShapeMismatchError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

LAYER_NORM_EPS = 1e-5

_node_ids = itertools.count()
_local = threading.local()
_debug = os.environ.get("LINCIR_DEBUG", "") not in ("", "0")


def set_debug(enabled: bool) -> None:
    """Turn NaN/Inf checking of every op output on or off"""
    global _debug
    _debug = bool(enabled)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (inference, frozen targets)"""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    """
    Immutable float64 array plus the bookkeeping needed for backward().

    Attributes:
        node_id: unique, monotonically increasing id (creation order is a valid
            topological order)
        requires_grad: whether gradients are propagated to this tensor
        frozen: set on parameters excluded from optimization
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        self._init(arr, requires_grad, name, (), None, "leaf")

    def _init(self, arr: np.ndarray, requires_grad: bool, name: str,
              parents: Tuple["Tensor", ...], backward_fn: Optional[BackwardFn], op: str) -> None:
        arr.setflags(write=False)
        self._data = arr
        self.node_id = next(_node_ids)
        self.requires_grad = requires_grad
        self.frozen = False
        self.name = name
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @classmethod
    def _from_op(cls, arr: np.ndarray, parents: Tuple["Tensor", ...],
                 backward_fn: BackwardFn, op: str) -> "Tensor":
        if _debug and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values produced by op '{op}'")
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out = cls.__new__(cls)
        out._init(np.asarray(arr, dtype=np.float64), track, "",
                  parents if track else (), backward_fn if track else None, op)
        return out

    # ===== Accessors =====

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def parents(self) -> Tuple["Tensor", ...]:
        return self._parents

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeMismatchError(f"item() needs a single value, got shape {self.shape}")
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self._data)

    def freeze(self) -> "Tensor":
        self.frozen = True
        self.requires_grad = False
        return self

    # ===== Operators =====

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        frozen = ", frozen" if self.frozen else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag}{frozen})"


class Parameter(Tensor):
    """Trainable leaf. Optimizers replace its array through assign(), never in place."""

    def __init__(self, data: ArrayLike, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)

    def assign(self, values: np.ndarray) -> None:
        if self.frozen:
            raise FrozenParameterError(f"attempt to write to frozen parameter '{self.name}'")
        values = np.array(values, dtype=np.float64)
        if values.shape != self.shape:
            raise ShapeMismatchError(
                f"parameter '{self.name}' has shape {self.shape}, got {values.shape}")
        values.setflags(write=False)
        self._data = values


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------- ELEMENTWISE ----------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data ** 2), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU: x * Phi(x) with Phi the standard normal CDF (erf form)"""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))

    def backward(g):
        pdf = np.exp(-0.5 * x.data ** 2) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return Tensor._from_op(x.data * cdf, (x,), backward, "gelu")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """Inverted dropout; identity when rate is 0 or outside training"""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout during training needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------- REDUCTIONS & SHAPES ----------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def transpose(x: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeMismatchError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"stack: mismatched shapes {sorted(shapes)}")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """out = x[index] along the first axis (positional-embedding prefixes)"""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(x.data[index], (x,), backward, "take_rows")


def gather_rows(x: Tensor, positions: np.ndarray) -> Tensor:
    """out[b] = x[b, positions[b]] for x of shape [B, T, d]"""
    positions = np.asarray(positions, dtype=np.int64)
    if x.ndim != 3 or positions.shape != (x.shape[0],):
        raise ShapeMismatchError(f"gather_rows: bad shapes {x.shape} / {positions.shape}")
    batch = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros(x.shape)
        full[batch, positions] = g
        return (full,)

    return Tensor._from_op(x.data[batch, positions], (x,), backward, "gather_rows")


# ---------------- LINEAR ALGEBRA ----------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product over the last two axes (leading axes broadcast).

    Backward: dA = dC @ B^T, dB = A^T @ dC, reduced over broadcast axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dimensions disagree {a.shape} x {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # weights shared over every leading axis: one flat product
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis with the biased (population) variance"""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(f"layer_norm: width {d} vs gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        g_gamma = (g * x_hat).sum(axis=lead) if gamma.requires_grad else None
        g_beta = g.sum(axis=lead) if beta.requires_grad else None
        g_x = None
        if x.requires_grad:
            g_hat = g * gamma.data
            g_x = inv_std * (g_hat
                             - g_hat.mean(axis=-1, keepdims=True)
                             - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        return g_x, g_gamma, g_beta

    return Tensor._from_op(x_hat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """
    softmax(q k^T / sqrt(d_h) + mask) v over the last two axes.

    The causal mask sets strictly-upper-triangular logits to -inf, so position t
    only attends to positions <= t.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or k.shape != v.shape or q.ndim < 2:
        raise ShapeMismatchError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    steps, d_head = q.shape[-2], q.shape[-1]
    scale = 1.0 / math.sqrt(d_head)

    logits = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if causal:
        blocked = np.triu(np.ones((steps, steps), dtype=bool), k=1)
        logits = np.where(blocked, -np.inf, logits)
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)

    def backward(g):
        g_v = np.swapaxes(weights, -1, -2) @ g
        g_w = g @ np.swapaxes(v.data, -1, -2)
        g_logits = weights * (g_w - (g_w * weights).sum(axis=-1, keepdims=True)) * scale
        g_q = g_logits @ k.data
        g_k = np.swapaxes(g_logits, -1, -2) @ q.data
        return g_q, g_k, g_v

    return Tensor._from_op(weights @ v.data, (q, k, v), backward, "attention")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._from_op(y, (x,), backward, "l2_normalize")


def embed_with_injection(table: Tensor, ids: np.ndarray, injected: Optional[Tensor] = None,
                         slot_rows: Optional[np.ndarray] = None) -> Tensor:
    """
    Look up token rows of `table`, replacing every slot position with a row of `injected`.

    Args:
        table: embedding table [vocab, d]
        ids: token ids [B, T]
        injected: rows supplied from outside the table [S, d]
        slot_rows: [B, T] index into `injected`, -1 where the table row is kept

    Returns:
        Token embeddings [B, T, d]
    """
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]
    slots = None
    if injected is not None:
        if slot_rows is None:
            raise ShapeMismatchError("injected rows given without slot positions")
        if injected.ndim != 2 or injected.shape[1] != table.shape[1]:
            raise ShapeMismatchError(
                f"injected width {injected.shape} does not match embedding width {table.shape[1]}")
        slot_rows = np.asarray(slot_rows, dtype=np.int64)
        slots = slot_rows >= 0
        if slot_rows.max(initial=-1) >= injected.shape[0]:
            raise ShapeMismatchError("slot refers to a missing injected row")
        out = out.copy()
        out[slots] = injected.data[slot_rows[slots]]
        parents = (table, injected)
    else:
        parents = (table,)

    def backward(g):
        g_table = None
        if table.requires_grad:
            g_table = np.zeros(table.shape)
            keep = ~slots if slots is not None else np.ones(ids.shape, dtype=bool)
            np.add.at(g_table, ids[keep], g[keep])
        if injected is None:
            return (g_table,)
        g_inj = np.zeros(injected.shape)
        np.add.at(g_inj, slot_rows[slots], g[slots])
        return g_table, g_inj

    return Tensor._from_op(out, parents, backward, "embed")


# ---------------- LOSSES ----------------

def mse(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Mean over components of (a - b)^2"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mse: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    count = diff.size

    def backward(g):
        grad = 2.0 * g * diff / count
        return grad, -grad

    return Tensor._from_op(np.asarray((diff ** 2).mean()), (a, b), backward, "mse")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of [N, C] logits against integer targets"""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatchError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(len(targets))
    loss = -log_probs[rows, targets].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (g * grad / len(targets),)

    return Tensor._from_op(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------- GRAPH & BACKWARD ----------------

@dataclass
class GraphNode:
    node_id: int
    op: str
    inputs: Tuple[int, ...]
    output: Tensor


@dataclass
class Graph:
    """Topologically ordered ancestors of a loss that take part in differentiation"""

    nodes: List[GraphNode] = field(default_factory=list)
    leaves: Set[int] = field(default_factory=set)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        graph = cls()
        if not loss.requires_grad:
            return graph
        state: Dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            tensor, expanded = stack.pop()
            nid = tensor.node_id
            if expanded:
                state[nid] = 2
                graph.nodes.append(GraphNode(
                    nid, tensor.op, tuple(p.node_id for p in tensor.parents), tensor))
                if tensor.is_leaf:
                    graph.leaves.add(nid)
                continue
            if state.get(nid) == 2:
                continue
            if state.get(nid) == 1:
                raise GraphError(f"cycle detected at node {nid} ({tensor.op})")
            state[nid] = 1
            stack.append((tensor, True))
            for parent in tensor.parents:
                if not parent.requires_grad:
                    continue
                if state.get(parent.node_id) == 1:
                    raise GraphError(f"cycle detected at node {parent.node_id} ({parent.op})")
                if state.get(parent.node_id) != 2:
                    stack.append((parent, False))
        return graph

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> Dict[int, np.ndarray]:
    """
    Exact reverse-mode gradients of a scalar loss.

    Args:
        loss: scalar tensor
        graph: precomputed Graph.from_loss(loss); built on demand if omitted

    Returns:
        Mapping from leaf node_id to its gradient array. Leaves that do not
        require gradients (frozen weights, constants) are absent.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.from_loss(loss)
    if not graph.nodes:
        return {}

    pending: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaf_grads: Dict[int, np.ndarray] = {}
    for node in reversed(graph.nodes):
        grad = pending.pop(node.node_id, None)
        if grad is None:
            continue
        tensor = node.output
        if tensor.is_leaf:
            if tensor.frozen:
                raise FrozenParameterError(f"gradient reached frozen tensor '{tensor.name}'")
            leaf_grads[node.node_id] = grad
            continue
        for parent, parent_grad in zip(tensor.parents, tensor._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.node_id in pending:
                pending[parent.node_id] = pending[parent.node_id] + parent_grad
            else:
                pending[parent.node_id] = parent_grad
    return leaf_grads


def grads_for(params: Iterable[Tensor], leaf_grads: Dict[int, np.ndarray]) -> List[np.ndarray]:
    """Gradients aligned with `params`; parameters the loss did not reach get zeros"""
    return [leaf_grads.get(p.node_id, np.zeros(p.shape)) for p in params]

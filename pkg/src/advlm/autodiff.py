"""Reverse-mode automatic differentiation over small dense tensors.

The engine is deliberately tiny: tensors wrap contiguous float64 numpy
buffers, operations either run eagerly (when no argument is bound to a
graph) or append a node to a shared ComputationGraph, and the backward
pass replays recorded nodes once, in reverse append order. There is no
broadcasting; any shape mismatch raises immediately.

Computation is carried out in 64-bit floats. 32-bit storage proved too
noisy for central-difference gradient verification at h = 1e-3: forward
roundoff of order 1e-7 divided by 2h swamps small gradient coordinates.
The on-disk checkpoint format still stores weights as 32-bit reals.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "ContractViolation",
    "Tensor",
    "ComputationGraph",
    "GradientMap",
    "backward",
    "grad_check",
    "softmax_rows",
    "attention_weights",
    "op_linear",
    "op_matmul",
    "op_relu",
    "op_attention",
    "op_cross_entropy",
    "op_embed",
    "op_extract_patches",
    "op_concat_rows",
    "op_add",
    "op_sub",
    "op_mul",
    "op_scale",
    "op_sum",
    "op_index",
    "op_max",
]


class ContractViolation(ValueError):
    """Raised when an operation is invoked outside its documented contract."""


def _validated(arr: np.ndarray) -> np.ndarray:
    if any(d <= 0 for d in arr.shape):
        raise ContractViolation(f"tensor dimensions must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation("tensor data must be finite (no NaN/Inf)")
    return arr


class Tensor:
    """A shaped array of reals, optionally bound to a computation graph node.

    Data is stored row-major and is read-only after construction, so
    tensors can be shared freely between threads and across graphs.
    """

    __slots__ = ("array", "graph", "node")

    def __init__(self, data, shape: Optional[Sequence[int]] = None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        arr = np.ascontiguousarray(arr)
        _validated(arr)
        arr.flags.writeable = False
        self.array = arr
        self.graph: Optional["ComputationGraph"] = None
        self.node: Optional[int] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, graph: Optional["ComputationGraph"] = None,
              node: Optional[int] = None) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        _validated(arr)
        arr.flags.writeable = False
        t.array = arr
        t.graph = graph
        t.node = node
        return t

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ContractViolation(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("kind", "inputs", "output", "vjps")

    def __init__(self, kind, inputs, output, vjps):
        self.kind = kind        # operation name
        self.inputs = inputs    # handles of graph-bound inputs; all precede this node
        self.output = output    # cached forward result
        self.vjps = vjps        # gradient closures aligned with `inputs`


class ComputationGraph:
    """Append-only operation record; append order is a topological order.

    A graph is single-threaded. Independent graphs never share state and
    may be evaluated concurrently.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, tensor: Tensor) -> Tensor:
        """Bind a tensor to this graph as an input node; returns the bound view."""
        handle = len(self.nodes)
        bound = Tensor._wrap(tensor.array, graph=self, node=handle)
        self.nodes.append(_Node("leaf", (), bound, ()))
        return bound

    def _record(self, kind: str, out_arr: np.ndarray, tensors, vjps_by_pos) -> Tensor:
        inputs = []
        vjps = []
        for pos, t in enumerate(tensors):
            if t.node is not None:
                inputs.append(t.node)
                vjps.append(vjps_by_pos[pos])
        handle = len(self.nodes)
        out = Tensor._wrap(out_arr, graph=self, node=handle)
        self.nodes.append(_Node(kind, tuple(inputs), out, tuple(vjps)))
        return out


def _graph_of(tensors) -> Optional[ComputationGraph]:
    graph = None
    for t in tensors:
        if t.node is None:
            continue
        if graph is None:
            graph = t.graph
        elif graph is not t.graph:
            raise ContractViolation("inputs belong to different computation graphs")
    return graph


def _finish(kind: str, out_arr: np.ndarray, tensors, vjps_by_pos) -> Tensor:
    graph = _graph_of(tensors)
    if graph is None:
        return Tensor._wrap(out_arr)
    return graph._record(kind, out_arr, tensors, vjps_by_pos)


def softmax_rows(arr: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction, safe at extreme logits."""
    m = arr.max(axis=1, keepdims=True)
    e = np.exp(arr - m)
    return e / e.sum(axis=1, keepdims=True)


def attention_weights(query: Tensor, key: Tensor) -> np.ndarray:
    """The softmax weight matrix used by op_attention, for inspection."""
    q, k = query.array, key.array
    return softmax_rows((q @ k.T) / math.sqrt(q.shape[1]))


# ---------------------------------------------------------------------------
# operations


def op_linear(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: out[i, j] = sum_k input[i, k] * weight[k, j] + bias[j]."""
    x, w, b = input.array, weight.array, bias.array
    if (x.ndim != 2 or w.ndim != 2 or b.ndim != 1
            or x.shape[1] != w.shape[0] or b.shape[0] != w.shape[1]):
        raise ContractViolation(
            f"op_linear shape mismatch: input {x.shape}, weight {w.shape}, bias {b.shape}")
    out = x @ w + b
    vjps = {
        0: lambda g: g @ w.T,
        1: lambda g: x.T @ g,
        2: lambda g: g.sum(axis=0),
    }
    return _finish("linear", out, (input, weight, bias), vjps)


def op_matmul(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.array, b.array
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ContractViolation(f"op_matmul shape mismatch: {x.shape} @ {y.shape}")
    out = x @ y
    vjps = {0: lambda g: g @ y.T, 1: lambda g: x.T @ g}
    return _finish("matmul", out, (a, b), vjps)


def op_relu(input: Tensor) -> Tensor:
    """Elementwise max(0, v). The subgradient at exactly 0 is taken as 0."""
    x = input.array
    mask = x > 0
    out = np.where(mask, x, 0.0)
    vjps = {0: lambda g: g * mask}
    return _finish("relu", out, (input,), vjps)


def op_attention(query: Tensor, key: Tensor, value: Tensor) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    query is [n_q, d]; key and value are [n_k, d]; softmax runs over the
    key axis, so each output row is a convex combination of value rows.
    """
    q, k, v = query.array, key.array, value.array
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ContractViolation(
            f"op_attention needs 2-d inputs, got {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[1]
    if d == 0 or k.shape[0] == 0:
        raise ContractViolation("op_attention needs d >= 1 and n_k >= 1")
    if k.shape[1] != d or v.shape[1] != d or v.shape[0] != k.shape[0]:
        raise ContractViolation(
            f"op_attention shape mismatch: query {q.shape}, key {k.shape}, value {v.shape}")
    scale = 1.0 / math.sqrt(d)
    w = softmax_rows((q @ k.T) * scale)
    out = w @ v

    def _dscores(g):
        dw = g @ v.T
        return w * (dw - (dw * w).sum(axis=1, keepdims=True))

    vjps = {
        0: lambda g: (_dscores(g) @ k) * scale,
        1: lambda g: (_dscores(g).T @ q) * scale,
        2: lambda g: w.T @ g,
    }
    return _finish("attention", out, (query, key, value), vjps)


def op_cross_entropy(logits: Tensor, target_ids: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits[i])[target_ids[i]].

    Computed through log-sum-exp so saturated logits stay finite.
    """
    l = logits.array
    if l.ndim != 2:
        raise ContractViolation(f"op_cross_entropy needs 2-d logits, got {l.shape}")
    n, vocab = l.shape
    ids = [int(i) for i in target_ids]
    if len(ids) != n:
        raise ContractViolation(f"{len(ids)} target ids for {n} logit rows")
    for i in ids:
        if not 0 <= i < vocab:
            raise ContractViolation(f"target id {i} outside [0, {vocab})")
    idx = np.asarray(ids)
    m = l.max(axis=1)
    lse = m + np.log(np.exp(l - m[:, None]).sum(axis=1))
    out = np.asarray((lse - l[np.arange(n), idx]).mean())

    def vjp(g):
        p = softmax_rows(l)
        p[np.arange(n), idx] -= 1.0
        return p * (float(g) / n)

    return _finish("cross_entropy", out, (logits,), {0: vjp})


def op_embed(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup into an embedding table; gradients scatter-add per row."""
    t = table.array
    if t.ndim != 2:
        raise ContractViolation(f"op_embed needs a 2-d table, got {t.shape}")
    idx = [int(i) for i in ids]
    if len(idx) == 0:
        raise ContractViolation("op_embed needs at least one id")
    for i in idx:
        if not 0 <= i < t.shape[0]:
            raise ContractViolation(f"embedding id {i} outside [0, {t.shape[0]})")
    idx_arr = np.asarray(idx)
    out = t[idx_arr]

    def vjp(g):
        full = np.zeros_like(t)
        np.add.at(full, idx_arr, g)
        return full

    return _finish("embed", out, (table,), {0: vjp})


def op_extract_patches(image: Tensor, patch_size: int) -> Tensor:
    """Split an [H, W, C] image into non-overlapping flattened patches.

    Output row r corresponds to patch (r // (W/p), r % (W/p)); within a
    row, pixels are ordered (dy, dx, channel) row-major.
    """
    a = image.array
    if a.ndim != 3:
        raise ContractViolation(f"op_extract_patches needs an [H, W, C] image, got {a.shape}")
    p = int(patch_size)
    h, w, c = a.shape
    if p <= 0 or h % p != 0 or w % p != 0:
        raise ContractViolation(f"patch size {p} does not tile image of shape {a.shape}")
    gh, gw = h // p, w // p
    out = a.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)

    def vjp(g):
        return (g.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c))

    return _finish("extract_patches", out, (image,), {0: vjp})


def op_concat_rows(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.array, b.array
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ContractViolation(f"op_concat_rows shape mismatch: {x.shape} vs {y.shape}")
    out = np.concatenate([x, y], axis=0)
    m = x.shape[0]
    vjps = {0: lambda g: g[:m].copy(), 1: lambda g: g[m:].copy()}
    return _finish("concat_rows", out, (a, b), vjps)


def _same_shape(a: Tensor, b: Tensor, kind: str) -> None:
    if a.array.shape != b.array.shape:
        raise ContractViolation(f"{kind} shape mismatch: {a.array.shape} vs {b.array.shape}")


def op_add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "op_add")
    vjps = {0: lambda g: g.copy(), 1: lambda g: g.copy()}
    return _finish("add", a.array + b.array, (a, b), vjps)


def op_sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "op_sub")
    vjps = {0: lambda g: g.copy(), 1: lambda g: -g}
    return _finish("sub", a.array - b.array, (a, b), vjps)


def op_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "op_mul")
    x, y = a.array, b.array
    vjps = {0: lambda g: g * y, 1: lambda g: g * x}
    return _finish("mul", x * y, (a, b), vjps)


def op_scale(input: Tensor, factor: float) -> Tensor:
    f = float(factor)
    if not math.isfinite(f):
        raise ContractViolation("op_scale factor must be finite")
    vjps = {0: lambda g: g * f}
    return _finish("scale", input.array * f, (input,), vjps)


def op_sum(input: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = input.array
    out = np.asarray(x.sum())
    vjps = {0: lambda g: np.full(x.shape, float(g))}
    return _finish("sum", out, (input,), vjps)


def op_index(input: Tensor, index: int) -> Tensor:
    """Select one element by flat row-major index, as a scalar tensor."""
    flat = input.array.reshape(-1)
    i = int(index)
    if not 0 <= i < flat.size:
        raise ContractViolation(f"index {i} outside [0, {flat.size})")

    def vjp(g):
        full = np.zeros(flat.size)
        full[i] = float(g)
        return full.reshape(input.array.shape)

    return _finish("index", np.asarray(flat[i]), (input,), {0: vjp})


def op_max(input: Tensor) -> Tensor:
    """Maximum element, as a scalar tensor. Ties route the gradient to the
    first (lowest flat index) maximal element."""
    flat = input.array.reshape(-1)
    i = int(np.argmax(flat))

    def vjp(g):
        full = np.zeros(flat.size)
        full[i] = float(g)
        return full.reshape(input.array.shape)

    return _finish("max", np.asarray(flat[i]), (input,), {0: vjp})


# ---------------------------------------------------------------------------
# backward pass and gradient checking


class GradientMap:
    """Gradients keyed by node handle, produced by backward().

    Only nodes on a path to the loss appear; the loss node itself maps to
    the scalar 1.
    """

    def __init__(self, grads: dict):
        self._grads = grads

    def by_handle(self, handle: int) -> Optional[Tensor]:
        return self._grads.get(int(handle))

    def of(self, tensor: Tensor) -> Optional[Tensor]:
        if tensor.node is None:
            return None
        return self._grads.get(tensor.node)

    def __contains__(self, key) -> bool:
        if isinstance(key, Tensor):
            return key.node is not None and key.node in self._grads
        return int(key) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def handles(self):
        return self._grads.keys()


def backward(graph: ComputationGraph, loss: Union[Tensor, int]) -> GradientMap:
    """Accumulate gradients of a scalar loss node over the whole graph.

    Visits nodes exactly once, in reverse append order, which is a reverse
    topological order by construction.
    """
    if isinstance(loss, Tensor):
        if loss.node is None or loss.graph is not graph:
            raise ContractViolation("loss tensor is not a node of this graph")
        handle = loss.node
    else:
        handle = int(loss)
        if not 0 <= handle < len(graph.nodes):
            raise ContractViolation(f"loss handle {handle} not in graph")
    out = graph.nodes[handle].output
    if out.array.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {out.shape}")

    acc: dict[int, np.ndarray] = {handle: np.ones_like(out.array)}
    for idx in range(len(graph.nodes) - 1, -1, -1):
        g = acc.get(idx)
        if g is None:
            continue
        node = graph.nodes[idx]
        for h, vjp in zip(node.inputs, node.vjps):
            contrib = vjp(g)
            prev = acc.get(h)
            acc[h] = contrib if prev is None else prev + contrib
    return GradientMap({h: Tensor._wrap(a) for h, a in acc.items()})


def grad_check(function: Callable[[Tensor], Tensor], point: Tensor, step: float) -> float:
    """Max relative disagreement between backward gradients and central differences.

    `function` must map a tensor to a scalar tensor and is re-invoked with
    unbound tensors for the finite-difference evaluations, so it has to be
    self-contained (it may close over constant parameters). The relative
    error at each coordinate is |a - b| / max(|a|, |b|, 1e-8).
    """
    step = float(step)
    if step <= 0:
        raise ContractViolation("grad_check step must be positive")
    graph = ComputationGraph()
    x = graph.leaf(point)
    loss = function(x)
    if not isinstance(loss, Tensor) or loss.array.size != 1:
        raise ContractViolation("function must return a scalar tensor")
    gx = backward(graph, loss).of(x)
    analytic = (np.zeros(point.array.size) if gx is None else gx.array.reshape(-1))

    base = point.array.reshape(-1)
    fd = np.empty(base.size)
    for i in range(base.size):
        up = base.copy()
        up[i] += step
        dn = base.copy()
        dn[i] -= step
        f_up = function(Tensor._wrap(up.reshape(point.shape))).item()
        f_dn = function(Tensor._wrap(dn.reshape(point.shape))).item()
        fd[i] = (f_up - f_dn) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))

"""Tape-based reverse-mode differentiation over float32 numpy arrays.

A :class:`Graph` records operations in the order they are applied. Each
:class:`Node` keeps its forward value and a vector-Jacobian product closure;
:func:`backward` walks the tape in reverse from a seed node.

Tensors are plain ``numpy.ndarray`` values of dtype float32. Ops never mutate
their inputs.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(value) -> np.ndarray:
    arr = np.asarray(value, dtype=DTYPE)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def check_finite(array: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")
    return array


class Node:
    __slots__ = ("graph", "id", "op", "parents", "value", "vjp", "requires_grad", "name")

    def __init__(self, graph, op, parents, value, vjp=None, requires_grad=False, name=None):
        self.graph = graph
        self.id = len(graph.nodes)
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.id} {self.op}{label} shape={self.value.shape}>"


class Graph:
    """An ordered operation tape. Insertion order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _add(self, op, parents, value, vjp) -> Node:
        needs = any(p.requires_grad for p in parents)
        node = Node(self, op, parents, value, vjp if needs else None, needs)
        self.nodes.append(node)
        return node

    def input(self, value, requires_grad: bool = False, name: Optional[str] = None) -> Node:
        node = Node(self, "input", (), as_tensor(value), requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        return self.input(value, requires_grad=True, name=name)

    @property
    def parameters(self) -> dict[str, Node]:
        return {n.name: n for n in self.nodes if n.op == "input" and n.requires_grad and n.name}


def backward(graph: Graph, seed: Node, seed_gradient=None) -> dict[Node, np.ndarray]:
    """Gradients of ``seed`` with respect to every differentiable leaf.

    ``seed_gradient`` defaults to 1 for a scalar seed; non-scalar seeds need an
    explicit gradient of matching shape. Fan-out contributions are summed.
    """
    if seed.graph is not graph:
        raise ValueError("seed node does not belong to this graph")
    if seed_gradient is None:
        if seed.value.size != 1:
            raise ValueError(
                f"backward from non-scalar node {seed!r} requires an explicit seed_gradient"
            )
        seed_gradient = np.ones_like(seed.value)
    seed_gradient = as_tensor(seed_gradient)
    if seed_gradient.shape != seed.value.shape:
        raise DimensionError("backward", seed.value.shape, seed_gradient.shape)

    grads: dict[int, np.ndarray] = {seed.id: seed_gradient}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(graph.nodes[: seed.id + 1]):
        g = grads.pop(node.id, None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return {n: leaves.get(n, np.zeros_like(n.value)) for n in graph.nodes
            if n.is_leaf and n.requires_grad}


# ---------------------------------------------------------------------------
# ops


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return a.graph._add("matmul", (a, b), av @ bv, vjp)


def add_bias(x: Node, bias: Node) -> Node:
    """Adds a per-feature (dense) or per-channel (NCHW conv) bias."""
    if bias.value.ndim != 1 or x.value.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError("add_bias", x.shape, bias.shape)
    axes = tuple(i for i in range(x.value.ndim) if i != 1)
    bshape = (1, -1) + (1,) * (x.value.ndim - 2)

    def vjp(g):
        return g, g.sum(axis=axes)

    return x.graph._add("add_bias", (x, bias), x.value + bias.value.reshape(bshape), vjp)


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionError("add", a.shape, b.shape)
    return a.graph._add("add", (a, b), a.value + b.value, lambda g: (g, g))


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionError("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return a.graph._add("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def mask(x: Node, m: np.ndarray, name: str = "mask") -> Node:
    """Multiplies by a constant array (dropout masks)."""
    m = as_tensor(m)
    if m.shape != x.shape:
        raise DimensionError(name, x.shape, m.shape)
    return x.graph._add(name, (x,), x.value * m, lambda g: (g * m,))


def relu(x: Node) -> Node:
    positive = x.value > 0  # derivative at exactly 0 is 0
    return x.graph._add("relu", (x,), np.where(positive, x.value, DTYPE(0)),
                        lambda g: (g * positive,))


def reshape(x: Node, shape: Sequence[int]) -> Node:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", old, tuple(shape)) from None
    return x.graph._add("reshape", (x,), out, lambda g: (g.reshape(old),))


def scalar_divide(x: Node, c: float) -> Node:
    if not c:
        raise ZeroDivisionError("scalar_divide by zero")
    c = DTYPE(c)
    return x.graph._add("scalar_divide", (x,), x.value / c, lambda g: (g / c,))


def total(x: Node) -> Node:
    """Sum of all elements, as a shape-() node."""
    shape = x.shape
    return x.graph._add("sum", (x,), np.asarray(x.value.sum(dtype=DTYPE)),
                        lambda g: (np.broadcast_to(g, shape).astype(DTYPE),))


def conv2d(x: Node, w: Node, padding: str = "valid") -> Node:
    """2-D cross-correlation, NCHW input and (F, C, k, k) filters, stride 1.

    ``padding="same"`` zero-pads odd kernels so the spatial extent is kept.
    """
    if x.value.ndim != 4 or w.value.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError("conv2d", x.shape, w.shape)
    kh, kw = w.shape[2:]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("conv2d(same) needs odd kernels", x.shape, w.shape)
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw:
        raise DimensionError("conv2d", x.shape, w.shape)

    xp = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.value
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    wv = w.value
    out = np.tensordot(windows, wv, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,F
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    ho, wo = out.shape[2:]
    xshape = x.shape

    def vjp(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))  # F,C,kh,kw
        cols = np.tensordot(g, wv, axes=([1], [0]))  # B,Ho,Wo,C,kh,kw
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph:ph + xshape[2], pw:pw + xshape[3]]
        return np.ascontiguousarray(gx), gw.astype(DTYPE, copy=False)

    return x.graph._add("conv2d", (x, w), out, vjp)


def maxpool2x2(x: Node) -> Node:
    """Non-overlapping 2x2 max pooling; ties go to the row-major earliest element."""
    if x.value.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError("maxpool2x2 (needs even spatial extents)", x.shape)
    b, c, h, w = x.shape
    win = x.value.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    onehot = idx[..., None] == np.arange(4)

    def vjp(g):
        routed = (onehot * g[..., None]).astype(DTYPE)
        routed = routed.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(b, c, h, w),)

    return x.graph._add("maxpool2x2", (x,), np.ascontiguousarray(out), vjp)


def stable_softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``z / temperature`` with max-logit subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = np.asarray(z, dtype=DTYPE) / DTYPE(temperature)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: Node, temperature: float = 1.0) -> Node:
    p = stable_softmax(z.value, temperature)
    t = DTYPE(temperature)

    def vjp(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner) / t,)

    return z.graph._add("softmax", (z,), p, vjp)


def softmax_cross_entropy(z: Node, labels, temperature: float = 1.0) -> Node:
    """Mean over the batch of ``-sum_i y_i log softmax(z/T)_i``.

    Fused so the log never sees a probability: log-softmax is computed as
    ``s - logsumexp(s)`` directly.
    """
    y = as_tensor(labels)
    if y.shape != z.shape or z.value.ndim != 2:
        raise DimensionError("softmax_cross_entropy", z.shape, y.shape)
    t = DTYPE(temperature)
    s = z.value / t
    s = s - s.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    logp = s - lse
    batch = z.shape[0]
    loss = -(y * logp).sum(dtype=np.float64) / batch
    p = np.exp(logp)

    def vjp(g):
        ysum = y.sum(axis=-1, keepdims=True)
        return (g * (p * ysum - y) / (t * batch),)

    return z.graph._add("softmax_cross_entropy", (z,), np.asarray(loss, dtype=DTYPE), vjp)


"""Minimal reverse-mode autodiff over float64 numpy arrays.

Values are plain ``numpy.ndarray`` objects (float64, C order). A :class:`Node`
pairs a value with a gradient buffer and, for non-leaf nodes, the operation
that produced it. Gradients are pulled through the graph by :func:`backward`.

Only the operations the segmentor needs are provided. Every operation returns
a new node and never mutates its operands.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, ShapeError

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Node:
    """A value in the computation graph.

    ``parents`` and ``backward_fn`` are empty for leaves. ``backward_fn`` maps
    the gradient w.r.t. this node to a tuple of gradients, one per parent
    (``None`` for parents that receive no gradient).
    """

    __slots__ = ("value", "grad", "op", "parents", "backward_fn")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        op: str = "leaf",
        backward_fn: Optional[BackwardFn] = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        if not self.value.flags.c_contiguous:
            self.value = self.value.copy()
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _topological_order(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Intermediate nodes get their gradient for this call written (not
    accumulated) into ``.grad``; leaves accumulate across calls until
    :func:`zero_grads` is used.
    """
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def zero_grads(nodes: Iterable[Node]) -> None:
    for node in nodes:
        node.grad = np.zeros_like(node.value)


# ---------------------------------------------------------------- elementwise


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return Node(a.value + b.value, (a, b), "add", lambda g: (g, g))


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return Node(x.value * c, (x,), "scale", lambda g: (g * c,))


def relu(x: Node) -> Node:
    on = x.value > 0
    return Node(np.where(on, x.value, 0.0), (x,), "relu", lambda g: (g * on,))


def _sigmoid(v):
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Node) -> Node:
    y = _sigmoid(x.value)
    return Node(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def softmax(x: Node, axis: int) -> Node:
    """Numerically stable softmax along ``axis``."""
    ndim = x.value.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Node(y, (x,), "softmax", backward_fn)


def mse_loss(pred: Node, target) -> Node:
    """Mean over all elements of the squared difference."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes differ {pred.shape} vs {target.shape}")
    diff = pred.value - target
    n = diff.size

    def backward_fn(g):
        return (g * (2.0 / n) * diff,)

    return Node(np.mean(diff * diff), (pred,), "mse_loss", backward_fn)


# -------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _patches(xp, kh, kw, oh, ow, stride, dilation):
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(
    x: Node,
    weight: Node,
    bias: Optional[Node] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Node:
    """2-D cross-correlation, N×C×H×W input with O×C×kH×kW kernels."""
    if x.value.ndim != 4 or weight.value.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride, dilation >= 1 and padding >= 0 required")
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape} and kernel {weight.shape}")

    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _patches(xp, kh, kw, oh, ow, stride, dilation)
    out = np.tensordot(cols, weight.value, axes=([1, 2, 3], [1, 2, 3]))  # n, oh, ow, o
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.value[None, :, None, None]

    def backward_fn(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gcols = np.tensordot(g, weight.value, axes=([1], [0]))  # n, oh, ow, c, kh, kw
        gxp = np.zeros_like(xp)
        span_h = stride * (oh - 1) + 1
        span_w = stride * (ow - 1) + 1
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                gxp[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Node(out, parents, "conv2d", backward_fn)


# --------------------------------------------------------------- upsampling


def upsample_nearest(x: Node, factor: int) -> Node:
    """Replicate every spatial value into a factor×factor block."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return Node(x.value.copy(), (x,), "upsample_nearest", lambda g: (g,))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.value, factor, axis=2), factor, axis=3)

    def backward_fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Node(out, (x,), "upsample_nearest", backward_fn)


def bilinear_matrix(size: int, factor: int) -> np.ndarray:
    """(size*factor)×size interpolation matrix, half-pixel centres, edge clamped."""
    out = np.zeros((size * factor, size))
    src = (np.arange(size * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    rows = np.arange(size * factor)
    np.add.at(out, (rows, lo), 1.0 - frac)
    np.add.at(out, (rows, hi), frac)
    return out


def upsample_bilinear(x: Node, factor: int) -> Node:
    """Separable bilinear upsampling (a fixed linear map, so exact transpose backward)."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    _, _, h, w = x.shape
    ah = bilinear_matrix(h, factor)
    aw = bilinear_matrix(w, factor)
    out = ah @ x.value @ aw.T

    def backward_fn(g):
        return (ah.T @ g @ aw,)

    return Node(out, (x,), "upsample_bilinear", backward_fn)

"""Criss-cross attention, its recurrent form, and a dense non-local baseline.

Layout of the criss-cross axis (length H+W-1) for a pixel at row ``y`` and
column ``x``: entries ``0..H-1`` are the pixels of column ``x`` from top to
bottom (the pixel itself included), entries ``H..H+W-2`` are the pixels of
row ``y`` from left to right with the pixel itself skipped.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Node

CRISSCROSS = "crisscross"
NONLOCAL = "nonlocal"


def reduced_channels(channels: int) -> int:
    return max(1, channels // 8)


@dataclass
class CCAWeights:
    """1×1 projection kernels shared by every attention pass."""

    query: Node  # C'×C×1×1
    key: Node  # C'×C×1×1
    value: Node  # C×C×1×1

    def __post_init__(self):
        if self.query.shape != self.key.shape:
            raise ShapeError(f"query {self.query.shape} and key {self.key.shape} differ")
        c = self.value.shape[0]
        if self.value.shape != (c, c, 1, 1) or self.query.shape[1:] != (c, 1, 1):
            raise ShapeError(
                f"inconsistent projections: query {self.query.shape}, value {self.value.shape}"
            )

    @property
    def channels(self) -> int:
        return self.value.shape[0]

    def nodes(self) -> List[Node]:
        return [self.query, self.key, self.value]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "CCAWeights":
        cr = reduced_channels(channels)
        std = np.sqrt(2.0 / channels)
        return cls(
            query=Node(rng.normal(0.0, std, (cr, channels, 1, 1))),
            key=Node(rng.normal(0.0, std, (cr, channels, 1, 1))),
            value=Node(rng.normal(0.0, std, (channels, channels, 1, 1))),
        )


def crisscross_set(x: int, y: int, H: int, W: int) -> List[Tuple[int, int]]:
    """(x, y) coordinates attended by pixel (x, y), in attention-axis order."""
    if not (0 <= x < W and 0 <= y < H):
        raise ValueError(f"pixel ({x}, {y}) outside a {H}x{W} map")
    column = [(x, r) for r in range(H)]
    row = [(c, y) for c in range(W) if c != x]
    return column + row


def _row_index(W: int) -> np.ndarray:
    # idx[w] lists the row positions attended from column w, skipping w itself
    return np.array([[v for v in range(W) if v != w] for w in range(W)], dtype=np.intp).reshape(
        W, W - 1
    )


def _check_qkv(q: np.ndarray, k: np.ndarray):
    if q.shape != k.shape:
        raise ShapeError(f"query {q.shape} and key {k.shape} differ")


def crisscross_affinity(q: Node, k: Node) -> Node:
    """Dot-product logits over each pixel's criss-cross set: N×(H+W-1)×H×W."""
    _check_qkv(q.value, k.value)
    n, _, h, w = q.shape
    qv, kv = q.value, k.value
    idx = _row_index(w)[None, None]

    # column part: per (n, w), (H×C') @ (C'×H)
    col = np.matmul(qv.transpose(0, 3, 2, 1), kv.transpose(0, 3, 1, 2))  # n, w, h, g
    # row part: per (n, h), (W×C') @ (C'×W), then drop the diagonal
    row_full = np.matmul(qv.transpose(0, 2, 3, 1), kv.transpose(0, 2, 1, 3))  # n, h, w, v
    row = np.take_along_axis(row_full, np.broadcast_to(idx, (n, h, w, w - 1)), axis=3)
    out = np.concatenate([col.transpose(0, 3, 2, 1), row.transpose(0, 3, 1, 2)], axis=1)

    def backward_fn(g):
        g_col = g[:, :h].transpose(0, 3, 2, 1)  # n, w, h, g
        g_row = np.zeros((n, h, w, w))
        np.put_along_axis(
            g_row, np.broadcast_to(idx, (n, h, w, w - 1)), g[:, h:].transpose(0, 2, 3, 1), axis=3
        )
        # column: col[n,w,h,g] = sum_c q[n,c,h,w] k[n,c,g,w]
        gq = np.matmul(g_col, kv.transpose(0, 3, 2, 1)).transpose(0, 3, 2, 1)
        gk = np.matmul(g_col.transpose(0, 1, 3, 2), qv.transpose(0, 3, 2, 1)).transpose(0, 3, 2, 1)
        # row: row[n,h,w,v] = sum_c q[n,c,h,w] k[n,c,h,v]
        gq = gq + np.matmul(g_row, kv.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
        gk = gk + np.matmul(g_row.transpose(0, 1, 3, 2), qv.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
        return gq, gk

    return Node(out, (q, k), "crisscross_affinity", backward_fn)


def crisscross_aggregate(attn: Node, v: Node) -> Node:
    """Attention-weighted sum of values over each pixel's criss-cross set."""
    n, c, h, w = v.shape
    if attn.shape != (n, h + w - 1, h, w):
        raise ShapeError(f"attention {attn.shape} does not fit values {v.shape}")
    a, vv = attn.value, v.value
    idx = np.broadcast_to(_row_index(w)[None, None], (n, h, w, w - 1))
    a_col = a[:, :h].transpose(0, 3, 1, 2)  # n, w, g, h
    a_row = np.zeros((n, h, w, w))  # n, h, w, v
    np.put_along_axis(a_row, idx, a[:, h:].transpose(0, 2, 3, 1), axis=3)

    v_col = vv.transpose(0, 3, 1, 2)  # n, w, c, g
    v_row = vv.transpose(0, 2, 1, 3)  # n, h, c, v
    out = np.matmul(v_col, a_col).transpose(0, 2, 3, 1)  # n, w, c, h -> n, c, h, w
    out = out + np.matmul(v_row, a_row.transpose(0, 1, 3, 2)).transpose(0, 2, 1, 3)

    def backward_fn(g):
        g_col = g.transpose(0, 3, 1, 2)  # n, w, c, h
        g_row = g.transpose(0, 2, 1, 3)  # n, h, c, w
        ga_col = np.matmul(v_col.transpose(0, 1, 3, 2), g_col)  # n, w, g, h
        ga_row_full = np.matmul(g_row.transpose(0, 1, 3, 2), v_row)  # n, h, w, v
        ga_row = np.take_along_axis(ga_row_full, idx, axis=3)  # n, h, w, w-1
        ga = np.concatenate([ga_col.transpose(0, 2, 3, 1), ga_row.transpose(0, 3, 1, 2)], axis=1)
        gv = np.matmul(g_col, a_col.transpose(0, 1, 3, 2)).transpose(0, 2, 3, 1)
        gv = gv + np.matmul(g_row, a_row).transpose(0, 2, 1, 3)
        return ga, gv

    return Node(out, (attn, v), "crisscross_aggregate", backward_fn)


def nonlocal_affinity(q: Node, k: Node) -> Node:
    """Dot-product logits against every pixel: N×(H·W)×H×W."""
    _check_qkv(q.value, k.value)
    n, cr, h, w = q.shape
    qf = q.value.reshape(n, cr, h * w)
    kf = k.value.reshape(n, cr, h * w)
    out = np.matmul(kf.transpose(0, 2, 1), qf)  # n, j, u

    def backward_fn(g):
        gf = g.reshape(n, h * w, h * w)
        gq = np.matmul(kf, gf).reshape(n, cr, h, w)
        gk = np.matmul(qf, gf.transpose(0, 2, 1)).reshape(n, cr, h, w)
        return gq, gk

    return Node(out.reshape(n, h * w, h, w), (q, k), "nonlocal_affinity", backward_fn)


def nonlocal_aggregate(attn: Node, v: Node) -> Node:
    n, c, h, w = v.shape
    if attn.shape != (n, h * w, h, w):
        raise ShapeError(f"attention {attn.shape} does not fit values {v.shape}")
    af = attn.value.reshape(n, h * w, h * w)
    vf = v.value.reshape(n, c, h * w)
    out = np.matmul(vf, af).reshape(n, c, h, w)

    def backward_fn(g):
        gf = g.reshape(n, c, h * w)
        ga = np.matmul(vf.transpose(0, 2, 1), gf).reshape(n, h * w, h, w)
        gv = np.matmul(gf, af.transpose(0, 2, 1)).reshape(n, c, h, w)
        return ga, gv

    return Node(out, (attn, v), "nonlocal_aggregate", backward_fn)


def _project(h: Node, w: CCAWeights):
    if h.value.ndim != 4 or h.shape[1] != w.channels:
        raise ShapeError(f"input {h.shape} does not match {w.channels}-channel attention weights")
    return T.conv2d(h, w.query), T.conv2d(h, w.key), T.conv2d(h, w.value)


def cca_forward(h: Node, w: CCAWeights) -> Tuple[Node, np.ndarray]:
    """One criss-cross attention pass with a residual connection.

    Returns the output node and the attention map (N×(H+W-1)×H×W).
    """
    q, k, v = _project(h, w)
    attn = T.softmax(crisscross_affinity(q, k), axis=1)
    out = T.add(crisscross_aggregate(attn, v), h)
    return out, attn.value


def rcca_forward(h: Node, w: CCAWeights, passes: int = 2) -> Node:
    """Recurrent criss-cross attention: ``passes`` applications with shared weights."""
    if passes < 1:
        raise ValueError(f"passes must be >= 1, got {passes}")
    out = h
    for _ in range(passes):
        out, _ = cca_forward(out, w)
    return out


def nonlocal_forward(h: Node, w: CCAWeights) -> Tuple[Node, np.ndarray]:
    """Dense attention over all H·W pixels; same projections and residual as CCA."""
    q, k, v = _project(h, w)
    attn = T.softmax(nonlocal_affinity(q, k), axis=1)
    out = T.add(nonlocal_aggregate(attn, v), h)
    return out, attn.value


def influence_map(
    forward_fn: Callable[[np.ndarray], np.ndarray],
    h: np.ndarray,
    source_pixel: Tuple[int, int],
    delta: float = 1e-3,
    tol: float = 1e-12,
) -> np.ndarray:
    """Boolean H×W map of output pixels that react to a nudge at ``source_pixel``.

    Each input channel at the source is perturbed by ``delta`` in turn; an
    output pixel is marked when any of its channels moves by more than ``tol``.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 4:
        raise ShapeError(f"expected N×C×H×W input, got {h.shape}")
    x, y = source_pixel
    if not (0 <= x < h.shape[3] and 0 <= y < h.shape[2]):
        raise ShapeError(f"source pixel {source_pixel} outside map {h.shape[2:]}")
    base = np.asarray(forward_fn(h))
    marked = np.zeros(base.shape[2:], dtype=bool)
    for c in range(h.shape[1]):
        bumped = h.copy()
        bumped[:, c, y, x] += delta
        moved = np.abs(np.asarray(forward_fn(bumped)) - base) > tol
        marked |= moved.any(axis=(0, 1))
    return marked


def attention_cost(H: int, W: int, C: int, Cr: int, kind: str) -> int:
    """Multiplies for affinity + aggregation in one pass, projections excluded."""
    if min(H, W, C, Cr) < 1:
        raise ValueError("dimensions must be positive")
    if kind == CRISSCROSS:
        return H * W * (H + W - 1) * (Cr + C)
    if kind == NONLOCAL:
        return H * W * H * W * (Cr + C)
    raise ValueError(f"unknown attention kind {kind!r}")


def benchmark(sizes, channels: int = 16, repeats: int = 3, seed: int = 0) -> List[dict]:
    """Forward wall time and op count for both attention kinds on 1×C×S×S maps.

    Call under a single-threaded BLAS for a fair ratio (see ``cli bench``).
    """
    rng = np.random.default_rng(seed)
    weights = CCAWeights.init(channels, rng)
    cr = reduced_channels(channels)
    rows = []
    for size in sizes:
        h = Node(rng.normal(size=(1, channels, size, size)))
        row = {"size": int(size), "channels": channels, "reduced_channels": cr}
        for kind, fn in ((CRISSCROSS, cca_forward), (NONLOCAL, nonlocal_forward)):
            best = float("inf")
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn(h, weights)
                best = min(best, time.perf_counter() - t0)
            row[f"{kind}_ops"] = attention_cost(size, size, channels, cr, kind)
            row[f"{kind}_seconds"] = best
        row["op_ratio"] = row["nonlocal_ops"] / row["crisscross_ops"]
        row["time_ratio"] = row["nonlocal_seconds"] / row["crisscross_seconds"]
        rows.append(row)
    return rows

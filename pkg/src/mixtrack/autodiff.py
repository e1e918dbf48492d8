"""Minimal dense-tensor numerics with reverse-mode differentiation.

Tensors wrap 64-bit numpy arrays in row-major H x W x C layout. Each op
builds the graph dynamically; ``Tensor.backward`` walks the recorded
nodes exactly once in reverse creation order. The op set is fixed to
what the rest of the package needs: channel selection, group shuffle,
depthwise/pointwise convolution, frozen-statistics channel norm,
rectifier, pooling, concat/split, cosine-similarity logits, row-wise
softmax cross entropy, ROI bilinear pooling, depthwise cross
correlation and the two task-loss reductions.

No broadcasting, no dynamic shapes: every op states its expected shapes
and raises ``ShapeError`` on mismatch. All forward math is pure; graphs
on different threads are independent, but a single backward pass is
single-writer.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GraphNode",
    "GradReport",
    "ShapeError",
    "GraphError",
    "DegenerateInputError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "tsum",
    "tmean",
    "relu",
    "vecmat",
    "matmul",
    "stack_rows",
    "transpose2d",
    "hadamard_select",
    "add_channel_bias",
    "channel_affine",
    "channel_shuffle",
    "depthwise_conv",
    "pointwise_conv",
    "channel_standardize",
    "global_mean_pool",
    "concat_channels",
    "split_channels",
    "cosine_similarity_matrix",
    "softmax_cross_entropy_rows",
    "roi_pool",
    "depthwise_xcorr",
    "score_map_divergence",
    "masked_l1",
    "grad_check",
    "same_pad_out",
]


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class GraphError(RuntimeError):
    """Graph-level contract violation (e.g. backward on a non-scalar)."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input (zero-norm row); caller decides the fix."""


_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional autodiff record."""

    __slots__ = ("data", "requires_grad", "grad", "_id", "_op", "_parents", "_params", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._id = next(_ids)
        self._op = "leaf"
        self._parents = ()
        self._params = None
        self._backward = None

    def __deepcopy__(self, memo):
        # Parameter copying: fresh leaf with its own id; graph state is not cloned.
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        memo[id(self)] = t
        return t

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def backward(self):
        """Reverse-mode pass seeding d(self)/d(self) = 1.

        Requires a scalar output. Clears stale gradients on the reachable
        subgraph first, then visits each recorded node exactly once in
        reverse creation order, accumulating into ``grad`` of the leaves.
        """
        if self.data.ndim != 0:
            raise GraphError(f"backward requires a scalar output, got shape {self.data.shape}")
        nodes = _reachable(self)
        for t in nodes:
            t.grad = None
        self.grad = np.ones((), dtype=np.float64)
        for t in sorted(nodes, key=lambda n: n._id, reverse=True):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)


def _reachable(root):
    """All grad-participating tensors reachable from ``root`` (iterative)."""
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        for p in t._parents:
            if p.requires_grad:
                stack.append(p)
    return list(seen.values())


def _make(data, op, parents, backward, params=None):
    """Assemble an op output; records the node only if a parent needs grad."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = op
        out._parents = tuple(parents)
        out._params = params
        out._backward = backward
    else:
        out._op = op
    return out


def _acc(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph trace + gradient checking


@dataclass
class GraphNode:
    op: str
    input_ids: tuple
    params: dict | None


@dataclass
class Graph:
    """Recorded trace of one scalar-valued evaluation of ``fn``.

    ``nodes`` lists the non-leaf ops in creation order, which for a
    dynamically built DAG is a valid topological order: every input id
    precedes its consumer.
    """

    fn: object
    nodes: list = field(default_factory=list)
    output_id: int | None = None

    def run(self, *inputs):
        out = self.fn(*inputs)
        if not isinstance(out, Tensor):
            raise GraphError("graph function must return a Tensor")
        recorded = [t for t in _reachable(out) if t._op != "leaf"]
        recorded.sort(key=lambda t: t._id)
        self.nodes = [GraphNode(t._op, tuple(p._id for p in t._parents), t._params) for t in recorded]
        self.output_id = out._id
        return out


@dataclass
class GradReport:
    """Per-input max relative error of reverse-mode vs central differences."""

    errors: dict
    tol: float

    @property
    def passed(self):
        return all(e <= self.tol for e in self.errors.values())

    def worst(self):
        return max(self.errors.values()) if self.errors else 0.0


def grad_check(graph, inputs, h=1e-4, tol=1e-5, names=None):
    """Compare analytic gradients of a scalar graph against central differences.

    ``graph`` is a Graph or a bare callable mapping the input tensors to a
    scalar Tensor. Relative error uses max(|analytic|, |numeric|, 1e-8) as
    denominator, reported per input as the max over coordinates.
    """
    fn = graph.fn if isinstance(graph, Graph) else graph
    g = graph if isinstance(graph, Graph) else Graph(fn)
    inputs = list(inputs)
    if names is None:
        names = [f"input{i}" for i in range(len(inputs))]

    out = g.run(*inputs)
    if out.data.ndim != 0:
        raise GraphError(f"grad_check requires a scalar output, got shape {out.data.shape}")
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad, copy=True) for t in inputs]

    errors = {}
    with no_grad():
        for name, t, a in zip(names, inputs, analytic):
            worst = 0.0
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(fn(*inputs).data)
                flat[i] = orig - h
                f_minus = float(fn(*inputs).data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a_i = float(a.reshape(-1)[i])
                denom = max(abs(a_i), abs(numeric), 1e-8)
                worst = max(worst, abs(a_i - numeric) / denom)
            errors[name] = worst
    return GradReport(errors=errors, tol=tol)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")

    def backward(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b):
    """Elementwise product of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")

    def backward(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _make(a.data * b.data, "mul", (a, b), backward)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        _acc(a, g * c)

    return _make(a.data * c, "scale", (a,), backward, {"c": c})


def tsum(a):
    a = _as_tensor(a)

    def backward(g):
        _acc(a, np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum()), "sum", (a,), backward)


def tmean(a):
    a = _as_tensor(a)
    n = a.data.size

    def backward(g):
        _acc(a, np.full_like(a.data, float(g) / n))

    return _make(np.asarray(a.data.mean()), "mean", (a,), backward)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _acc(a, g * mask)

    return _make(a.data * mask, "relu", (a,), backward)


# ---------------------------------------------------------------------------
# linear maps


def vecmat(v, w):
    """(L,) vector times (L, C) matrix -> (C,) vector."""
    v, w = _as_tensor(v), _as_tensor(w)
    if v.data.ndim != 1 or w.data.ndim != 2 or v.data.shape[0] != w.data.shape[0]:
        raise ShapeError(f"vecmat: shapes {v.data.shape} and {w.data.shape} incompatible")

    def backward(g):
        _acc(v, w.data @ g)
        _acc(w, np.outer(v.data, g))

    return _make(v.data @ w.data, "vecmat", (v, w), backward)


def stack_rows(vectors):
    """Stack equal-length 1-D tensors into a (b, C) matrix."""
    vectors = [_as_tensor(v) for v in vectors]
    if not vectors:
        raise ValueError("stack_rows: empty input list")
    n = vectors[0].data.shape
    if any(v.data.ndim != 1 or v.data.shape != n for v in vectors):
        raise ShapeError(f"stack_rows: all inputs must be 1-D of shape {n}")

    def backward(g):
        for i, v in enumerate(vectors):
            _acc(v, g[i])

    return _make(np.stack([v.data for v in vectors]), "stack_rows", tuple(vectors), backward)


def transpose2d(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d: expected a matrix, got shape {a.data.shape}")

    def backward(g):
        _acc(a, g.T)

    return _make(a.data.T.copy(), "transpose2d", (a,), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} incompatible")

    def backward(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _make(a.data @ b.data, "matmul", (a, b), backward)


# ---------------------------------------------------------------------------
# channel ops on H x W x C maps


def _check_fmap(x, op):
    if x.data.ndim != 3:
        raise ShapeError(f"{op}: expected an H x W x C map, got shape {x.data.shape}")


def hadamard_select(selector, fmap):
    """Per-channel reweighting: out[h,w,c] = selector[c] * fmap[h,w,c].

    ``selector`` is a (C,) or (1, C) vector; differentiable in both inputs.
    """
    selector, fmap = _as_tensor(selector), _as_tensor(fmap)
    _check_fmap(fmap, "hadamard_select")
    sel = selector.data.reshape(-1)
    if sel.ndim != 1 or sel.shape[0] != fmap.data.shape[2]:
        raise ShapeError(
            f"hadamard_select: selector shape {selector.data.shape} does not match "
            f"feature map shape {fmap.data.shape}"
        )

    def backward(g):
        _acc(selector, (g * fmap.data).sum(axis=(0, 1)).reshape(selector.data.shape))
        _acc(fmap, g * sel)

    return _make(fmap.data * sel, "hadamard_select", (selector, fmap), backward)


def add_channel_bias(fmap, bias):
    """out[h,w,c] = fmap[h,w,c] + bias[c]."""
    fmap, bias = _as_tensor(fmap), _as_tensor(bias)
    _check_fmap(fmap, "add_channel_bias")
    b = bias.data.reshape(-1)
    if b.shape[0] != fmap.data.shape[2]:
        raise ShapeError(
            f"add_channel_bias: bias shape {bias.data.shape} does not match map shape {fmap.data.shape}"
        )

    def backward(g):
        _acc(fmap, g)
        _acc(bias, g.sum(axis=(0, 1)).reshape(bias.data.shape))

    return _make(fmap.data + b, "add_channel_bias", (fmap, bias), backward)


def channel_affine(fmap, gamma, beta):
    """Per-channel scale and shift; the frozen-statistics normalization layer.

    Running statistics are pinned to identity (mean 0, var 1), so the layer
    reduces to out[h,w,c] = gamma[c] * fmap[h,w,c] + beta[c] and stays
    deterministic across batch compositions.
    """
    fmap, gamma, beta = _as_tensor(fmap), _as_tensor(gamma), _as_tensor(beta)
    _check_fmap(fmap, "channel_affine")
    gam = gamma.data.reshape(-1)
    bet = beta.data.reshape(-1)
    c = fmap.data.shape[2]
    if gam.shape[0] != c or bet.shape[0] != c:
        raise ShapeError(
            f"channel_affine: gamma {gamma.data.shape} / beta {beta.data.shape} do not match map {fmap.data.shape}"
        )

    def backward(g):
        _acc(fmap, g * gam)
        _acc(gamma, (g * fmap.data).sum(axis=(0, 1)).reshape(gamma.data.shape))
        _acc(beta, g.sum(axis=(0, 1)).reshape(beta.data.shape))

    return _make(fmap.data * gam + bet, "channel_affine", (fmap, gamma, beta), backward)


def _shuffle_perm(c, groups):
    return np.arange(c).reshape(groups, c // groups).T.reshape(-1)


def channel_shuffle(fmap, groups):
    """Group-transpose channel permutation; values preserved per spatial site."""
    fmap = _as_tensor(fmap)
    _check_fmap(fmap, "channel_shuffle")
    c = fmap.data.shape[2]
    if groups < 1 or c % groups != 0:
        raise ValueError(f"channel_shuffle: channel count {c} not divisible by groups {groups}")
    perm = _shuffle_perm(c, groups)

    def backward(g):
        gx = np.empty_like(g)
        gx[:, :, perm] = g
        _acc(fmap, gx)

    return _make(fmap.data[:, :, perm], "channel_shuffle", (fmap,), backward, {"groups": groups})


def concat_channels(parts):
    """Concatenate H x W x C_i maps (or 1-D vectors) along the channel axis."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channels: empty input list")
    axis = parts[0].data.ndim - 1
    sizes = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _acc(p, g[..., lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=axis), "concat_channels", tuple(parts), backward)


def split_channels(fmap, sizes):
    """Split along the channel axis into tensors with the given channel counts."""
    fmap = _as_tensor(fmap)
    if sum(sizes) != fmap.data.shape[-1]:
        raise ShapeError(f"split_channels: sizes {sizes} do not sum to channel count {fmap.data.shape[-1]}")
    outs = []
    lo = 0
    for s in sizes:
        lo_c, hi_c = lo, lo + s

        def backward(g, lo_c=lo_c, hi_c=hi_c):
            full = np.zeros_like(fmap.data)
            full[..., lo_c:hi_c] = g
            _acc(fmap, full)

        outs.append(
            _make(fmap.data[..., lo_c:hi_c].copy(), "split_channels", (fmap,), backward, {"lo": lo_c, "hi": hi_c})
        )
        lo += s
    return tuple(outs)


# ---------------------------------------------------------------------------
# convolutions and pooling


def same_pad_out(extent, stride):
    """Output extent of a same-padded convolution: ceil(extent / stride)."""
    return -(-extent // stride)


def _pad_amounts(extent, k, stride):
    out = same_pad_out(extent, stride)
    total = max((out - 1) * stride + k - extent, 0)
    return total // 2, total - total // 2


def depthwise_conv(fmap, weights, stride=1):
    """Per-channel k x k convolution with zero same-padding.

    ``weights`` has shape (k, k, C); stride 1 preserves the spatial extent,
    stride 2 halves it (ceil). Cross-correlation orientation (no kernel flip).
    """
    fmap, weights = _as_tensor(fmap), _as_tensor(weights)
    _check_fmap(fmap, "depthwise_conv")
    if weights.data.ndim != 3 or weights.data.shape[0] != weights.data.shape[1]:
        raise ShapeError(f"depthwise_conv: weights must be k x k x C, got {weights.data.shape}")
    k = weights.data.shape[0]
    h, w, c = fmap.data.shape
    if weights.data.shape[2] != c:
        raise ShapeError(f"depthwise_conv: weights {weights.data.shape} do not match map {fmap.data.shape}")
    if stride not in (1, 2):
        raise ValueError(f"depthwise_conv: stride must be 1 or 2, got {stride}")

    top, bot = _pad_amounts(h, k, stride)
    left, right = _pad_amounts(w, k, stride)
    xp = np.pad(fmap.data, ((top, bot), (left, right), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    out = np.einsum("hwcij,ijc->hwc", windows, weights.data)

    def backward(g):
        _acc(weights, np.einsum("hwcij,hwc->ijc", windows, g))
        gx = np.zeros_like(xp)
        oh, ow = g.shape[0], g.shape[1]
        for i in range(k):
            for j in range(k):
                gx[i : i + oh * stride : stride, j : j + ow * stride : stride] += g * weights.data[i, j]
        _acc(fmap, gx[top : top + h, left : left + w])

    return _make(out, "depthwise_conv", (fmap, weights), backward, {"k": k, "stride": stride})


def pointwise_conv(fmap, weights):
    """1 x 1 convolution: (H, W, Cin) with (Cin, Cout) -> (H, W, Cout)."""
    fmap, weights = _as_tensor(fmap), _as_tensor(weights)
    _check_fmap(fmap, "pointwise_conv")
    if weights.data.ndim != 2 or weights.data.shape[0] != fmap.data.shape[2]:
        raise ShapeError(f"pointwise_conv: weights {weights.data.shape} do not match map {fmap.data.shape}")

    def backward(g):
        _acc(fmap, g @ weights.data.T)
        h, w, cin = fmap.data.shape
        _acc(weights, fmap.data.reshape(-1, cin).T @ g.reshape(-1, weights.data.shape[1]))

    return _make(fmap.data @ weights.data, "pointwise_conv", (fmap, weights), backward)


def channel_standardize(fmap, eps=1e-6):
    """Zero-mean, unit-variance per channel over the spatial grid.

    A per-sample whitening step (no batch statistics): out[h,w,c] =
    (x[h,w,c] - mean_c) / sqrt(var_c + eps) with moments over H x W.
    """
    fmap = _as_tensor(fmap)
    _check_fmap(fmap, "channel_standardize")
    n = fmap.data.shape[0] * fmap.data.shape[1]
    mu = fmap.data.mean(axis=(0, 1))
    var = fmap.data.var(axis=(0, 1))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (fmap.data - mu) * inv

    def backward(g):
        gsum = g.sum(axis=(0, 1))
        gx = (g - gsum / n - xhat * (g * xhat).sum(axis=(0, 1)) / n) * inv
        _acc(fmap, gx)

    return _make(xhat, "channel_standardize", (fmap,), backward, {"eps": eps})


def global_mean_pool(fmap):
    """Mean over the spatial grid: (H, W, C) -> (C,)."""
    fmap = _as_tensor(fmap)
    _check_fmap(fmap, "global_mean_pool")
    h, w, _ = fmap.data.shape

    def backward(g):
        _acc(fmap, np.broadcast_to(g / (h * w), fmap.data.shape).copy())

    return _make(fmap.data.mean(axis=(0, 1)), "global_mean_pool", (fmap,), backward)


def roi_pool(fmap, box, grid=4):
    """Bilinear-sample a grid x grid lattice inside a normalized box, then mean.

    ``box`` is [cx, cy, w, h] in [0, 1] image coordinates (not a Tensor; the
    gradient flows into the feature map only). Sample points sit at cell
    centers; out-of-range points clamp to the border pixel centers.
    """
    fmap = _as_tensor(fmap)
    _check_fmap(fmap, "roi_pool")
    cx, cy, bw, bh = (float(v) for v in box)
    if bw <= 0 or bh <= 0:
        raise ValueError(f"roi_pool: degenerate box with w={bw}, h={bh}")
    if not (0 <= cx <= 1 and 0 <= cy <= 1 and bw <= 1 and bh <= 1):
        raise ValueError(f"roi_pool: box {box} outside the unit square")
    h, w, c = fmap.data.shape

    xs = cx - bw / 2 + (np.arange(grid) + 0.5) * bw / grid
    ys = cy - bh / 2 + (np.arange(grid) + 0.5) * bh / grid
    px = np.clip(xs * w - 0.5, 0.0, w - 1.0)
    py = np.clip(ys * h - 0.5, 0.0, h - 1.0)

    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = px - x0
    fy = py - y0

    yy0, xx0 = np.meshgrid(y0, x0, indexing="ij")
    yy1, xx1 = np.meshgrid(y1, x1, indexing="ij")
    fyy, fxx = np.meshgrid(fy, fx, indexing="ij")
    w00 = (1 - fyy) * (1 - fxx)
    w01 = (1 - fyy) * fxx
    w10 = fyy * (1 - fxx)
    w11 = fyy * fxx

    samples = (
        fmap.data[yy0, xx0] * w00[..., None]
        + fmap.data[yy0, xx1] * w01[..., None]
        + fmap.data[yy1, xx0] * w10[..., None]
        + fmap.data[yy1, xx1] * w11[..., None]
    )
    out = samples.mean(axis=(0, 1))

    def backward(g):
        gx = np.zeros_like(fmap.data)
        gs = g / (grid * grid)
        for gy in range(grid):
            for gxi in range(grid):
                gx[yy0[gy, gxi], xx0[gy, gxi]] += gs * w00[gy, gxi]
                gx[yy0[gy, gxi], xx1[gy, gxi]] += gs * w01[gy, gxi]
                gx[yy1[gy, gxi], xx0[gy, gxi]] += gs * w10[gy, gxi]
                gx[yy1[gy, gxi], xx1[gy, gxi]] += gs * w11[gy, gxi]
        _acc(fmap, gx)

    return _make(out, "roi_pool", (fmap,), backward, {"box": (cx, cy, bw, bh), "grid": grid})


def depthwise_xcorr(search, template):
    """Valid-mode per-channel correlation of ``template`` over ``search``.

    Output shape (Hs - Ht + 1, Ws - Wt + 1, C).
    """
    search, template = _as_tensor(search), _as_tensor(template)
    _check_fmap(search, "depthwise_xcorr")
    _check_fmap(template, "depthwise_xcorr")
    hs, ws, c = search.data.shape
    ht, wt, ct = template.data.shape
    if ct != c:
        raise ShapeError(f"depthwise_xcorr: channel counts differ ({c} vs {ct})")
    if ht > hs or wt > ws:
        raise ValueError(f"depthwise_xcorr: template {template.data.shape} larger than search {search.data.shape}")

    windows = np.lib.stride_tricks.sliding_window_view(search.data, (ht, wt), axis=(0, 1))
    out = np.einsum("hwcij,ijc->hwc", windows, template.data)

    def backward(g):
        _acc(template, np.einsum("hwcij,hwc->ijc", windows, g))
        gx = np.zeros_like(search.data)
        oh, ow = g.shape[0], g.shape[1]
        for i in range(ht):
            for j in range(wt):
                gx[i : i + oh, j : j + ow] += g * template.data[i, j]
        _acc(search, gx)

    return _make(out, "depthwise_xcorr", (search, template), backward)


# ---------------------------------------------------------------------------
# losses


def cosine_similarity_matrix(a, b):
    """Pairwise cosine similarities of rows: out[i, j] = cos(a_i, b_j).

    Raises DegenerateInputError on any zero-norm row rather than silently
    regularizing; the caller decides how to handle degenerate embeddings.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_similarity_matrix: shapes {a.data.shape} and {b.data.shape} must match (b x C)")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("cosine_similarity_matrix: zero-norm row")
    s = (a.data @ b.data.T) / np.outer(na, nb)

    def backward(g):
        gn = g / nb[None, :]
        _acc(a, (gn @ b.data) / na[:, None] - a.data * ((g * s).sum(axis=1) / na**2)[:, None])
        gm = g / na[:, None]
        _acc(b, (gm.T @ a.data) / nb[:, None] - b.data * ((g * s).sum(axis=0) / nb**2)[:, None])

    return _make(s, "cosine_similarity_matrix", (a, b), backward)


def softmax_cross_entropy_rows(logits, labels):
    """Mean over rows of -log softmax(row)[label]; labels are column indices."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy_rows: expected a 2-D logit matrix, got {logits.data.shape}")
    labels = np.asarray(labels, dtype=int)
    nrows, ncols = logits.data.shape
    if labels.shape != (nrows,):
        raise ValueError(f"softmax_cross_entropy_rows: need {nrows} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= ncols):
        raise ValueError(f"softmax_cross_entropy_rows: label out of range [0, {ncols})")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    picked = z[np.arange(nrows), labels]
    loss = float((lse - picked).mean())

    def backward(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(nrows), labels] -= 1.0
        _acc(logits, p * (float(g) / nrows))

    return _make(np.asarray(loss), "softmax_cross_entropy_rows", (logits,), backward, {"labels": labels.tolist()})


def _softplus(x):
    return np.logaddexp(0.0, x)


def score_map_divergence(logits, target):
    """Centered binary cross entropy of a score map against soft targets.

    Computes mean_cells[ softplus(z) - p z ] minus the entropy floor of the
    target, i.e. the KL divergence from the target blob to the predicted
    per-cell Bernoulli. Zero exactly when sigma(z) reproduces the target.
    """
    logits, target = _as_tensor(logits), _as_tensor(target)
    if logits.data.shape != target.data.shape:
        raise ShapeError(f"score_map_divergence: shapes {logits.data.shape} and {target.data.shape} differ")
    p = target.data
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("score_map_divergence: target values must lie in [0, 1]")
    z = logits.data
    bce = _softplus(z) - p * z
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where((p > 0) & (p < 1), -(p * np.log(p) + (1 - p) * np.log1p(-p)), 0.0)
    n = z.size

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        _acc(logits, (sig - p) * (float(g) / n))

    return _make(np.asarray((bce - ent).mean()), "score_map_divergence", (logits,), backward)


def masked_l1(pred, target, mask):
    """Mean absolute error over cells selected by a binary spatial mask.

    ``pred`` and ``target`` are (H, W, K); ``mask`` is (H, W) with at least
    one positive cell. Only ``pred`` receives gradient.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"masked_l1: shapes {pred.data.shape} and {target.data.shape} differ")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != pred.data.shape[:2]:
        raise ShapeError(f"masked_l1: mask shape {m.shape} does not match {pred.data.shape[:2]}")
    denom = m.sum() * pred.data.shape[2]
    if denom == 0:
        raise ValueError("masked_l1: mask selects no cells")
    diff = pred.data - target.data

    def backward(g):
        _acc(pred, np.sign(diff) * m[..., None] * (float(g) / denom))

    return _make(np.asarray((np.abs(diff) * m[..., None]).sum() / denom), "masked_l1", (pred,), backward)

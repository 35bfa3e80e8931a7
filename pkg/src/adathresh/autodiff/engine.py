"""Reverse-mode differentiation over a topologically ordered list of array operators.

A :class:`ToyGraph` is a Wengert list: every node names an operator, the
names of its inputs (graph inputs, parameters or earlier nodes) and constant
attributes. Evaluation walks the list forward; :func:`backward_grads` walks it
in reverse, calling each operator's vector-Jacobian product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..core import interp_matrix
from ..losses import depth_regression_arrays, uncertainty_nll_arrays
from ..refinement import LOG_SIGMA_CLAMP, pac_kernels, shift, window_offsets
from ..thresholding import BCE_CLAMP, sigmoid


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Op:
    forward: Callable
    vjp: Callable  # (grad_out, out, *inputs, **attrs) -> sequence of grads (None = no grad)


OPS: dict[str, Op] = {}


def register_op(name: str, forward: Callable, vjp: Callable) -> None:
    OPS[name] = Op(forward, vjp)


def _op(name):
    def deco(vjp):
        def wrap(forward):
            register_op(name, forward, vjp)
            return forward
        return wrap
    return deco


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _shape_check(cond, msg):
    if not cond:
        raise ValueError(msg)


# --- elementwise ----------------------------------------------------------------


def _add_vjp(g, out, a, b):
    return _unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))


@_op("add")(_add_vjp)
def _add(a, b):
    return np.add(a, b)


def _sub_vjp(g, out, a, b):
    return _unbroadcast(g, np.shape(a)), -_unbroadcast(g, np.shape(b))


@_op("sub")(_sub_vjp)
def _sub(a, b):
    return np.subtract(a, b)


def _mul_vjp(g, out, a, b):
    return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))


@_op("mul")(_mul_vjp)
def _mul(a, b):
    return np.multiply(a, b)


@_op("scale")(lambda g, out, x, factor: (g * factor,))
def _scale(x, factor):
    return x * factor


@_op("relu")(lambda g, out, x: (g * (x > 0),))
def _relu(x):
    return np.maximum(x, 0.0)


@_op("sigmoid")(lambda g, out, x: (g * out * (1.0 - out),))
def _sigmoid(x):
    return sigmoid(x)


@_op("softplus")(lambda g, out, x: (g * sigmoid(x),))
def _softplus(x):
    return np.logaddexp(0.0, x)


@_op("exp")(lambda g, out, x: (g * out,))
def _exp(x):
    return np.exp(x)


@_op("sum")(lambda g, out, x: (np.full(np.shape(x), float(g)),))
def _sum(x):
    return np.asarray(np.sum(x))


@_op("mean")(lambda g, out, x: (np.full(np.shape(x), float(g) / np.size(x)),))
def _mean(x):
    return np.asarray(np.mean(x))


def _concat_vjp(g, out, *xs, axis=1):
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, splits, axis=axis))


@_op("concat")(_concat_vjp)
def _concat(*xs, axis=1):
    return np.concatenate(xs, axis=axis)


# --- convolution and pooling ----------------------------------------------------------


def _im2col(x, k):
    """(N, C, H, W) -> zero-padded patches (N*H*W, k*k*C), ordered (ky, kx, C)."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H, W, C, k, k) view
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, k * k * c)


# patches are reused by sibling convs on one input and by the backward pass;
# keyed by identity, holding the array so its id cannot be recycled
_COLS: dict = {}
_COLS_MAX = 16


def _cols(x, k):
    hit = _COLS.get((id(x), k))
    if hit is not None and hit[0] is x:
        return hit[1]
    cols = _im2col(x, k)
    if len(_COLS) >= _COLS_MAX:
        del _COLS[next(iter(_COLS))]
    _COLS[(id(x), k)] = (x, cols)
    return cols


def _conv2d_vjp(g, out, x, w, b):
    o, k = w.shape[0], w.shape[-1]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (gm.T @ _cols(x, k)).reshape(o, k, k, x.shape[1]).transpose(0, 3, 1, 2)
    # input gradient: correlate g with the spatially flipped, channel-transposed kernel
    wf = w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * o, x.shape[1])
    n, c, h, wd = x.shape
    gx = (_im2col(g, k) @ wf).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    return gx, gw, gm.sum(axis=0)


@_op("conv2d")(_conv2d_vjp)
def _conv2d(x, w, b):
    """3x3 (any odd k) stride-1 zero-padded convolution (cross-correlation)."""
    _shape_check(x.ndim == 4, f"conv2d expects NCHW input, got {x.shape}")
    _shape_check(w.ndim == 4 and w.shape[1] == x.shape[1] and w.shape[2] == w.shape[3]
                 and w.shape[2] % 2 == 1,
                 f"conv2d weight {w.shape} incompatible with input {x.shape}")
    _shape_check(b.shape == (w.shape[0],), f"conv2d bias {b.shape} vs weight {w.shape}")
    n, _, h, wd = x.shape
    out = _cols(x, w.shape[-1]) @ w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1).T
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2) + b[None, :, None, None]


def _affine_vjp(g, out, x, w, b):
    gm = np.moveaxis(g, 1, -1)
    xm = np.moveaxis(x, 1, -1)
    gw = np.tensordot(gm, xm, axes=(list(range(gm.ndim - 1)), list(range(xm.ndim - 1))))
    gb = gm.reshape(-1, gm.shape[-1]).sum(axis=0)
    gx = np.moveaxis(gm @ w, -1, 1)
    return gx, gw, gb


@_op("affine")(_affine_vjp)
def _affine(x, w, b):
    """1x1 convolution / linear layer along axis 1."""
    _shape_check(x.ndim >= 2 and w.ndim == 2 and w.shape[1] == x.shape[1],
                 f"affine weight {w.shape} incompatible with input {x.shape}")
    _shape_check(b.shape == (w.shape[0],), f"affine bias {b.shape} vs weight {w.shape}")
    out = np.moveaxis(x, 1, -1) @ w.T + b
    return np.moveaxis(out, -1, 1)


def _gap_vjp(g, out, x):
    h, w = x.shape[-2:]
    return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)


@_op("global_avg_pool")(_gap_vjp)
def _gap(x):
    _shape_check(x.ndim == 4, f"global_avg_pool expects NCHW, got {x.shape}")
    return x.mean(axis=(2, 3))


def _pool_vjp(g, out, x):
    return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)


@_op("avg_pool2x")(_pool_vjp)
def _avg_pool2x(x):
    n, c, h, w = x.shape
    _shape_check(h % 2 == 0 and w % 2 == 0, f"avg_pool2x needs even spatial dims, got {x.shape}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _up_vjp(g, out, x):
    mh = interp_matrix(x.shape[-2], 2 * x.shape[-2])
    mw = interp_matrix(x.shape[-1], 2 * x.shape[-1])
    return (mh.T @ g @ mw,)


@_op("upsample2x")(_up_vjp)
def _upsample2x(x):
    """Corner-aligned bilinear upsampling to twice the spatial size."""
    mh = interp_matrix(x.shape[-2], 2 * x.shape[-2])
    mw = interp_matrix(x.shape[-1], 2 * x.shape[-1])
    return mh @ x @ mw.T


# --- task operators ------------------------------------------------------------------


def _soft_threshold_vjp(g, out, c, tau, epsilon=10.0):
    x = epsilon * (c - tau[:, :, None, None])
    local = epsilon * sigmoid(x) * sigmoid(-x)
    gc = g * local
    gt = -_unbroadcast(gc, (c.shape[0], c.shape[1], 1, 1)).reshape(tau.shape)
    return gc, gt


@_op("soft_threshold")(_soft_threshold_vjp)
def _soft_threshold(c, tau, epsilon=10.0):
    """c: (N, 1, H, W) confidence, tau: (N, 1) per-image threshold."""
    _shape_check(tau.shape == c.shape[:2], f"tau {tau.shape} does not match confidence {c.shape}")
    return sigmoid(epsilon * (c - tau[:, :, None, None]))


def _per_image(fn, d, pgt, w, mask):
    """Batch mean of a per-image loss; returns value and per-argument grads."""
    n = d.shape[0]
    vals, gds, gws = [], [], []
    for i in range(n):
        v, gd, gw = fn(d[i, 0], pgt[i, 0], w[i, 0], mask[i, 0].astype(bool))
        vals.append(v)
        gds.append(gd)
        gws.append(gw)
    gd = np.stack(gds)[:, None] / n
    gw = np.stack(gws)[:, None] / n
    return math.fsum(vals) / n, gd, gw


def _ld_vjp(g, out, d, pgt, ct, mask):
    _, gd, gc = _per_image(depth_regression_arrays, d, pgt, ct, mask)
    return g * gd, None, g * gc, None


@_op("depth_regression_loss")(_ld_vjp)
def _ld(d, pgt, ct, mask):
    _shape_check(d.shape == pgt.shape == ct.shape == mask.shape,
                 f"shape mismatch d{d.shape} pgt{pgt.shape} cT{ct.shape} mask{mask.shape}")
    return np.asarray(_per_image(depth_regression_arrays, d, pgt, ct, mask)[0])


def _lu_vjp(g, out, d, pgt, s, mask):
    _, gd, gs = _per_image(uncertainty_nll_arrays, d, pgt, s, mask)
    return g * gd, None, g * gs, None


@_op("uncertainty_nll")(_lu_vjp)
def _lu(d, pgt, s, mask):
    _shape_check(d.shape == pgt.shape == s.shape == mask.shape,
                 f"shape mismatch d{d.shape} pgt{pgt.shape} s{s.shape} mask{mask.shape}")
    return np.asarray(_per_image(uncertainty_nll_arrays, d, pgt, s, mask)[0])


def _bce_vjp(g, out, ct, y, mask):
    m = mask.astype(bool)
    c = np.clip(ct, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (ct > BCE_CLAMP) & (ct < 1.0 - BCE_CLAMP)
    gc = np.where(m & inside, (c - y) / (c * (1.0 - c)) / m.sum(), 0.0)
    return g * gc, None, None


@_op("bce")(_bce_vjp)
def _bce(ct, y, mask):
    """Mean binary cross-entropy over all labeled pixels of the batch."""
    _shape_check(ct.shape == y.shape == mask.shape,
                 f"shape mismatch cT{ct.shape} y{y.shape} mask{mask.shape}")
    m = mask.astype(bool)
    if not m.any():
        raise ValueError("no supervised pixels")
    c = np.clip(ct, BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = -(y * np.log(c) + (1.0 - y) * np.log1p(-c))
    return np.asarray(math.fsum(terms[m].tolist()) / m.sum())


def _blend_parts(s, k):
    sc = np.clip(s, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
    sigma = np.exp(sc)
    gate = np.exp(-sigma / k)
    return sc, sigma, gate


def _blend_vjp(g, out, d, dp, s, k=1.0):
    sc, sigma, gate = _blend_parts(s, k)
    inside = (s > -LOG_SIGMA_CLAMP) & (s < LOG_SIGMA_CLAMP)
    dgate_ds = -gate * sigma / k * inside
    return g * gate, g * (1.0 - gate), g * (d - dp) * dgate_ds


@_op("residual_blend")(_blend_vjp)
def _blend(d, dp, s, k=1.0):
    _shape_check(d.shape == dp.shape == s.shape, f"shape mismatch d{d.shape} d'{dp.shape} s{s.shape}")
    _, _, gate = _blend_parts(s, k)
    return gate * d + (1.0 - gate) * dp


def _guidance(*feats_and_mix, window=3):
    *feats, mix = feats_and_mix
    h, w = feats[0].shape[-2:]
    ups = []
    for f in feats:
        mh = interp_matrix(f.shape[-2], h)
        mw = interp_matrix(f.shape[-1], w)
        ups.append(mh @ f @ mw.T)
    cat = np.concatenate(ups, axis=1)
    _shape_check(mix.shape[1] == cat.shape[1],
                 f"guidance mix {mix.shape} vs {cat.shape[1]} concatenated channels")
    g = np.moveaxis(np.moveaxis(cat, 1, -1) @ mix.T, -1, 1)
    return pac_kernels(g, window)


# guidance is treated as a constant: no gradient flows back into the encoder
register_op("guidance_kernels", _guidance, lambda g, out, *xs, window=3: (None,) * len(xs))


def _pac_vjp(g, out, d, kern, w, b):
    win = w.shape[0]
    r = win // 2
    gd = np.zeros_like(d)
    gw = np.zeros_like(w)
    for o, (dy, dx) in enumerate(window_offsets(win)):
        ko = kern[:, o:o + 1]
        gw[dy + r, dx + r] = np.sum(g * ko * shift(d, dy, dx))
        gd += shift(g * ko * w[dy + r, dx + r], -dy, -dx)
    return gd, None, gw, np.array([g.sum()])


@_op("pac")(_pac_vjp)
def _pac(d, kern, w, b):
    """d: (N, 1, H, W); kern: (N, k*k, H, W) guidance affinities; w: (k, k); b: (1,)."""
    win = w.shape[0]
    _shape_check(kern.shape == (d.shape[0], win * win) + d.shape[2:],
                 f"PAC kernels {kern.shape} do not match depth {d.shape} / window {win}")
    out = np.full(d.shape, float(b[0]))
    r = win // 2
    for o, (dy, dx) in enumerate(window_offsets(win)):
        out += kern[:, o:o + 1] * w[dy + r, dx + r] * shift(d, dy, dx)
    return out


# --- graph -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple[str, ...]
    attrs: dict = field(default_factory=dict)


@dataclass
class ToyGraph:
    nodes: list[Node]
    params: dict[str, np.ndarray]
    input_names: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        known = set(self.input_names)
        if known & set(self.params):
            raise GraphError(f"names used as both input and parameter: {known & set(self.params)}")
        known |= set(self.params)
        for node in self.nodes:
            if node.op not in OPS:
                raise GraphError(f"node {node.name!r}: unknown operator {node.op!r}")
            missing = [i for i in node.inputs if i not in known]
            if missing:
                raise GraphError(f"node {node.name!r}: undefined inputs {missing} "
                                 "(graph must be topologically ordered)")
            if node.name in known:
                raise GraphError(f"duplicate name {node.name!r}")
            known.add(node.name)

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def with_params(self, params: dict[str, np.ndarray]) -> "ToyGraph":
        return ToyGraph(self.nodes, params, self.input_names, self.seed)


def _ancestors(graph: ToyGraph, outputs, pinned=()) -> list[Node]:
    """Nodes that ``outputs`` depend on; pinned nodes cut the walk and are left out."""
    need = set(outputs)
    keep = []
    for node in reversed(graph.nodes):
        if node.name in need and node.name not in pinned:
            keep.append(node)
            need.update(node.inputs)
    return keep[::-1]


def forward_eval(graph: ToyGraph, inputs: dict[str, np.ndarray], outputs=None) -> dict[str, np.ndarray]:
    """Evaluate the graph; returns the inputs plus every computed node value.

    With ``outputs`` given, only their ancestors are evaluated. A node whose
    name appears in ``inputs`` is pinned to that value (and not differentiated).
    """
    missing = [n for n in graph.input_names if n not in inputs]
    nodes = graph.nodes if outputs is None else _ancestors(graph, outputs, inputs)
    nodes = [n for n in nodes if n.name not in inputs]
    needed = {i for n in nodes for i in n.inputs}
    missing = [n for n in missing if n in needed]
    if missing:
        raise GraphError(f"unbound graph inputs: {missing}")
    env = dict(graph.params)
    env.update(inputs)
    result = dict(inputs)
    for node in nodes:
        try:
            val = OPS[node.op].forward(*(env[i] for i in node.inputs), **node.attrs)
        except GraphError:
            raise
        except (ValueError, IndexError) as exc:
            raise GraphError(f"node {node.name!r} ({node.op}): {exc}") from exc
        env[node.name] = val
        result[node.name] = val
    return result


def backward_grads(graph: ToyGraph, inputs: dict[str, np.ndarray], loss_node: str,
                   wrt_inputs=(), values=None) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss_node`` w.r.t. every parameter and the requested inputs."""
    nodes = _ancestors(graph, [loss_node], inputs)
    if values is None:
        values = forward_eval(graph, inputs, outputs=[loss_node])
    loss = values[loss_node]
    if np.size(loss) != 1:
        raise GraphError(f"loss node {loss_node!r} is not scalar (shape {np.shape(loss)})")
    env = dict(graph.params)
    env.update(values)
    adj: dict[str, np.ndarray] = {loss_node: np.ones_like(np.asarray(loss, dtype=np.float64))}
    for node in reversed(nodes):
        g = adj.pop(node.name, None)
        if g is None:
            continue
        args = [env[i] for i in node.inputs]
        grads = OPS[node.op].vjp(g, env[node.name], *args, **node.attrs)
        for name, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if name in adj:
                adj[name] = adj[name] + gi
            else:
                adj[name] = np.asarray(gi, dtype=np.float64)
    out = {p: adj.get(p, np.zeros_like(v)) for p, v in graph.params.items()}
    for name in wrt_inputs:
        out[name] = adj.get(name, np.zeros_like(np.asarray(inputs[name], dtype=np.float64)))
    return out


# ops with a kink, and how to read the sign pattern that locates it
_KINKS = {
    "relu": lambda x, *_: x > 0,
    "depth_regression_loss": lambda d, pgt, *_: d > pgt,
    "uncertainty_nll": lambda d, pgt, *_: d > pgt,
}


def _kink_pattern(graph: ToyGraph, values) -> list[np.ndarray]:
    env = {**graph.params, **values}
    out = []
    for node in graph.nodes:
        if node.op in _KINKS and node.name in values:
            out.append(_KINKS[node.op](*(env[i] for i in node.inputs)))
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int  # samples whose stencil crossed a kink


def grad_check_report(graph: ToyGraph, inputs: dict[str, np.ndarray], loss_node: str,
                      samples: int = 20, step: float = 1e-5, seed: int = 0,
                      params=None) -> GradCheckReport:
    """Compare analytic and central-difference gradients at random parameter entries.

    Relative error is |a - n| / max(|a|, |n|); pairs where both magnitudes are
    below 1e-10 count as exact. A sample whose +-step evaluations flip the sign
    pattern of any relu input or L1 residual straddles a kink, where central
    differences are meaningless; it is skipped and another entry is drawn (at
    most ``4 * samples`` draws in total).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    values = forward_eval(graph, inputs)
    grads = backward_grads(graph, inputs, loss_node)
    base = _kink_pattern(graph, values)
    names = sorted(params if params is not None else graph.params)
    sizes = np.array([graph.params[n].size for n in names], dtype=float)
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    while checked < samples and checked + skipped < 4 * samples:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = np.unravel_index(rng.integers(graph.params[name].size), graph.params[name].shape)
        vals, crossed = [], False
        for sgn in (1.0, -1.0):
            p = {k: v.copy() if k == name else v for k, v in graph.params.items()}
            p[name][idx] += sgn * step
            g = graph.with_params(p)
            out = forward_eval(g, inputs)
            crossed |= any(not np.array_equal(a, b) for a, b in zip(base, _kink_pattern(g, out)))
            vals.append(float(out[loss_node]))
        if crossed:
            skipped += 1
            continue
        checked += 1
        num = (vals[0] - vals[1]) / (2 * step)
        ana = float(grads[name][idx])
        scale = max(abs(num), abs(ana))
        if scale < 1e-10:
            continue
        worst = max(worst, abs(num - ana) / scale)
    return GradCheckReport(worst, checked, skipped)


def grad_check(graph: ToyGraph, inputs: dict[str, np.ndarray], loss_node: str,
               samples: int = 20, step: float = 1e-5, seed: int = 0, params=None) -> float:
    """Worst relative error from :func:`grad_check_report`."""
    return grad_check_report(graph, inputs, loss_node, samples, step, seed, params).max_rel_error


# --- optimisers --------------------------------------------------------------------------


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float = 1e-4):
    if lr <= 0:
        raise ValueError("lr must be positive")
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is not None and np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {k!r} {p.shape}")
        out[k] = p - lr * g if g is not None else p
    return out


class Adam:
    """Adam with bias correction; holds its own moment buffers."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self.m.get(k, np.zeros_like(p)) * b1 + (1 - b1) * g
            v = self.v.get(k, np.zeros_like(p)) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - b1 ** self.t)
            vh = v / (1 - b2 ** self.t)
            out[k] = p - self.lr * mh / (np.sqrt(vh) + self.eps)
        return out

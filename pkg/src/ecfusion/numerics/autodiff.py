"""Reverse-mode differentiation over float64 numpy arrays.

A :class:`Node` holds a forward value and, after :func:`backward`, the
accumulated gradient of a scalar loss. Ops record their parents and a
closure mapping the output gradient to parent gradients. Nodes that do
not depend on any ``requires_grad`` leaf record nothing, so frozen
sub-graphs cost only their forward pass.

All convolutions use zero padding of ``(k - 1) // 2`` so spatial extents
are preserved.
"""
from __future__ import annotations

import numpy as np

from . import kernels


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self)


def leaf(value, requires_grad=True, name=None):
    return Node(np.array(value, dtype=np.float64), requires_grad=requires_grad, name=name)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _make(value, parents, backward_fn):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Node(value, True, parents, backward_fn)
    return Node(value)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.value.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = gp if k not in grads else grads[k] + gp


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b):
    a, b = as_node(a), as_node(b)
    out = a.value / b.value
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)))


def neg(a):
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def layer_scale_add(a, b, scale):
    """Residual update ``a + scale * b`` with a constant ``scale``."""
    a, b = as_node(a), as_node(b)
    return _make(a.value + scale * b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(scale * g, b.shape)))


def power(a, p):
    a = as_node(a)
    av = a.value
    return _make(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_node(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def abs_(a):
    a = as_node(a)
    sg = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g: (g * sg,))


def relu(a):
    a = as_node(a)
    on = a.value > 0
    return _make(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


def sigmoid(a):
    a = as_node(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def pointwise(a, which):
    if which == "relu":
        return relu(as_node(a))
    if which == "sigmoid":
        return sigmoid(as_node(a))
    raise ValueError(f"unknown pointwise op {which!r}")


# -- reductions and shape ----------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_node(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_node(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_node(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a):
    a = as_node(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([n.value for n in nodes], axis=axis), nodes,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def index(a, key):
    a = as_node(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.value[key], (a,), bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), bw)


def softmax(a, axis=-1):
    a = as_node(a)
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a, axis=-1):
    a = as_node(a)
    x = a.value
    s = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    a, gamma, beta = as_node(a), as_node(gamma), as_node(beta)
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xh = xc * rstd
    gv = gamma.value

    def bw(g):
        gxh = g * gv
        n = x.shape[-1]
        gx = rstd / n * (n * gxh - gxh.sum(-1, keepdims=True)
                         - xh * (gxh * xh).sum(-1, keepdims=True))
        gg = (g * xh).reshape(-1, n).sum(0)
        gb = g.reshape(-1, n).sum(0)
        return gx, gg, gb

    return _make(xh * gv + beta.value, (a, gamma, beta), bw)


# -- spatial -----------------------------------------------------------------

def _conv_forward(x, w):
    X, Y, _ = x.shape
    k = w.shape[0]
    r = k // 2
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    out = np.zeros((X, Y, w.shape[3]))
    for a in range(k):
        for b in range(k):
            out += xp[a:a + X, b:b + Y] @ w[a, b]
    return out


def conv2d(x, w, b):
    """Same-size 2-D cross-correlation: ``x[X,Y,Cin] * w[k,k,Cin,Cout] + b[Cout]``."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    if x.ndim != 3 or w.ndim != 4 or b.ndim != 1:
        raise ValueError(f"conv2d expects x[X,Y,Cin], w[k,k,Cin,Cout], b[Cout]; got {x.shape}, {w.shape}, {b.shape}")
    k = w.shape[0]
    if w.shape[1] != k or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square with odd size, got {w.shape[:2]}")
    if w.shape[2] != x.shape[2]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[2]}, kernel expects {w.shape[2]}")
    if b.shape[0] != w.shape[3]:
        raise ValueError(f"conv2d bias has {b.shape[0]} entries, kernel outputs {w.shape[3]}")
    xv, wv = x.value, w.value
    X, Y, _ = xv.shape
    r = k // 2

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            # full correlation with the flipped, transposed kernel
            gx = _conv_forward(g, wv[::-1, ::-1].transpose(0, 1, 3, 2))
        if w.requires_grad:
            xp = np.pad(xv, ((r, r), (r, r), (0, 0)))
            gf = g.reshape(X * Y, -1)
            gw = np.empty_like(wv)
            for a in range(k):
                for bb in range(k):
                    gw[a, bb] = xp[a:a + X, bb:bb + Y].reshape(X * Y, -1).T @ gf
        if b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(0)
        return gx, gw, gb

    return _make(_conv_forward(xv, wv) + b.value, (x, w, b), bw)


def sample(feature, pos):
    """Bilinear samples of ``feature[X,Y,C]`` at real ``pos[N,2]`` (row, col).

    Corners outside the grid read as zero. Differentiable w.r.t. both
    the feature values and the positions.
    """
    feature, pos = as_node(feature), as_node(pos)
    fv = np.ascontiguousarray(feature.value)
    pv = np.ascontiguousarray(pos.value)

    def bw(g):
        gf, gp = kernels.sample_backward(fv, pv, np.ascontiguousarray(g))
        return gf, gp

    return _make(kernels.sample_forward(fv, pv), (feature, pos), bw)


def warp(feature, flow):
    """``out[p] = sample(feature, p + flow[p])`` for every cell ``p``."""
    feature, flow = as_node(feature), as_node(flow)
    X, Y, C = feature.shape
    if flow.shape != (X, Y, 2):
        raise ValueError(f"flow shape {flow.shape} does not match feature grid {(X, Y)}")
    ii, jj = np.meshgrid(np.arange(X, dtype=np.float64), np.arange(Y, dtype=np.float64), indexing="ij")
    base = np.stack([ii, jj], axis=-1).reshape(-1, 2)
    pos = add(reshape(flow, (X * Y, 2)), base)
    return reshape(sample(feature, pos), (X, Y, C))


def cost_volume(ha, hb, q):
    """``out[i,j,(m+q/2)*q+(n+q/2)] = <ha[i,j], hb[i+m,j+n]>``, zero off-grid."""
    ha, hb = as_node(ha), as_node(hb)
    if ha.shape != hb.shape:
        raise ValueError(f"cost volume heatmaps differ in shape: {ha.shape} vs {hb.shape}")
    av = np.ascontiguousarray(ha.value)
    bv = np.ascontiguousarray(hb.value)

    def bw(g):
        return kernels.cost_volume_backward(av, bv, q, np.ascontiguousarray(g))

    return _make(kernels.cost_volume_forward(av, bv, q), (ha, hb), bw)

"""Set-prediction transformer decoder over the unified queries.

Each layer runs multi-head self-attention among the queries, multi-head
cross-attention from the queries to every fused BEV cell (cell feature
plus its positional code), then a two-layer FFN; each sub-block is a
residual update followed by layer norm. Linear heads map the final query
features to a planar box and ``N_c + 1`` class logits (last = background).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dqr import encoding_grid

BOX_DIM = 6  # dx, dy, log w, log l, sin, cos


@dataclass
class DecoderParams:
    n_layers: int
    n_heads: int
    dim: int
    ffn_dim: int
    n_classes: int
    p: dict

    @classmethod
    def init(cls, rng, n_classes, dim=32, n_layers=2, n_heads=4, ffn_dim=64, size_prior=(3.0, 3.0)):
        if dim % n_heads:
            raise ValueError(f"model width {dim} is not divisible by {n_heads} heads")

        def lin(fan_in, fan_out):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            return nx.leaf(rng.uniform(-a, a, (fan_in, fan_out)))

        p = {}
        for l in range(n_layers):
            for blk in ("sa", "ca"):
                for m in ("q", "k", "v", "o"):
                    p[f"l{l}.{blk}.w{m}"] = lin(dim, dim)
                    p[f"l{l}.{blk}.b{m}"] = nx.leaf(np.zeros(dim))
            p[f"l{l}.ffn.w1"] = lin(dim, ffn_dim)
            p[f"l{l}.ffn.b1"] = nx.leaf(np.zeros(ffn_dim))
            p[f"l{l}.ffn.w2"] = lin(ffn_dim, dim)
            p[f"l{l}.ffn.b2"] = nx.leaf(np.zeros(dim))
            for n in ("n1", "n2", "n3"):
                p[f"l{l}.{n}.g"] = nx.leaf(np.ones(dim))
                p[f"l{l}.{n}.b"] = nx.leaf(np.zeros(dim))
        p["box.w"] = nx.leaf(rng.normal(0.0, 0.01, (dim, BOX_DIM)))
        p["box.b"] = nx.leaf(np.array([0.0, 0.0, np.log(size_prior[0]), np.log(size_prior[1]), 0.0, 1.0]))
        p["cls.w"] = nx.leaf(rng.normal(0.0, 0.01, (dim, n_classes + 1)))
        p["cls.b"] = nx.leaf(np.zeros(n_classes + 1))
        return cls(n_layers, n_heads, dim, ffn_dim, n_classes, p)

    def named(self, prefix="decoder."):
        return {prefix + k: v for k, v in self.p.items()}


@dataclass
class BoxPred:
    center: tuple[float, float]
    size: tuple[float, float]
    heading: tuple[float, float]  # (sin, cos), unit length
    class_logits: np.ndarray
    query_source: str

    @property
    def probs(self):
        e = np.exp(self.class_logits - self.class_logits.max())
        return e / e.sum()

    @property
    def label(self):
        return int(np.argmax(self.probs[:-1]))

    @property
    def confidence(self):
        return float(self.probs[:-1].max())

    @property
    def theta(self):
        return float(np.arctan2(*self.heading))


@dataclass
class DecoderOutput:
    center: nx.Node  # [K, 2] cells
    size_raw: nx.Node  # [K, 2] log sizes
    heading: nx.Node  # [K, 2] raw (sin, cos)
    logits: nx.Node  # [K, N_c + 1]
    sources: list
    attention: list  # per layer (self, cross) attention weights, values only

    def boxes(self):
        c = self.center.value
        s = np.exp(self.size_raw.value)
        h = self.heading.value
        out = []
        for k in range(c.shape[0]):
            n = np.hypot(h[k, 0], h[k, 1])
            hk = (h[k, 0] / n, h[k, 1] / n) if n > 0 else (0.0, 1.0)
            out.append(BoxPred((float(c[k, 0]), float(c[k, 1])), (float(s[k, 0]), float(s[k, 1])),
                               hk, self.logits.value[k].copy(), self.sources[k]))
        return out


def attention(xq, xkv, p, pre, n_heads):
    nq, dim = xq.shape
    nk = xkv.shape[0]
    d = dim // n_heads

    def heads(x, n):
        return nx.transpose(nx.reshape(x, (n, n_heads, d)), (1, 0, 2))

    q = heads(xq @ p[pre + "wq"] + p[pre + "bq"], nq)
    k = heads(xkv @ p[pre + "wk"] + p[pre + "bk"], nk)
    v = heads(xkv @ p[pre + "wv"] + p[pre + "bv"], nk)
    a = nx.softmax(nx.matmul(q, nx.swap_last(k)) * (1.0 / np.sqrt(d)), axis=-1)
    o = nx.reshape(nx.transpose(nx.matmul(a, v), (1, 0, 2)), (nq, dim))
    return o @ p[pre + "wo"] + p[pre + "bo"], a.value


def decode_raw(queries, b_f, params):
    """Differentiable decoder pass; see :func:`decode` for the box view."""
    feats = queries.features
    if feats.shape[1] != params.dim:
        raise ValueError(f"query width {feats.shape[1]} does not match decoder width {params.dim}")
    b_f = nx.as_node(b_f)
    X, Y, C = b_f.shape
    if C != params.dim:
        raise ValueError(f"BEV width {C} does not match decoder width {params.dim}")
    p = params.p
    mem = nx.reshape(b_f, (X * Y, C)) + encoding_grid(X, Y, C)
    x = feats
    attn = []
    for l in range(params.n_layers):
        pre = f"l{l}."
        sa, a_s = attention(x, x, p, pre + "sa.", params.n_heads)
        x = nx.layer_norm(x + sa, p[pre + "n1.g"], p[pre + "n1.b"])
        ca, a_c = attention(x, mem, p, pre + "ca.", params.n_heads)
        x = nx.layer_norm(x + ca, p[pre + "n2.g"], p[pre + "n2.b"])
        h = nx.relu(x @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]) @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        x = nx.layer_norm(x + h, p[pre + "n3.g"], p[pre + "n3.b"])
        attn.append((a_s, a_c))
    box = x @ p["box.w"] + p["box.b"]
    logits = x @ p["cls.w"] + p["cls.b"]
    center = box[:, 0:2] + queries.positions.astype(np.float64)
    return DecoderOutput(center, box[:, 2:4], box[:, 4:6], logits, queries.sources, attn)


def decode(queries, b_f, params):
    """One BoxPred per query, in query order."""
    return decode_raw(queries, b_f, params).boxes()


def write_predictions_csv(path, boxes):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source", "cx", "cy", "w", "l", "theta", "class", "confidence"])
        for b in boxes:
            w.writerow([b.query_source, f"{b.center[0]:.6f}", f"{b.center[1]:.6f}", f"{b.size[0]:.6f}",
                        f"{b.size[1]:.6f}", f"{b.theta:.6f}", b.label, f"{b.confidence:.6f}"])

"""Dissolved-query recovery.

Fusion queries come from the top local maxima of the fusion heatmap. Their
cells are masked out (all classes at once) in the LiDAR and camera
heatmaps, and extra queries are drawn from what survives, so the
single-modal queries can only land where the fusion queries did not.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import kernels

SOURCES = ("F", "P", "I")


@dataclass(frozen=True)
class QueryCandidate:
    pos: tuple[int, int]
    cls: int
    score: float
    source: str = "F"
    degenerate: bool = False


@dataclass
class QuerySet:
    candidates: list[QueryCandidate]
    features: nx.Node  # [K_F + K_P + K_I, C]
    counts: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.candidates)

    @property
    def positions(self):
        return np.array([c.pos for c in self.candidates], dtype=np.int64).reshape(-1, 2)

    @property
    def sources(self):
        return [c.source for c in self.candidates]


def _ranked(h, peak, eligible=None):
    X, Y, K = h.shape
    ii, jj, cc = np.indices(h.shape)
    keys = [jj.ravel(), ii.ravel(), cc.ravel(), -h.ravel(), ~peak.ravel()]
    if eligible is not None:
        keys.append(~eligible.ravel())
    # lexsort: last key is primary -> (eligible, peak, score desc, cls, i, j)
    return np.lexsort(keys)


def _candidates(h, order, k, source, eligible=None):
    X, Y, K = h.shape
    out = []
    for flat in order[:k]:
        i, rem = divmod(int(flat), Y * K)
        j, c = divmod(rem, K)
        bad = eligible is not None and not eligible[i, j, c]
        out.append(QueryCandidate((i, j), c, 0.0 if bad else float(h[i, j, c]), source, bad))
    return out


def select_topk_peaks(h, k, window=3, source="F"):
    """``k`` best cells of ``h[X, Y, N_c]``: local maxima first, then the rest.

    A cell is a peak when no cell of its (border-truncated) ``window`` x
    ``window`` neighbourhood in the same class channel is larger. Ranking is
    score descending, ties by ``(cls, i, j)`` ascending.
    """
    h = np.ascontiguousarray(nx.value_of(h))
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > h.size:
        raise ValueError(f"k={k} exceeds the {h.size} cells x classes of the heatmap")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    peak = kernels.local_max(h, window)
    return _candidates(h, _ranked(h, peak), k, source)


def build_fusion_mask(p_f, X, Y):
    """``[X, Y]`` mask: 0 at every cell holding a fusion query, 1 elsewhere."""
    m = np.ones((X, Y))
    for c in p_f:
        m[c.pos] = 0.0
    return m


def recover_modal_queries(h_z, m, k_z, window=3, source="P"):
    """Top-``k_z`` peaks of ``h_z * m`` restricted to unmasked cells.

    Masked cells are only used when too few unmasked (cell, class) entries
    remain; those candidates carry score 0 and ``degenerate=True``.
    """
    if k_z == 0:
        return []
    h = nx.value_of(h_z)
    if h.shape[:2] != m.shape:
        raise ValueError(f"mask shape {m.shape} does not match heatmap {h.shape[:2]}")
    if k_z > h.size:
        raise ValueError(f"k={k_z} exceeds the {h.size} cells x classes of the heatmap")
    hm = np.ascontiguousarray(h * m[:, :, None])
    eligible = np.broadcast_to((m != 0)[:, :, None], h.shape)
    peak = kernels.local_max(hm, window)
    return _candidates(hm, _ranked(hm, peak, eligible), k_z, source, eligible)


def positional_encoding(pos, C, X, Y):
    """Sinusoidal code of cell ``pos = (i, j)``: first half from i/X, second from j/Y."""
    return encode_positions(np.array([pos[0]]), np.array([pos[1]]), C, X, Y)[0]


def encode_positions(ii, jj, C, X, Y):
    if C % 2:
        raise ValueError(f"positional encoding needs an even width, got {C}")
    half = C // 2
    k = np.arange(half)
    freq = 10000.0 ** (-2.0 * (k // 2) / half)
    is_sin = (k % 2) == 0

    def band(u):
        ang = 2 * np.pi * np.asarray(u, dtype=np.float64)[:, None] * freq
        return np.where(is_sin, np.sin(ang), np.cos(ang))

    return np.concatenate([band(np.asarray(ii) / X), band(np.asarray(jj) / Y)], axis=1)


def encoding_grid(X, Y, C):
    """Positional codes for every cell, ``[X*Y, C]`` in row-major cell order."""
    ii, jj = np.meshgrid(np.arange(X), np.arange(Y), indexing="ij")
    return encode_positions(ii.ravel(), jj.ravel(), C, X, Y)


def assemble_queries(p_f, p_p, p_i, b_f, b_p, b_i):
    """Unified query set: each query is its source map's feature at its cell plus the cell's code."""
    groups = [(p_f, nx.as_node(b_f), "F"), (p_p, nx.as_node(b_p), "P"), (p_i, nx.as_node(b_i), "I")]
    X, Y, C = groups[0][1].shape
    cands, feats = [], []
    for cs, b, tag in groups:
        if not cs:
            continue
        cs = [c if c.source == tag else QueryCandidate(c.pos, c.cls, c.score, tag, c.degenerate) for c in cs]
        pos = np.array([c.pos for c in cs])
        pe = encode_positions(pos[:, 0], pos[:, 1], C, X, Y)
        feats.append(nx.index(b, (pos[:, 0], pos[:, 1])) + pe)
        cands.extend(cs)
    features = nx.concat(feats, axis=0) if feats else nx.Node(np.zeros((0, C)))
    counts = {"F": len(p_f), "P": len(p_p), "I": len(p_i)}
    return QuerySet(cands, features, counts)


def write_queries_csv(path, queries):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source", "i", "j", "cls", "score"])
        for c in queries.candidates:
            w.writerow([c.source, c.pos[0], c.pos[1], c.cls, f"{c.score:.6f}"])

"""Semantic-guided flow alignment of LiDAR and camera BEV features.

Cross-modal cost volumes compare each cell's class heatmap vector with the
other modality's vectors in a ``q x q`` window; a small conv block turns
features plus cost volumes into one flow field per modality; each feature
map is bilinearly warped by its flow, and the aligned pair is fused by a
3x3 conv.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .grid import check_window

FLOW_HIDDEN = 32


@dataclass
class SfaParams:
    flow_w1: nx.Node
    flow_b1: nx.Node
    flow_w2: nx.Node
    flow_b2: nx.Node
    fuse_w: nx.Node
    fuse_b: nx.Node

    @classmethod
    def init(cls, rng, channels, q, hidden=FLOW_HIDDEN):
        cin = 2 * channels + 2 * q * q
        # the flow head's last layer starts at zero: initial flow is exactly 0
        return cls(
            flow_w1=nx.leaf(rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, hidden))),
            flow_b1=nx.leaf(np.zeros(hidden)),
            flow_w2=nx.leaf(np.zeros((3, 3, hidden, 4))),
            flow_b2=nx.leaf(np.zeros(4)),
            fuse_w=nx.leaf(rng.normal(0.0, np.sqrt(1.0 / (9 * 2 * channels)), (3, 3, 2 * channels, channels))),
            fuse_b=nx.leaf(np.zeros(channels)),
        )

    def named(self, prefix="sfa."):
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def channels(self):
        return self.fuse_w.shape[3]

    @property
    def q(self):
        cin = self.flow_w1.shape[2]
        return int(round(np.sqrt((cin - 2 * self.channels) / 2)))


def compute_cost_volumes(h_p, h_i, q):
    """Cost volumes centred on LiDAR cells (vs camera) and on camera cells (vs LiDAR)."""
    h_p, h_i = nx.as_node(h_p), nx.as_node(h_i)
    if h_p.shape != h_i.shape:
        raise ValueError(f"heatmap shapes differ: {h_p.shape} vs {h_i.shape}")
    check_window(q, h_p.shape[0], h_p.shape[1])
    return nx.cost_volume(h_p, h_i, q), nx.cost_volume(h_i, h_p, q)


def estimate_flow(b_p, c_p, b_i, c_i, params):
    x = nx.concat([b_p, c_p, b_i, c_i], axis=-1)
    want = params.flow_w1.shape[2]
    if x.shape[2] != want:
        raise ValueError(f"flow block expects {want} input channels (2C + 2q^2), got {x.shape[2]}")
    hid = nx.relu(nx.conv2d(x, params.flow_w1, params.flow_b1))
    out = nx.conv2d(hid, params.flow_w2, params.flow_b2)
    return out[:, :, 0:2], out[:, :, 2:4]


def warp(feature, flow):
    return nx.warp(feature, flow)


def fuse(b_p_aligned, b_i_aligned, params):
    b_p_aligned, b_i_aligned = nx.as_node(b_p_aligned), nx.as_node(b_i_aligned)
    if b_p_aligned.shape != b_i_aligned.shape:
        raise ValueError(f"fusion inputs differ in shape: {b_p_aligned.shape} vs {b_i_aligned.shape}")
    return nx.conv2d(nx.concat([b_p_aligned, b_i_aligned], axis=-1), params.fuse_w, params.fuse_b)


@dataclass
class Alignment:
    fused: nx.Node
    flow_p: nx.Node | None
    flow_i: nx.Node | None
    aligned_p: nx.Node
    aligned_i: nx.Node


def align_and_fuse(b_p, b_i, h_p, h_i, params, q, enabled=True):
    """Full alignment block. ``enabled=False`` is plain concat + conv fusion."""
    b_p, b_i = nx.as_node(b_p), nx.as_node(b_i)
    if not enabled:
        return Alignment(fuse(b_p, b_i, params), None, None, b_p, b_i)
    c_p, c_i = compute_cost_volumes(h_p, h_i, q)
    flow_p, flow_i = estimate_flow(b_p, c_p, b_i, c_i, params)
    a_p = warp(b_p, flow_p)
    a_i = warp(b_i, flow_i)
    return Alignment(fuse(a_p, a_i, params), flow_p, flow_i, a_p, a_i)

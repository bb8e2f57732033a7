"""Training objective.

Heatmap targets are Gaussians splatted at object centres (CenterNet-style
radius rule); heatmaps are trained with the penalty-reduced focal loss.
Decoder outputs are matched one-to-one to ground truth by min-cost
assignment; every query gets a classification term (unmatched ones
target the background logit) and matched queries get an L1 box term.

Ground-truth boxes are any objects exposing ``center`` (x, y), ``size``
(w, l), ``theta`` and ``cls``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import kernels

FOCAL_ALPHA = 2
FOCAL_BETA = 4
MIN_OVERLAP = 0.1
MIN_RADIUS = 2
LAMBDA_CLS = 1.0
LAMBDA_BOX = 0.25
CLS_GAMMA = 2.0


# -- heatmap targets and focal loss -----------------------------------------

def gaussian_radius(w, l, min_overlap=MIN_OVERLAP):
    """Largest centre shift keeping IoU >= ``min_overlap`` (min of the three corner cases)."""
    b1 = w + l
    c1 = w * l * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + np.sqrt(b1 ** 2 - 4 * c1)) / 2
    b2 = 2 * (w + l)
    c2 = (1 - min_overlap) * w * l
    r2 = (b2 + np.sqrt(b2 ** 2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (w + l)
    c3 = (min_overlap - 1) * w * l
    r3 = (b3 + np.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def splat_radius(w, l):
    return max(MIN_RADIUS, int(gaussian_radius(l, w)))


def draw_gaussian(hm, ci, cj, r):
    """Max-splat a radius-``r`` Gaussian (sigma = (2r+1)/6) at cell (ci, cj) of 2-D ``hm``."""
    X, Y = hm.shape
    sigma = (2 * r + 1) / 6.0
    d = np.arange(-r, r + 1)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma * sigma))
    i0, i1 = max(0, ci - r), min(X, ci + r + 1)
    j0, j1 = max(0, cj - r), min(Y, cj + r + 1)
    if i0 >= i1 or j0 >= j1:
        return hm
    patch = g[i0 - ci + r:i1 - ci + r, j0 - cj + r:j1 - cj + r]
    np.maximum(hm[i0:i1, j0:j1], patch, out=hm[i0:i1, j0:j1])
    return hm


def center_cell(center):
    return int(np.floor(center[0])), int(np.floor(center[1]))


def gaussian_gt_map(boxes, X, Y, n_classes):
    hm = np.zeros((X, Y, n_classes))
    for b in boxes:
        ci, cj = center_cell(b.center)
        plane = np.ascontiguousarray(hm[:, :, b.cls])
        hm[:, :, b.cls] = draw_gaussian(plane, ci, cj, splat_radius(*b.size))
    return hm


def gaussian_focal_loss(pred, gt, mask=None, alpha=FOCAL_ALPHA, beta=FOCAL_BETA):
    """Penalty-reduced focal loss, normalised by the number of peak (==1) cells.

    With ``mask`` ([X, Y], broadcast over classes) the target is multiplied
    by it first, so masked cells become pure negatives.
    """
    pred = nx.as_node(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and target {gt.shape} differ in shape")
    pv = pred.value
    if np.any(pv <= 0.0) or np.any(pv >= 1.0):
        raise ValueError("focal loss needs predictions strictly inside (0, 1)")
    if mask is not None:
        gt = gt * np.asarray(mask, dtype=np.float64)[:, :, None]
    pos = (gt == 1.0).astype(np.float64)
    neg_w = (1.0 - gt) ** beta * (1.0 - pos)
    n_pos = max(pos.sum(), 1.0)
    one_minus = 1.0 - pred
    pos_term = nx.sum_(nx.log(pred) * one_minus ** alpha * pos)
    neg_term = nx.sum_(nx.log(one_minus) * pred ** alpha * neg_w)
    return (pos_term + neg_term) * (-1.0 / n_pos)


# -- matching -----------------------------------------------------------------

def box_vector(center, size, heading, X, Y):
    """Normalised (cx/X, cy/Y, w/X, l/Y, sin, cos)."""
    return np.array([center[0] / X, center[1] / Y, size[0] / X, size[1] / Y, heading[0], heading[1]])


def gt_vector(box, X, Y):
    return box_vector(box.center, box.size, (np.sin(box.theta), np.cos(box.theta)), X, Y)


def matching_cost(pred, gt, X, Y, lambda_cls=LAMBDA_CLS, lambda_box=LAMBDA_BOX):
    """Cost of assigning BoxPred ``pred`` to ground-truth ``gt`` on an X x Y grid."""
    pv = box_vector(pred.center, pred.size, pred.heading, X, Y)
    return lambda_cls * (1.0 - pred.probs[gt.cls]) + lambda_box * np.abs(pv - gt_vector(gt, X, Y)).sum()


def cost_matrix(boxes, gts, X, Y, lambda_cls=LAMBDA_CLS, lambda_box=LAMBDA_BOX):
    if not boxes or not gts:
        return np.zeros((len(boxes), len(gts)))
    pv = np.stack([box_vector(b.center, b.size, b.heading, X, Y) for b in boxes])
    probs = np.stack([b.probs for b in boxes])
    gv = np.stack([gt_vector(g, X, Y) for g in gts])
    cls = np.array([g.cls for g in gts])
    l1 = np.abs(pv[:, None, :] - gv[None, :, :]).sum(-1)
    return lambda_cls * (1.0 - probs[:, cls]) + lambda_box * l1


@dataclass
class Assignment:
    pairs: list  # (prediction index, gt index), ascending prediction index

    def __len__(self):
        return len(self.pairs)

    def gt_of(self):
        return {p: g for p, g in self.pairs}


def _reroute(match, owner, adm, r, c, locked_rows):
    """Force row ``r`` onto column ``c`` by an alternating path; True on success."""
    old = match[r]
    r2 = owner[c]
    if r2 < locked_rows:
        return False
    match[r], owner[c] = c, r
    owner[old] = -1
    seen = set()

    def dfs(row):
        for col in np.flatnonzero(adm[row]):
            if col == c or col in seen:
                continue
            seen.add(col)
            if owner[col] == -1 or (owner[col] > locked_rows and dfs(owner[col])):
                match[row], owner[col] = col, row
                return True
        return False

    if dfs(r2):
        return True
    match[r], owner[c], owner[old] = old, r2, r
    match[r2] = c
    return False


def hungarian_match(cost):
    """Minimum-cost assignment of rows (predictions) to columns (ground truth).

    Rectangular inputs match ``min(P, G)`` pairs. Among co-optimal
    assignments the lexicographically smallest sorted pair list is returned:
    an optimal dual solution fixes the set of edges any optimal matching may
    use, and rows are then pinned greedily to their smallest usable column.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return Assignment([])
    if not np.all(np.isfinite(cost)):
        raise ValueError("assignment costs must be finite")
    P, G = cost.shape
    n = max(P, G)
    sq = np.zeros((n, n))
    sq[:P, :G] = cost
    match, u, v = kernels.linear_assignment(sq)
    match = [int(c) for c in match]
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    adm = (sq - u[:, None] - v[None, :]) <= tol
    owner = [-1] * n
    for r, c in enumerate(match):
        owner[c] = r
    for r in range(min(P, n)):
        for c in np.flatnonzero(adm[r]):
            if c == match[r]:
                break
            if _reroute(match, owner, adm, r, int(c), r):
                break
    return Assignment([(r, match[r]) for r in range(P) if match[r] < G])


# -- losses ---------------------------------------------------------------------

def _pred_box_matrix(out, X, Y):
    size = nx.exp(out.size_raw)
    scale = np.array([1.0 / X, 1.0 / Y])
    return nx.concat([out.center * scale, size * scale, out.heading], axis=1)


def detection_loss_parts(out, gts, assignment, X, Y, gamma=CLS_GAMMA):
    """(classification, regression) terms, each normalised by max(1, #GT)."""
    K = out.logits.shape[0]
    n_cls = out.logits.shape[1] - 1
    norm = 1.0 / max(1, len(gts))
    if K == 0:
        zero = nx.Node(0.0)
        return zero, zero
    target = np.full(K, n_cls)
    for p, g in assignment.pairs:
        target[p] = gts[g].cls
    logp = nx.index(nx.log_softmax(out.logits, axis=1), (np.arange(K), target))
    pt = nx.exp(logp)
    cls_term = nx.sum_((1.0 - pt) ** gamma * logp) * (-norm)
    if not assignment.pairs:
        return cls_term, nx.Node(0.0)
    rows = np.array([p for p, _ in assignment.pairs])
    tgt = np.stack([gt_vector(gts[g], X, Y) for _, g in assignment.pairs])
    pred = nx.index(_pred_box_matrix(out, X, Y), rows)
    box_term = nx.sum_(nx.abs_(pred - tgt)) * norm
    return cls_term, box_term


def detection_loss(out, gts, assignment, X, Y, w_cls=LAMBDA_CLS, w_box=LAMBDA_BOX):
    cls_term, box_term = detection_loss_parts(out, gts, assignment, X, Y)
    return cls_term * w_cls + box_term * w_box


def total_loss(l_det, l_hf, l_hp, l_hi):
    return nx.as_node(l_det) + l_hf + l_hp + l_hi

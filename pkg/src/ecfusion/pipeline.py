"""Model assembly, two-stage training and evaluation.

Forward pass: per-modality heatmap heads on the raw BEV features, flow
alignment and fusion, a fusion heatmap head, query selection with
dissolved-query recovery, and the decoder, all in one graph. Training
first fits the LiDAR and camera heads on their own visible-object targets,
then trains the alignment block, fusion head and decoder on the full loss
with the single-modal heads frozen (unless ``freeze_heads`` is off).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nx
from .decoder import DecoderParams, decode_raw
from .dqr import assemble_queries, build_fusion_mask, recover_modal_queries, select_topk_peaks
from .objective import (
    cost_matrix,
    detection_loss_parts,
    gaussian_focal_loss,
    gaussian_gt_map,
    hungarian_match,
    total_loss,
)
from .sfa import SfaParams, align_and_fuse
from .synth import BUCKETS, ConflictConfig, GridConfig, generate_scene, gt_subsets, query_coverage, \
    render_camera, render_lidar, scene_seeds

log = logging.getLogger(__name__)

HEAD_PRIOR = 0.1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage1_steps: int = 300
    stage2_steps: int = 600
    batch: int = 1
    lr: float = 1e-3
    seed: int = 0
    k_f: int = 20
    k_p: int = 5
    k_i: int = 5
    q: int = 4
    w_cls: float = 1.0
    w_box: float = 0.25
    n_train: int = 200
    n_eval: int = 50
    sfa: bool = True
    freeze_heads: bool = True
    flow_hidden: int = 32
    dec_layers: int = 2
    dec_heads: int = 4
    ffn_dim: int = 64

    def __post_init__(self):
        for f in ("stage1_steps", "stage2_steps", "k_p", "k_i", "n_train", "n_eval"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")
        for f in ("batch", "k_f", "q", "flow_hidden", "dec_layers", "dec_heads", "ffn_dim"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.q % 2:
            raise ValueError(f"cost-volume window q must be even, got {self.q}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")


@dataclass(frozen=True)
class EvalThresholds:
    min_conf: float = 0.05  # predictions below this are discarded for AP
    ap_radii: tuple = (1.0, 2.0, 4.0)
    recall_conf: float = 0.3
    recall_radius: float = 2.0
    center_radius: float = 4.0


@dataclass
class Head:
    w: nx.Node
    b: nx.Node

    @classmethod
    def init(cls, rng, channels, n_classes):
        w = rng.normal(0.0, np.sqrt(1.0 / (9 * channels)), (3, 3, channels, n_classes))
        b = np.full(n_classes, -math.log((1 - HEAD_PRIOR) / HEAD_PRIOR))
        return cls(nx.leaf(w), nx.leaf(b))

    def __call__(self, x):
        return nx.sigmoid(nx.conv2d(x, self.w, self.b))


@dataclass
class ModelParams:
    head_p: Head
    head_i: Head
    head_f: Head
    sfa: SfaParams
    decoder: DecoderParams

    @classmethod
    def init(cls, rng, grid, cfg):
        return cls(
            head_p=Head.init(rng.child(1), grid.channels, grid.n_classes),
            head_i=Head.init(rng.child(2), grid.channels, grid.n_classes),
            head_f=Head.init(rng.child(3), grid.channels, grid.n_classes),
            sfa=SfaParams.init(rng.child(4), grid.channels, cfg.q, cfg.flow_hidden),
            decoder=DecoderParams.init(rng.child(5), grid.n_classes, dim=grid.channels, n_layers=cfg.dec_layers,
                                       n_heads=cfg.dec_heads, ffn_dim=cfg.ffn_dim),
        )

    def named(self):
        out = {}
        for name in ("head_p", "head_i", "head_f"):
            h = getattr(self, name)
            out[f"{name}.w"] = h.w
            out[f"{name}.b"] = h.b
        out.update(self.sfa.named())
        out.update(self.decoder.named())
        return out

    def group(self, *prefixes):
        return {k: v for k, v in self.named().items() if k.startswith(prefixes)}

    def arrays(self):
        return {k: v.value.copy() for k, v in self.named().items()}

    def load_arrays(self, arrays):
        named = self.named()
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        if missing or extra:
            raise ValueError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, node in named.items():
            if arrays[k].shape != node.shape:
                raise ValueError(f"tensor {k!r}: checkpoint shape {arrays[k].shape} != model shape {node.shape}")
            node.value[...] = arrays[k]


@dataclass
class Forward:
    h_p: nx.Node
    h_i: nx.Node
    h_f: nx.Node
    queries: object
    out: object
    align: object
    mask: np.ndarray
    selection: tuple

    @property
    def boxes(self):
        return self.out.boxes()


def forward(b_p, b_i, params, cfg, selection=None):
    """Full model. ``selection=(p_f, p_p, p_i)`` reuses earlier query picks."""
    b_p, b_i = nx.as_node(b_p), nx.as_node(b_i)
    X, Y, _ = b_p.shape
    h_p = params.head_p(b_p)
    h_i = params.head_i(b_i)
    al = align_and_fuse(b_p, b_i, h_p, h_i, params.sfa, cfg.q, enabled=cfg.sfa)
    h_f = params.head_f(al.fused)
    if selection is None:
        p_f = select_topk_peaks(h_f, cfg.k_f, source="F")
        mask = build_fusion_mask(p_f, X, Y)
        p_p = recover_modal_queries(h_p, mask, cfg.k_p, source="P")
        p_i = recover_modal_queries(h_i, mask, cfg.k_i, source="I")
    else:
        p_f, p_p, p_i = selection
        mask = build_fusion_mask(p_f, X, Y)
    queries = assemble_queries(p_f, p_p, p_i, al.fused, b_p, b_i)
    out = decode_raw(queries, al.fused, params.decoder)
    return Forward(h_p, h_i, h_f, queries, out, al, mask, (p_f, p_p, p_i))


@dataclass
class SceneData:
    scene: object
    b_p: np.ndarray
    b_i: np.ndarray
    t_p: np.ndarray
    t_i: np.ndarray
    t_f: np.ndarray


def render_scene(seed, grid, conflict):
    scene = generate_scene(seed, grid, conflict)
    b_p, t_p = render_lidar(scene, grid, conflict)
    b_i, t_i = render_camera(scene, grid, conflict)
    t_f = gaussian_gt_map(scene.objects, grid.X, grid.Y, grid.n_classes)
    return SceneData(scene, b_p, b_i, t_p, t_i, t_f)


def losses(fw, data, cfg, assignment=None):
    """Dict of loss Nodes: det, hf, hp, hi, total (plus the assignment used)."""
    X, Y = data.t_f.shape[:2]
    gts = data.scene.objects
    if assignment is None:
        assignment = hungarian_match(cost_matrix(fw.boxes, gts, X, Y))
    cls_term, box_term = detection_loss_parts(fw.out, gts, assignment, X, Y)
    l_det = cls_term * cfg.w_cls + box_term * cfg.w_box
    l_hf = gaussian_focal_loss(fw.h_f, data.t_f)
    l_hp = gaussian_focal_loss(fw.h_p, data.t_p, fw.mask)
    l_hi = gaussian_focal_loss(fw.h_i, data.t_i, fw.mask)
    return {"det": l_det, "hf": l_hf, "hp": l_hp, "hi": l_hi,
            "total": total_loss(l_det, l_hf, l_hp, l_hi), "assignment": assignment}


def _set_trainable(params, names):
    for k, node in params.named().items():
        node.requires_grad = k in names
        node.grad = None


def _check_finite(step, values):
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDiverged(f"non-finite loss ({', '.join(bad)}) at step {step}")


def _scene_order(seed, n, steps, batch):
    """Deterministic per-epoch shuffles of scene indices, ``steps * batch`` long."""
    out = []
    epoch = 0
    while len(out) < steps * batch:
        out.extend(int(i) for i in nx.Rng(seed, 7, epoch).permutation(n))
        epoch += 1
    return out


def stage2_trainable(params, cfg):
    names = set(params.group("sfa.", "head_f.", "decoder."))
    if not cfg.sfa:
        names -= set(params.group("sfa.flow_"))
    if not cfg.freeze_heads:
        names |= set(params.group("head_p.", "head_i."))
    return names


def train(cfg, grid=GridConfig(), conflict=ConflictConfig(), params=None, on_step=None):
    """Two-stage training. Returns ``(params, history)``; history rows are dicts
    with step, stage, L_det, L_HF, L_HP, L_HI, total."""
    rng = nx.Rng(cfg.seed)
    if params is None:
        params = ModelParams.init(rng.child(0), grid, cfg)
    seeds = scene_seeds(cfg.seed, 0, cfg.n_train)
    history = []
    if (cfg.stage1_steps or cfg.stage2_steps) and not seeds:
        raise ValueError("training needs n_train >= 1")

    names = set(params.group("head_p.", "head_i."))
    _set_trainable(params, names)
    opt = nx.Adam({k: v for k, v in params.named().items() if k in names}, lr=cfg.lr)
    order = _scene_order(cfg.seed, len(seeds), cfg.stage1_steps, cfg.batch) if cfg.stage1_steps else []
    for step in range(cfg.stage1_steps):
        opt.zero_grad()
        acc = {"hp": 0.0, "hi": 0.0}
        for b in range(cfg.batch):
            d = render_scene(seeds[order[step * cfg.batch + b]], grid, conflict)
            l_hp = gaussian_focal_loss(params.head_p(d.b_p), d.t_p)
            l_hi = gaussian_focal_loss(params.head_i(d.b_i), d.t_i)
            nx.backward((l_hp + l_hi) * (1.0 / cfg.batch))
            acc["hp"] += l_hp.item() / cfg.batch
            acc["hi"] += l_hi.item() / cfg.batch
        row = {"step": step, "stage": 1, "L_det": 0.0, "L_HF": 0.0, "L_HP": acc["hp"], "L_HI": acc["hi"],
               "total": acc["hp"] + acc["hi"]}
        _check_finite(step, row)
        opt.step()
        history.append(row)
        if on_step:
            on_step(row)

    names = stage2_trainable(params, cfg)
    _set_trainable(params, names)
    opt = nx.Adam({k: v for k, v in params.named().items() if k in names}, lr=cfg.lr)
    order = _scene_order(cfg.seed + 1, len(seeds), cfg.stage2_steps, cfg.batch) if cfg.stage2_steps else []
    for s in range(cfg.stage2_steps):
        step = cfg.stage1_steps + s
        opt.zero_grad()
        acc = dict.fromkeys(("det", "hf", "hp", "hi", "total"), 0.0)
        for b in range(cfg.batch):
            d = render_scene(seeds[order[s * cfg.batch + b]], grid, conflict)
            fw = forward(d.b_p, d.b_i, params, cfg)
            o = fw.out
            if not all(np.all(np.isfinite(t.value)) for t in (o.center, o.size_raw, o.heading, o.logits)):
                raise TrainingDiverged(f"non-finite decoder outputs at step {step}")
            ls = losses(fw, d, cfg)
            nx.backward(ls["total"] * (1.0 / cfg.batch))
            for k in acc:
                acc[k] += ls[k].item() / cfg.batch
        row = {"step": step, "stage": 2, "L_det": acc["det"], "L_HF": acc["hf"], "L_HP": acc["hp"],
               "L_HI": acc["hi"], "total": acc["total"]}
        _check_finite(step, row)
        opt.step()
        history.append(row)
        if on_step:
            on_step(row)
    _set_trainable(params, set())
    return params, history


# -- evaluation -----------------------------------------------------------------

def average_precision(preds, gts, radius):
    """Centre-distance AP for one class.

    ``preds``: list of (scene index, confidence, (x, y)); ``gts``: dict scene
    index -> list of (x, y). Predictions are taken in descending confidence
    (ties: scene, then list order) and each claims the nearest unclaimed GT
    within ``radius``. AP is the area under the monotone precision envelope
    over the recall steps. Returns nan when there is no GT.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return float("nan")
    order = sorted(range(len(preds)), key=lambda k: (-preds[k][1], preds[k][0], k))
    claimed = {s: np.zeros(len(v), dtype=bool) for s, v in gts.items()}
    tp = np.zeros(len(order))
    for r, k in enumerate(order):
        s, _, (x, y) = preds[k]
        g = np.asarray(gts.get(s, []), dtype=np.float64).reshape(-1, 2)
        if len(g) == 0:
            continue
        d = np.hypot(g[:, 0] - x, g[:, 1] - y)
        d[claimed[s]] = np.inf
        j = int(np.argmin(d))
        if d[j] <= radius:
            claimed[s][j] = True
            tp[r] = 1
    if len(order) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def center_errors(scene, boxes, conf, radius):
    """Distances of greedy (by confidence) prediction->GT matches within ``radius``."""
    cand = sorted((b for b in boxes if b.confidence >= conf), key=lambda b: -b.confidence)
    g = np.array([o.center for o in scene.objects]).reshape(-1, 2)
    free = np.ones(len(g), dtype=bool)
    out = []
    for b in cand:
        if not free.any():
            break
        d = np.hypot(g[:, 0] - b.center[0], g[:, 1] - b.center[1])
        d[~free] = np.inf
        j = int(np.argmin(d))
        if d[j] <= radius:
            free[j] = False
            out.append(float(d[j]))
    return out


def evaluate_predictions(scenes, boxes_per_scene, n_classes, th=EvalThresholds(), queries_per_scene=None):
    """Metrics from already-decoded predictions; see :func:`evaluate`."""
    if not scenes:
        raise ValueError("evaluation needs at least one scene")
    metrics = {}
    aps = []
    for c in range(n_classes):
        preds = [(s, b.confidence, b.center) for s, boxes in enumerate(boxes_per_scene)
                 for b in boxes if b.label == c and b.confidence >= th.min_conf]
        gts = {s: [o.center for o in sc.objects if o.cls == c] for s, sc in enumerate(scenes)}
        per_r = [average_precision(preds, gts, r) for r in th.ap_radii]
        valid = [a for a in per_r if not math.isnan(a)]
        metrics[f"AP_cls{c}"] = float(np.mean(valid)) if valid else float("nan")
        aps.extend(valid)
    metrics["mAP"] = float(np.mean(aps)) if aps else float("nan")
    tot = {b: [0, 0] for b in BUCKETS}
    errs = []
    for sc, boxes in zip(scenes, boxes_per_scene):
        for b, v in gt_subsets(sc, boxes, th.recall_radius, th.recall_conf).items():
            tot[b][0] += v["hits"]
            tot[b][1] += v["total"]
        errs.extend(center_errors(sc, boxes, th.recall_conf, th.center_radius))
    for b, (h, n) in tot.items():
        metrics[f"recall_{b}"] = h / n if n else float("nan")
        metrics[f"count_{b}"] = n
    uh = tot["lidar_only"][0] + tot["camera_only"][0]
    un = tot["lidar_only"][1] + tot["camera_only"][1]
    metrics["recall_unique"] = uh / un if un else float("nan")
    metrics["center_error"] = float(np.mean(errs)) if errs else float("nan")
    metrics["n_matched"] = len(errs)
    if queries_per_scene is not None:
        gtp = gti = 0
        for sc, q in zip(scenes, queries_per_scene):
            cov = query_coverage(sc, q.candidates, th.recall_radius)
            gtp += len(cov["P"] - cov["F"])
            gti += len(cov["I"] - cov["F"])
        metrics["gt_tilde_p"] = gtp
        metrics["gt_tilde_i"] = gti
    return metrics


def evaluate(params, scene_seed_list, cfg, grid=GridConfig(), conflict=ConflictConfig(), th=EvalThresholds(),
             keep=False):
    """Centre-distance mAP (mean over classes and radii), per-class AP, bucket
    recalls, matched centre error and recovered-GT counts.

    With ``keep`` the per-scene forward results are returned too.
    """
    if not scene_seed_list:
        raise ValueError("evaluation needs at least one scene")
    scenes, boxes, queries, kept = [], [], [], []
    for sd in scene_seed_list:
        d = render_scene(sd, grid, conflict)
        fw = forward(d.b_p, d.b_i, params, cfg)
        scenes.append(d.scene)
        boxes.append(fw.boxes)
        queries.append(fw.queries)
        if keep:
            kept.append((d, fw))
    m = evaluate_predictions(scenes, boxes, grid.n_classes, th, queries)
    return (m, kept) if keep else m


def eval_seeds(cfg):
    return scene_seeds(cfg.seed, 1, cfg.n_eval)


def config_fields(cls):
    return [f.name for f in fields(cls)]

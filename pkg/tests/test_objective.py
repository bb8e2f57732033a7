import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np
import pytest

from ecfusion import numerics as nx
from ecfusion.decoder import BoxPred, DecoderOutput
from ecfusion.objective import (cost_matrix, detection_loss, detection_loss_parts, draw_gaussian, gaussian_focal_loss,
                                gaussian_gt_map, gt_vector, hungarian_match, matching_cost, splat_radius, total_loss)
from ecfusion.selftest import assignment_brute_force


@dataclass
class Box:
    center: tuple
    size: tuple
    theta: float
    cls: int


def test_gt_map_peak_and_empty():
    hm = gaussian_gt_map([Box((5.5, 7.5), (2.0, 2.0), 0.0, 1)], 16, 16, 3)
    assert hm[5, 7, 1] == 1.0 and hm[5, 7].sum() == 1.0
    assert not gaussian_gt_map([], 8, 8, 3).any()


def test_gt_map_value_two_cells_from_centre():
    hm = draw_gaussian(np.zeros((9, 9)), 4, 4, 2)
    sigma = 5 / 6
    want = math.exp(-4 / (2 * sigma * sigma))
    assert hm[6, 4] == pytest.approx(want, rel=1e-15)
    assert hm[4, 2] == pytest.approx(want, rel=1e-15)


def test_small_boxes_use_radius_floor():
    assert splat_radius(1.0, 1.0) == 2


def test_gt_map_overlap_is_max():
    a, b = Box((4.2, 4.2), (1.0, 1.0), 0.0, 0), Box((6.2, 4.2), (1.0, 1.0), 0.0, 0)
    both = gaussian_gt_map([a, b], 12, 12, 1)
    assert np.array_equal(both, np.maximum(gaussian_gt_map([a], 12, 12, 1), gaussian_gt_map([b], 12, 12, 1)))


def test_focal_single_cell_hand_value():
    loss = gaussian_focal_loss(np.full((1, 1, 1), 0.5), np.ones((1, 1, 1))).item()
    assert loss == pytest.approx(0.25 * math.log(2), rel=1e-14)
    assert loss == pytest.approx(0.1733, abs=5e-5)


def test_focal_near_perfect_prediction_is_near_zero():
    gt = gaussian_gt_map([Box((3.5, 3.5), (1.0, 1.0), 0.0, 0)], 8, 8, 2)
    pred = np.where(gt == 1.0, 1 - 1e-9, 1e-9)
    assert 0 <= gaussian_focal_loss(pred, gt).item() < 1e-8


def test_focal_all_ones_mask_is_bitwise_noop():
    rng = np.random.default_rng(0)
    gt = gaussian_gt_map([Box((3.5, 2.5), (2.0, 3.0), 0.3, 1)], 8, 8, 2)
    pred = rng.uniform(0.01, 0.99, (8, 8, 2))
    assert gaussian_focal_loss(pred, gt, np.ones((8, 8))).item() == gaussian_focal_loss(pred, gt).item()


def test_focal_masked_cells_only_negative_branch():
    gt = np.zeros((3, 3, 1))
    gt[1, 1, 0] = 1.0
    pred = np.full((3, 3, 1), 0.3)
    m = np.ones((3, 3))
    m[1, 1] = 0
    got = gaussian_focal_loss(pred, gt, m).item()
    # no positives left: normaliser floors at 1, every cell is a plain negative
    assert got == pytest.approx(-9 * 0.3 ** 2 * math.log(0.7), rel=1e-14)


def test_focal_rejects_saturated_predictions():
    with pytest.raises(ValueError):
        gaussian_focal_loss(np.zeros((2, 2, 1)), np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        gaussian_focal_loss(np.full((2, 2, 1), 0.5), np.zeros((2, 3, 1)))


def _pred(center, size, theta, probs, src="F"):
    return BoxPred(center, size, (math.sin(theta), math.cos(theta)), np.log(np.asarray(probs, float)), src)


def test_matching_cost_exact_and_monotone():
    gt = Box((4.0, 5.0), (2.0, 3.0), 0.4, 1)
    assert matching_cost(_pred((4.0, 5.0), (2.0, 3.0), 0.4, [1e-300, 1.0, 1e-300, 1e-300]), gt, 16, 16) == \
        pytest.approx(0.0, abs=1e-12)
    hi = _pred((4.0, 5.0), (2.0, 3.0), 0.4, [0.05, 0.9, 0.025, 0.025])
    lo = _pred((4.0, 5.0), (2.0, 3.0), 0.4, [0.85, 0.1, 0.025, 0.025])
    assert matching_cost(hi, gt, 16, 16) < matching_cost(lo, gt, 16, 16)


def test_matching_cost_formula_and_matrix():
    rng = np.random.default_rng(1)
    X, Y = 20, 30
    preds = [_pred(tuple(rng.uniform(0, 20, 2)), tuple(rng.uniform(1, 4, 2)), rng.uniform(-3, 3),
                   rng.dirichlet(np.ones(4))) for _ in range(4)]
    gts = [Box(tuple(rng.uniform(0, 20, 2)), tuple(rng.uniform(1, 4, 2)), rng.uniform(-3, 3), int(rng.integers(0, 3)))
           for _ in range(3)]
    for p in preds:
        for g in gts:
            pv = [p.center[0] / X, p.center[1] / Y, p.size[0] / X, p.size[1] / Y, p.heading[0], p.heading[1]]
            gv = [g.center[0] / X, g.center[1] / Y, g.size[0] / X, g.size[1] / Y, math.sin(g.theta), math.cos(g.theta)]
            want = 1.0 * (1 - p.probs[g.cls]) + 0.25 * sum(abs(a - b) for a, b in zip(pv, gv))
            assert matching_cost(p, g, X, Y) == pytest.approx(want, rel=1e-12)
    cm = cost_matrix(preds, gts, X, Y)
    assert cm.shape == (4, 3)
    assert cm[2, 1] == pytest.approx(matching_cost(preds[2], gts[1], X, Y), rel=1e-12)


def test_hungarian_small_examples():
    a = hungarian_match(1 - np.eye(4))
    assert a.pairs == [(i, i) for i in range(4)]
    assert hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]])).pairs == [(0, 0), (1, 1)]
    assert hungarian_match(np.zeros((0, 3))).pairs == []
    with pytest.raises(ValueError):
        hungarian_match(np.array([[np.inf]]))


def _brute_total(c):
    P, G = c.shape
    if P >= G:
        return min(sum(c[r, g] for g, r in enumerate(rows)) for rows in permutations(range(P), G))
    return min(sum(c[p, col] for p, col in enumerate(cols)) for cols in permutations(range(G), P))


@pytest.mark.parametrize("shape", [(7, 7), (5, 8), (8, 5), (1, 6)])
def test_hungarian_optimal_against_enumeration(shape):
    rng = np.random.default_rng(sum(shape))
    for _ in range(5):
        c = rng.random(shape)
        a = hungarian_match(c)
        assert len(a) == min(shape)
        assert len({p for p, _ in a.pairs}) == len({g for _, g in a.pairs}) == len(a)
        assert sum(c[p, g] for p, g in a.pairs) == pytest.approx(_brute_total(c), abs=1e-12)


def test_hungarian_ties_resolved_lexicographically():
    rng = np.random.default_rng(3)
    for _ in range(20):
        c = rng.integers(0, 3, (6, 6)).astype(float)
        assert hungarian_match(c).pairs == assignment_brute_force(c)[1]


def _out(centers, sizes, headings, logits, sources=None):
    k = len(centers)
    return DecoderOutput(nx.leaf(np.array(centers, float).reshape(k, 2)), nx.leaf(np.log(np.array(sizes, float)).reshape(k, 2)),
                         nx.leaf(np.array(headings, float).reshape(k, 2)), nx.leaf(np.array(logits, float).reshape(k, 4)),
                         sources or ["F"] * k, [])


def test_detection_loss_empty():
    out = _out([], [], [], np.zeros((0, 4)))
    from ecfusion.objective import Assignment
    assert detection_loss(out, [], Assignment([]), 8, 8).item() == 0.0


def test_detection_loss_two_predictions_one_gt_by_hand():
    from ecfusion.objective import Assignment
    X = Y = 10
    gt = Box((3.0, 4.0), (2.0, 1.0), 0.0, 0)
    out = _out([[3.5, 4.0], [7.0, 7.0]], [[2.0, 1.0], [1.0, 1.0]], [[0.0, 1.0], [0.0, 1.0]],
               [[math.log(2.0), 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, math.log(3.0)]])
    a = Assignment([(0, 0)])
    cls_term, box_term = detection_loss_parts(out, [gt], a, X, Y)
    p0 = 2 / 5  # GT class prob of the matched prediction
    p1 = 3 / 6  # background prob of the unmatched one
    want_cls = -((1 - p0) ** 2 * math.log(p0) + (1 - p1) ** 2 * math.log(p1))
    want_box = 0.5 / X
    assert cls_term.item() == pytest.approx(want_cls, rel=1e-13)
    assert box_term.item() == pytest.approx(want_box, rel=1e-13)
    assert detection_loss(out, [gt], a, X, Y).item() == pytest.approx(want_cls + 0.25 * want_box, rel=1e-13)


def test_detection_loss_exact_box_has_zero_regression():
    from ecfusion.objective import Assignment
    gt = Box((3.0, 4.0), (2.0, 1.5), 0.7, 2)
    out = _out([[3.0, 4.0]], [[2.0, 1.5]], [[math.sin(0.7), math.cos(0.7)]], [[0.0, 0.0, 1.0, 0.0]])
    _, box_term = detection_loss_parts(out, [gt], Assignment([(0, 0)]), 16, 16)
    assert box_term.item() == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(gt_vector(gt, 16, 16)[:4], [3 / 16, 4 / 16, 2 / 16, 1.5 / 16])


def test_total_loss_is_plain_sum():
    assert total_loss(0.0, 0.0, 0.0, 0.0).item() == 0.0
    assert total_loss(1.0, 2.0, 3.0, 4.0).item() == 10.0


def test_total_loss_gradient_is_sum_of_term_gradients():
    rng = np.random.default_rng(4)
    x = nx.leaf(rng.normal(size=5))
    terms = [lambda: nx.sum_(x * x), lambda: nx.sum_(nx.exp(x)), lambda: nx.sum_(nx.sigmoid(x)), lambda: nx.sum_(x) * 3.0]
    grads = []
    for t in terms:
        x.grad = None
        nx.backward(t())
        grads.append(x.grad.copy())
    x.grad = None
    nx.backward(total_loss(*(t() for t in terms)))
    assert np.allclose(x.grad, sum(grads), rtol=0, atol=1e-12)
    checks = nx.check_gradients(lambda: total_loss(*(t() for t in terms)), {"x": x})
    assert nx.max_rel_err(checks) <= 1e-4

"""Oracle suites: gradient checks and slow reference implementations.

Each suite returns a :class:`SuiteResult`; :func:`run_all` runs them in a
fixed order. The reference implementations here are deliberately naive
(nested loops, exhaustive enumeration) and share no code with the fast
paths they check.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .dqr import select_topk_peaks

H = 1e-5
REL_TOL = 1e-4
N_INSTANCES = 20


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    worst: float = 0.0
    detail: str = ""
    seconds: float = 0.0
    failures: list = field(default_factory=list)


# -- slow reference implementations -----------------------------------------------

def cost_volume_loop(ha, hb, q):
    """``out[i, j, (m + q/2) q + (n + q/2)] = <ha[i, j], hb[i+m, j+n]>`` (zero outside)."""
    X, Y, K = ha.shape
    out = np.zeros((X, Y, q * q))
    for i in range(X):
        for j in range(Y):
            for m in range(-q // 2, q // 2):
                for n in range(-q // 2, q // 2):
                    ii, jj = i + m, j + n
                    if not (0 <= ii < X and 0 <= jj < Y):
                        continue
                    s = 0.0
                    for c in range(K):
                        s += ha[i, j, c] * hb[ii, jj, c]
                    out[i, j, (m + q // 2) * q + (n + q // 2)] = s
    return out


def bilinear_loop(feat, x, y):
    X, Y, C = feat.shape
    i0, j0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - i0, y - j0
    out = np.zeros(C)
    for di, wi in ((0, 1 - fx), (1, fx)):
        for dj, wj in ((0, 1 - fy), (1, fy)):
            ii, jj = i0 + di, j0 + dj
            if 0 <= ii < X and 0 <= jj < Y:
                out += wi * wj * feat[ii, jj]
    return out


def warp_loop(feat, flow):
    X, Y, C = feat.shape
    out = np.zeros_like(feat)
    for i in range(X):
        for j in range(Y):
            out[i, j] = bilinear_loop(feat, i + flow[i, j, 0], j + flow[i, j, 1])
    return out


def conv_loop(x, w, b):
    X, Y, _ = x.shape
    k = w.shape[0]
    r = k // 2
    out = np.zeros((X, Y, w.shape[3])) + b
    for i in range(X):
        for j in range(Y):
            for a in range(k):
                for c in range(k):
                    ii, jj = i + a - r, j + c - r
                    if 0 <= ii < X and 0 <= jj < Y:
                        out[i, j] += x[ii, jj] @ w[a, c]
    return out


def topk_enumeration(h, k, window=3):
    """Every (cell, class) with its peak flag from an explicit neighbourhood scan."""
    X, Y, K = h.shape
    r = window // 2
    rows = []
    for i in range(X):
        for j in range(Y):
            for c in range(K):
                nb = [h[a, b, c] for a in range(max(0, i - r), min(X, i + r + 1))
                      for b in range(max(0, j - r), min(Y, j + r + 1))]
                rows.append((not h[i, j, c] >= max(nb), -h[i, j, c], c, i, j))
    rows.sort()
    return [((i, j), c) for _, _, c, i, j in rows[:k]]


_PERMS = {}


def _perms(G, P):
    """All ordered P-subsets of range(G) as rows, in lexicographic order."""
    if (G, P) not in _PERMS:
        _PERMS[G, P] = np.array(list(itertools.permutations(range(G), P)), dtype=np.int64).reshape(-1, P)
    return _PERMS[G, P]


def assignment_brute_force(cost, tol=1e-9):
    """(optimal cost, lexicographically smallest optimal pair list) by enumeration."""
    cost = np.asarray(cost, dtype=np.float64)
    P, G = cost.shape
    if P == 0 or G == 0:
        return 0.0, []
    scale = tol * max(1.0, float(np.abs(cost).max()))
    if P <= G:
        # rows in order; candidate pair lists compare like their column tuples
        perms = _perms(G, P)
        totals = cost[np.arange(P), perms].sum(axis=1)
        best = totals.min()
        k = int(np.flatnonzero(totals <= best + scale)[0])
        return float(totals[k]), [(r, int(c)) for r, c in enumerate(perms[k])]
    perms = _perms(P, G)
    totals = cost[perms, np.arange(G)].sum(axis=1)
    best = totals.min()
    opts = [sorted((int(r), c) for c, r in enumerate(perms[k])) for k in np.flatnonzero(totals <= best + scale)]
    return float(best), min(opts)


# -- gradient cases ---------------------------------------------------------------

def _away(rng, shape, lo=0.1):
    """Random values with |x| >= lo (keeps clear of kinks at zero)."""
    v = rng.uniform(lo, 1.5, shape)
    return v * np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def _frac_away(rng, shape, spread=2.0, margin=0.05):
    """Real offsets whose fractional parts avoid the bilinear kinks at integers."""
    base = rng.integers(-int(spread), int(spread) + 1, shape).astype(np.float64)
    return base + rng.uniform(margin, 1 - margin, shape)


def op_cases():
    """name -> builder(rng) returning (loss_fn, {name: leaf})."""
    def unary(op, gen=lambda r, s: r.normal(size=s)):
        def build(rng):
            x = nx.leaf(gen(rng, (3, 4)))
            wts = rng.normal(size=(3, 4))
            return (lambda: nx.sum_(op(x) * wts)), {"x": x}
        return build

    def binary(op, gen_b=lambda r, s: r.normal(size=s), shape_b=(3, 4)):
        def build(rng):
            a = nx.leaf(rng.normal(size=(3, 4)))
            b = nx.leaf(gen_b(rng, shape_b))
            wts = rng.normal(size=(3, 4))
            return (lambda: nx.sum_(op(a, b) * wts)), {"a": a, "b": b}
        return build

    def positive(r, s):
        return r.uniform(0.3, 2.0, s)

    def c_layer_norm(rng):
        x = nx.leaf(rng.normal(size=(4, 6)))
        g = nx.leaf(rng.normal(size=6))
        b = nx.leaf(rng.normal(size=6))
        wts = rng.normal(size=(4, 6))
        return (lambda: nx.sum_(nx.layer_norm(x, g, b) * wts)), {"x": x, "gamma": g, "beta": b}

    def c_matmul(rng):
        a = nx.leaf(rng.normal(size=(2, 3, 4)))
        b = nx.leaf(rng.normal(size=(4, 5)))
        wts = rng.normal(size=(2, 3, 5))
        return (lambda: nx.sum_(nx.matmul(a, b) * wts)), {"a": a, "b": b}

    def c_conv(rng):
        x = nx.leaf(rng.normal(size=(5, 4, 3)))
        w = nx.leaf(rng.normal(size=(3, 3, 3, 2)))
        b = nx.leaf(rng.normal(size=2))
        wts = rng.normal(size=(5, 4, 2))
        return (lambda: nx.sum_(nx.conv2d(x, w, b) * wts)), {"x": x, "w": w, "b": b}

    def c_sample(rng):
        f = nx.leaf(rng.normal(size=(5, 5, 2)))
        p = nx.leaf(rng.integers(-1, 5, (6, 2)) + rng.uniform(0.05, 0.95, (6, 2)))
        wts = rng.normal(size=(6, 2))
        return (lambda: nx.sum_(nx.sample(f, p) * wts)), {"feature": f, "pos": p}

    def c_warp(rng):
        f = nx.leaf(rng.normal(size=(5, 4, 2)))
        fl = nx.leaf(_frac_away(rng, (5, 4, 2), spread=1))
        wts = rng.normal(size=(5, 4, 2))
        return (lambda: nx.sum_(nx.warp(f, fl) * wts)), {"feature": f, "flow": fl}

    def c_cost_volume(rng):
        q = int(rng.choice([2, 4]))
        a = nx.leaf(rng.normal(size=(4, 5, 3)))
        b = nx.leaf(rng.normal(size=(4, 5, 3)))
        wts = rng.normal(size=(4, 5, q * q))
        return (lambda: nx.sum_(nx.cost_volume(a, b, q) * wts)), {"ha": a, "hb": b}

    def c_index(rng):
        x = nx.leaf(rng.normal(size=(5, 3)))
        key = rng.integers(0, 5, 7)  # repeats exercise accumulation
        wts = rng.normal(size=(7, 3))
        return (lambda: nx.sum_(nx.index(x, key) * wts)), {"x": x}

    def c_concat(rng):
        a = nx.leaf(rng.normal(size=(3, 2)))
        b = nx.leaf(rng.normal(size=(3, 4)))
        wts = rng.normal(size=(3, 6))
        return (lambda: nx.sum_(nx.concat([a, b], axis=1) * wts)), {"a": a, "b": b}

    def c_reduce(op):
        def build(rng):
            x = nx.leaf(rng.normal(size=(3, 4, 2)))
            wts = rng.normal(size=(3, 2))
            return (lambda: nx.sum_(op(x, axis=1) * wts)), {"x": x}
        return build

    def c_shape(op, out_shape):
        def build(rng):
            x = nx.leaf(rng.normal(size=(2, 3, 4)))
            wts = rng.normal(size=out_shape)
            return (lambda: nx.sum_(op(x) * wts)), {"x": x}
        return build

    def c_scale_add(rng):
        a = nx.leaf(rng.normal(size=(3, 4)))
        b = nx.leaf(rng.normal(size=(3, 4)))
        s = float(rng.uniform(0.2, 2.0))
        wts = rng.normal(size=(3, 4))
        return (lambda: nx.sum_(nx.layer_scale_add(a, b, s) * wts)), {"a": a, "b": b}

    return {
        "add": binary(nx.add, shape_b=(4,)),
        "sub": binary(nx.sub),
        "mul": binary(nx.mul, shape_b=(3, 1)),
        "div": binary(nx.div, gen_b=positive),
        "neg": unary(nx.neg),
        "layer_scale_add": c_scale_add,
        "power": unary(lambda x: nx.power(x, 3.0), positive),
        "exp": unary(nx.exp),
        "log": unary(nx.log, positive),
        "abs": unary(nx.abs_, _away),
        "relu": unary(nx.relu, _away),
        "sigmoid": unary(nx.sigmoid),
        "sum": c_reduce(nx.sum_),
        "mean": c_reduce(nx.mean),
        "reshape": c_shape(lambda x: nx.reshape(x, (6, 4)), (6, 4)),
        "transpose": c_shape(lambda x: nx.transpose(x, (2, 0, 1)), (4, 2, 3)),
        "swap_last": c_shape(nx.swap_last, (2, 4, 3)),
        "concat": c_concat,
        "index": c_index,
        "matmul": c_matmul,
        "softmax": unary(lambda x: nx.softmax(x, axis=1)),
        "log_softmax": unary(lambda x: nx.log_softmax(x, axis=1)),
        "layer_norm": c_layer_norm,
        "conv2d": c_conv,
        "sample": c_sample,
        "warp": c_warp,
        "cost_volume": c_cost_volume,
    }


def _loss_cases():
    from .objective import gaussian_focal_loss

    def focal(rng):
        pred = nx.leaf(rng.normal(size=(5, 5, 2)))
        gt = np.clip(rng.uniform(-0.3, 1.0, (5, 5, 2)), 0, 1)
        gt[rng.integers(0, 5), rng.integers(0, 5), 0] = 1.0
        mask = (rng.random((5, 5)) < 0.8).astype(np.float64)
        return (lambda: gaussian_focal_loss(nx.sigmoid(pred), gt, mask)), {"logits": pred}

    return {"focal_loss": focal}


def full_graph_case(rng, n_params=8):
    """Full model loss on a 16 x 16 scene with the query picks and matching frozen.

    The flow head's last layer gets small random weights so the warp is
    actually exercised (a zero flow sits on the bilinear kinks).
    """
    from .pipeline import ModelParams, TrainConfig, forward, losses, render_scene
    from .synth import ConflictConfig, GridConfig

    grid = GridConfig(X=16, Y=16, channels=8)
    cfg = TrainConfig(k_f=4, k_p=2, k_i=2, q=2, flow_hidden=4, dec_layers=1, dec_heads=2, ffn_dim=8)
    seed = int(rng.integers(0, 2 ** 31))
    params = ModelParams.init(nx.Rng(seed), grid, cfg)
    params.sfa.flow_w2.value[...] = rng.normal(0, 0.05, params.sfa.flow_w2.shape)
    params.sfa.flow_b2.value[...] = rng.uniform(0.2, 0.8, 4) * np.where(rng.random(4) < 0.5, -1, 1)
    data = render_scene(seed, grid, ConflictConfig())
    named = params.named()
    for node in named.values():
        node.requires_grad = True
    fw = forward(data.b_p, data.b_i, params, cfg)
    plan = (fw.selection, losses(fw, data, cfg)["assignment"])

    def loss():
        f = forward(data.b_p, data.b_i, params, cfg, selection=plan[0])
        return losses(f, data, cfg, assignment=plan[1])["total"]

    return loss, named, n_params


def _grad_suite(name, builder, n_instances, seed, n_samples=None):
    t = time.perf_counter()
    worst, failures = 0.0, []
    for k in range(n_instances):
        rng = np.random.default_rng([seed, k])
        built = builder(rng)
        loss_fn, params = built[0], built[1]
        ns = built[2] if len(built) > 2 else n_samples
        checks = nx.check_gradients(loss_fn, params, n_samples=ns, h=H, rng=rng)
        err = nx.max_rel_err(checks)
        worst = max(worst, err)
        if not err <= REL_TOL:
            failures.append((k, err))
    return SuiteResult(f"grad:{name}", not failures, n_instances, worst,
                       f"max rel err {worst:.2e}", time.perf_counter() - t, failures)


def gradient_suites(n_instances=N_INSTANCES, seed=0):
    cases = dict(op_cases())
    cases.update(_loss_cases())
    out = [_grad_suite(n, b, n_instances, seed, n_samples=12) for n, b in cases.items()]
    out.append(_grad_suite("full_graph", full_graph_case, n_instances, seed))
    return out


# -- oracle suites --------------------------------------------------------------------

def _timed(name, fn):
    t = time.perf_counter()
    cases, worst, failures = fn()
    return SuiteResult(name, not failures, cases, worst, f"max err {worst:.2e}", time.perf_counter() - t, failures)


def cost_volume_suite(seed=0, n=10):
    def run():
        fails, worst = [], 0.0
        for k in range(n):
            rng = np.random.default_rng([seed, 11, k])
            for q in (2, 4):
                a, b = rng.normal(size=(6, 6, 3)), rng.normal(size=(6, 6, 3))
                err = float(np.abs(nx.cost_volume(a, b, q).value - cost_volume_loop(a, b, q)).max())
                worst = max(worst, err)
                if err != 0.0:
                    fails.append((k, q, err))
        return 2 * n, worst, fails
    return _timed("oracle:cost_volume", run)


def warp_suite(seed=0, n=10):
    def run():
        fails, worst = [], 0.0
        for k in range(n):
            rng = np.random.default_rng([seed, 12, k])
            f = rng.normal(size=(8, 8, 2))
            fl = rng.uniform(-3, 3, (8, 8, 2))
            if k % 3 == 0:
                fl = np.round(fl)  # integer flows hit the corner cases
            err = float(np.abs(nx.warp(f, fl).value - warp_loop(f, fl)).max())
            worst = max(worst, err)
            if err > 1e-12:
                fails.append((k, err))
        return n, worst, fails
    return _timed("oracle:warp", run)


def warp_identity_suite(seed=0, n=10):
    def run():
        fails = []
        for k in range(n):
            rng = np.random.default_rng([seed, 13, k])
            f = rng.normal(size=(int(rng.integers(1, 12)), int(rng.integers(1, 12)), 3))
            out = nx.warp(f, np.zeros(f.shape[:2] + (2,))).value
            if not np.array_equal(out, f):
                fails.append(k)
        return n, 0.0 if not fails else 1.0, fails
    return _timed("identity:zero_flow_warp", run)


def conv_suite(seed=0, n=10):
    def run():
        fails, worst = [], 0.0
        for k in range(n):
            rng = np.random.default_rng([seed, 14, k])
            x = rng.normal(size=(6, 7, 3))
            w = rng.normal(size=(3, 3, 3, 4))
            b = rng.normal(size=4)
            err = float(np.abs(nx.conv2d(x, w, b).value - conv_loop(x, w, b)).max())
            worst = max(worst, err)
            if err > 1e-12:
                fails.append((k, err))
        return n, worst, fails
    return _timed("oracle:conv2d", run)


def topk_suite(seed=0, n=30):
    def run():
        fails = []
        for t in range(n):
            rng = np.random.default_rng([seed, 15, t])
            X, Y, K = int(rng.integers(1, 17)), int(rng.integers(1, 17)), int(rng.integers(1, 4))
            h = rng.random((X, Y, K))
            if t % 2:
                h = np.round(h * 4) / 4  # plateaus and ties
            k = int(rng.integers(1, X * Y * K + 1))
            got = [(c.pos, c.cls) for c in select_topk_peaks(h, k)]
            if got != topk_enumeration(h, k):
                fails.append(t)
        return n, float(len(fails)), fails
    return _timed("oracle:topk_peaks", run)


def hungarian_suite(seed=0, n=100, max_size=8):
    from .objective import hungarian_match

    def run():
        fails, worst = [], 0.0
        cases = 0
        for size in range(1, max_size + 1):
            for t in range(n):
                rng = np.random.default_rng([seed, 16, size, t])
                cost = rng.random((size, size)) if t % 2 else rng.integers(0, 4, (size, size)).astype(float)
                got = hungarian_match(cost).pairs
                best, pairs = assignment_brute_force(cost)
                err = abs(sum(cost[r, c] for r, c in got) - best)
                worst = max(worst, err)
                cases += 1
                if got != pairs:
                    fails.append((size, t))
        return cases, worst, fails
    return _timed("oracle:hungarian", run)


def run_all(seed=0, quick=False):
    """Every suite in a fixed order. ``quick`` uses fewer instances (for smoke runs)."""
    n_grad = 3 if quick else N_INSTANCES
    n_hung = 10 if quick else 100
    results = gradient_suites(n_grad, seed)
    results += [
        cost_volume_suite(seed),
        warp_suite(seed),
        warp_identity_suite(seed),
        conv_suite(seed),
        topk_suite(seed),
        hungarian_suite(seed, n_hung),
    ]
    return results


def format_table(results, timings=False):
    w = max(len(r.name) for r in results)
    lines = [f"{'suite':<{w}}  {'cases':>5}  result  detail"]
    for r in results:
        extra = f"  ({r.seconds:.2f}s)" if timings else ""
        lines.append(f"{r.name:<{w}}  {r.cases:>5}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}{extra}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} suites passed")
    return "\n".join(lines)

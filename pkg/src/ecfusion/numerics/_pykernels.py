"""Numpy implementations of the hot kernels.

These are the reference fallback for ``_ckernels`` and must stay
numerically interchangeable with it (agreement to ~1e-12).
"""
import numpy as np

BACKEND = "numpy"


def _corners(pos):
    x = pos[:, 0]
    y = pos[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    return x0.astype(np.int64), y0.astype(np.int64), fx, fy


def sample_forward(feat, pos):
    """Bilinear gather of ``feat[X, Y, C]`` at real positions ``pos[N, 2]``."""
    X, Y, C = feat.shape
    x0, y0, fx, fy = _corners(pos)
    out = np.zeros((pos.shape[0], C))
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                      (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < X) & (yi >= 0) & (yi < Y)
        if ok.any():
            out[ok] += w[ok, None] * feat[xi[ok], yi[ok]]
    return out


def sample_backward(feat, pos, gout):
    X, Y, C = feat.shape
    x0, y0, fx, fy = _corners(pos)
    gfeat = np.zeros_like(feat)
    gpos = np.zeros_like(pos)
    vals = {}
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                      (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < X) & (yi >= 0) & (yi < Y)
        # per-sample <gout, corner value>, zero outside the grid
        d = np.zeros(pos.shape[0])
        if ok.any():
            np.add.at(gfeat, (xi[ok], yi[ok]), w[ok, None] * gout[ok])
            d[ok] = np.einsum("nc,nc->n", gout[ok], feat[xi[ok], yi[ok]])
        vals[dx, dy] = d
    gpos[:, 0] = (1 - fy) * (vals[1, 0] - vals[0, 0]) + fy * (vals[1, 1] - vals[0, 1])
    gpos[:, 1] = (1 - fx) * (vals[0, 1] - vals[0, 0]) + fx * (vals[1, 1] - vals[1, 0])
    return gfeat, gpos


def cost_volume_forward(ha, hb, q):
    X, Y, _ = ha.shape
    h = q // 2
    pad = np.zeros((X + q, Y + q, hb.shape[2]))
    pad[h:h + X, h:h + Y] = hb
    out = np.empty((X, Y, q * q))
    for a in range(q):
        for b in range(q):
            # offset (m, n) = (a - h, b - h) lands at pad[h + m + i] = pad[a + i]
            nb = pad[a:a + X, b:b + Y]
            acc = np.zeros((X, Y))
            for c in range(ha.shape[2]):  # channel order fixed so results match a scalar loop bitwise
                acc += ha[:, :, c] * nb[:, :, c]
            out[:, :, a * q + b] = acc
    return out


def cost_volume_backward(ha, hb, q, g):
    X, Y, _ = ha.shape
    h = q // 2
    pad = np.zeros((X + q, Y + q, hb.shape[2]))
    pad[h:h + X, h:h + Y] = hb
    gpad = np.zeros_like(pad)
    gha = np.zeros_like(ha)
    for a in range(q):
        for b in range(q):
            go = g[:, :, a * q + b, None]
            gha += go * pad[a:a + X, b:b + Y]
            gpad[a:a + X, b:b + Y] += go * ha
    return gha, gpad[h:h + X, h:h + Y].copy()


def local_max(h, window):
    """Boolean map of cells equal to the max of their truncated window (per channel)."""
    X, Y, _ = h.shape
    r = window // 2
    pad = np.full((X + 2 * r, Y + 2 * r, h.shape[2]), -np.inf)
    pad[r:r + X, r:r + Y] = h
    m = np.full_like(h, -np.inf)
    for a in range(window):
        for b in range(window):
            np.maximum(m, pad[a:a + X, b:b + Y], out=m)
    return h >= m


def linear_assignment(cost):
    """Min-cost perfect assignment on a square matrix.

    Shortest augmenting path with potentials (O(n^3)). Returns
    ``(col_of_row, u, v)`` where ``u``/``v`` are optimal dual potentials:
    ``cost[i, j] - u[i] - v[j] >= 0`` with equality on assigned pairs.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = row (1-based) owning column j
    way = np.zeros(n + 1, dtype=np.int64)
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = a[i0, 1:] - u[i0] - v[1:]
            free = ~used[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:].copy(), v[1:].copy()

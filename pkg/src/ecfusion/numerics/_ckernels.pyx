# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``; same signatures."""
import numpy as np
from libc.math cimport floor, INFINITY

BACKEND = "cython"


def sample_forward(double[:, :, ::1] feat, double[:, ::1] pos):
    cdef Py_ssize_t X = feat.shape[0], Y = feat.shape[1], C = feat.shape[2]
    cdef Py_ssize_t N = pos.shape[0], n, c, dx, dy, xi, yi
    cdef long x0, y0
    cdef double fx, fy, w, xf, yf
    out_arr = np.zeros((N, C))
    cdef double[:, ::1] out = out_arr
    for n in range(N):
        xf = floor(pos[n, 0])
        yf = floor(pos[n, 1])
        fx = pos[n, 0] - xf
        fy = pos[n, 1] - yf
        x0 = <long>xf
        y0 = <long>yf
        for dx in range(2):
            for dy in range(2):
                xi = x0 + dx
                yi = y0 + dy
                if xi < 0 or xi >= X or yi < 0 or yi >= Y:
                    continue
                w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
                for c in range(C):
                    out[n, c] += w * feat[xi, yi, c]
    return out_arr


def sample_backward(double[:, :, ::1] feat, double[:, ::1] pos, double[:, ::1] gout):
    cdef Py_ssize_t X = feat.shape[0], Y = feat.shape[1], C = feat.shape[2]
    cdef Py_ssize_t N = pos.shape[0], n, c, dx, dy, xi, yi
    cdef long x0, y0
    cdef double fx, fy, w, xf, yf, d
    cdef double v[2][2]
    gfeat_arr = np.zeros((X, Y, C))
    gpos_arr = np.zeros((N, 2))
    cdef double[:, :, ::1] gfeat = gfeat_arr
    cdef double[:, ::1] gpos = gpos_arr
    for n in range(N):
        xf = floor(pos[n, 0])
        yf = floor(pos[n, 1])
        fx = pos[n, 0] - xf
        fy = pos[n, 1] - yf
        x0 = <long>xf
        y0 = <long>yf
        for dx in range(2):
            for dy in range(2):
                v[dx][dy] = 0.0
                xi = x0 + dx
                yi = y0 + dy
                if xi < 0 or xi >= X or yi < 0 or yi >= Y:
                    continue
                w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
                d = 0.0
                for c in range(C):
                    gfeat[xi, yi, c] += w * gout[n, c]
                    d += gout[n, c] * feat[xi, yi, c]
                v[dx][dy] = d
        gpos[n, 0] = (1 - fy) * (v[1][0] - v[0][0]) + fy * (v[1][1] - v[0][1])
        gpos[n, 1] = (1 - fx) * (v[0][1] - v[0][0]) + fx * (v[1][1] - v[1][0])
    return gfeat_arr, gpos_arr


def cost_volume_forward(double[:, :, ::1] ha, double[:, :, ::1] hb, int q):
    cdef Py_ssize_t X = ha.shape[0], Y = ha.shape[1], K = ha.shape[2]
    cdef Py_ssize_t i, j, a, b, c, ii, jj
    cdef int h = q // 2
    cdef double s
    out_arr = np.zeros((X, Y, q * q))
    cdef double[:, :, ::1] out = out_arr
    for i in range(X):
        for j in range(Y):
            for a in range(q):
                ii = i + a - h
                if ii < 0 or ii >= X:
                    continue
                for b in range(q):
                    jj = j + b - h
                    if jj < 0 or jj >= Y:
                        continue
                    s = 0.0
                    for c in range(K):
                        s += ha[i, j, c] * hb[ii, jj, c]
                    out[i, j, a * q + b] = s
    return out_arr


def cost_volume_backward(double[:, :, ::1] ha, double[:, :, ::1] hb, int q, double[:, :, ::1] g):
    cdef Py_ssize_t X = ha.shape[0], Y = ha.shape[1], K = ha.shape[2]
    cdef Py_ssize_t i, j, a, b, c, ii, jj
    cdef int h = q // 2
    cdef double go
    gha_arr = np.zeros((X, Y, K))
    ghb_arr = np.zeros((X, Y, K))
    cdef double[:, :, ::1] gha = gha_arr
    cdef double[:, :, ::1] ghb = ghb_arr
    for i in range(X):
        for j in range(Y):
            for a in range(q):
                ii = i + a - h
                if ii < 0 or ii >= X:
                    continue
                for b in range(q):
                    jj = j + b - h
                    if jj < 0 or jj >= Y:
                        continue
                    go = g[i, j, a * q + b]
                    for c in range(K):
                        gha[i, j, c] += go * hb[ii, jj, c]
                        ghb[ii, jj, c] += go * ha[i, j, c]
    return gha_arr, ghb_arr


def local_max(double[:, :, ::1] h, int window):
    cdef Py_ssize_t X = h.shape[0], Y = h.shape[1], K = h.shape[2]
    cdef Py_ssize_t i, j, k, ii, jj
    cdef int r = window // 2
    cdef double v
    cdef bint peak
    out_arr = np.zeros((X, Y, K), dtype=np.bool_)
    cdef unsigned char[:, :, ::1] out = out_arr.view(np.uint8)
    for i in range(X):
        for j in range(Y):
            for k in range(K):
                v = h[i, j, k]
                peak = True
                for ii in range(max(0, i - r), min(X, i + r + 1)):
                    for jj in range(max(0, j - r), min(Y, j + r + 1)):
                        if h[ii, jj, k] > v:
                            peak = False
                            break
                    if not peak:
                        break
                out[i, j, k] = peak
    return out_arr


def linear_assignment(cost_in):
    cdef double[:, ::1] cost = np.ascontiguousarray(cost_in, dtype=np.float64)
    cdef Py_ssize_t n = cost.shape[0], i, j, j0, j1, i0
    cdef double delta, cur
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(n + 1)
    p_arr = np.zeros(n + 1, dtype=np.int64)
    way_arr = np.zeros(n + 1, dtype=np.int64)
    minv_arr = np.empty(n + 1)
    used_arr = np.empty(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr, v = v_arr, minv = minv_arr
    cdef long long[::1] p = p_arr, way = way_arr
    cdef unsigned char[::1] used = used_arr
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
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
    return col_of_row, u_arr[1:].copy(), v_arr[1:].copy()

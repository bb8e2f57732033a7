"""BEV grid conventions shared by alignment, query recovery and the losses.

Every spatial map is an array (or :class:`~ecfusion.numerics.Node`) laid
out ``[X, Y, channels]``. A continuous position ``(x, y)`` addresses
``(row, column) = (i, j)``; integer positions hit cell centres exactly.
Flow fields hold ``(dx, dy)`` in cells in channels 0 and 1 and displace
the *sampling source*: ``warped[p] = feature[p + flow[p]]``. Samples that
fall off the grid read as zero rather than clamping to the border.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .numerics import Node, sample, value_of

DEFAULT_Q = 4


def offset_to_flat(m, n, q):
    """Flat cost-volume channel of neighbour offset ``(m, n)``, ``m, n in [-q/2, q/2)``."""
    h = q // 2
    if not (-h <= m < h and -h <= n < h):
        raise ValueError(f"offset ({m}, {n}) outside window [-{h}, {h})")
    return (m + h) * q + (n + h)


def flat_to_offset(o, q):
    h = q // 2
    if not 0 <= o < q * q:
        raise ValueError(f"flat index {o} outside [0, {q * q})")
    return o // q - h, o % q - h


def check_window(q, X, Y):
    if q < 2 or q % 2:
        raise ValueError(f"neighbourhood size q must be a positive even number, got {q}")
    if q > min(X, Y):
        raise ValueError(f"q={q} does not fit a {X}x{Y} grid")


def bilinear_sample(feature, at):
    """Feature vector at continuous position ``at = (x, y)``.

    Weighted average of the up to four surrounding cells; corners off the
    grid contribute zero. Returns a Node of shape ``[C]`` that is
    differentiable w.r.t. the feature and (when ``at`` is a Node) the position.
    """
    pos = at.reshape((1, 2)) if isinstance(at, Node) else np.asarray(at, dtype=np.float64).reshape(1, 2)
    return sample(feature, pos).reshape((-1,))


def cell_grid(X, Y):
    """``[X*Y, 2]`` integer cell coordinates in row-major order."""
    ii, jj = np.meshgrid(np.arange(X), np.arange(Y), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1)


def write_pgm(path, img, vmin=None, vmax=None):
    """Write a 2-D array as an ASCII (P2) greymap scaled to 0..255.

    Heatmaps pass ``vmin=0, vmax=1``; otherwise the image's own range is
    used (a constant image maps to 0).
    """
    img = np.asarray(value_of(img), dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    lo = img.min() if vmin is None else vmin
    hi = img.max() if vmax is None else vmax
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.rint((img - lo) * scale), 0, 255).astype(int)
    rows = [" ".join(map(str, r)) for r in pix]
    Path(path).write_text(f"P2\n{img.shape[1]} {img.shape[0]}\n255\n" + "\n".join(rows) + "\n")


def read_pgm(path):
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + w * h], dtype=int).reshape(h, w)


def dump_channels(prefix, grid, vmin=None, vmax=None):
    """One PGM per channel of a ``[X, Y, K]`` grid: ``{prefix}_c{k}.pgm``."""
    g = value_of(grid)
    paths = []
    for k in range(g.shape[2]):
        p = Path(f"{prefix}_c{k}.pgm")
        write_pgm(p, g[:, :, k], vmin, vmax)
        paths.append(p)
    return paths

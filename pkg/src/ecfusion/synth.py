"""Synthetic conflict scenes standing in for real LiDAR/camera BEV encoders.

A scene is a set of planar boxes around a virtual ego at the grid centre.
Each modality renders its visible objects as a per-class template vector
stamped over the object footprint (peaked at the centre, fading with
distance from the ego) plus white noise. Two kinds of conflict are
injected:

* inherent: distant small objects drop out of LiDAR with probability
  ``p_lidar_drop_small``; any object is hidden from the camera with
  probability ``p_cam_occlude`` (at least one modality always sees it);
* extrinsic: camera stamps are shifted along the ego ray by
  ``Normal(0, depth_sigma * dist)`` and smeared into ``smear_len`` copies
  at unit radial spacing whose weights halve each step and sum to one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng
from .objective import gaussian_gt_map

LARGE, MEDIUM, SMALL = 0, 1, 2
# (w range, l range) in cells
SIZE_PRIORS = {
    LARGE: ((3.5, 4.5), (7.0, 9.0)),
    MEDIUM: ((1.5, 2.5), (3.0, 5.0)),
    SMALL: ((1.0, 2.0), (1.0, 2.0)),
}
NOISE_SIGMA = 0.05
SMEAR_DECAY = 0.5
MIN_OBJECTS, MAX_OBJECTS = 3, 12


@dataclass(frozen=True)
class GridConfig:
    X: int = 64
    Y: int = 64
    channels: int = 32
    n_classes: int = 3
    cell_size: float = 0.5
    template_seed: int = 0
    # amplitude = exp(-dist / decay_len)
    decay_len: float = 48.0
    # weight of the shared objectness direction in each class template
    template_overlap: float = 0.6

    @property
    def ego(self):
        return (self.X - 1) / 2.0, (self.Y - 1) / 2.0


@dataclass(frozen=True)
class ConflictConfig:
    p_lidar_drop_small: float = 0.8
    depth_sigma: float = 0.11
    smear_len: int = 3
    p_cam_occlude: float = 0.25
    far_dist: float = 12.0

    def __post_init__(self):
        for name in ("p_lidar_drop_small", "p_cam_occlude"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.depth_sigma < 0:
            raise ValueError(f"depth_sigma must be >= 0, got {self.depth_sigma}")
        if self.smear_len < 1:
            raise ValueError(f"smear_len must be >= 1, got {self.smear_len}")

    @classmethod
    def none(cls):
        return cls(0.0, 0.0, 1, 0.0)


@dataclass(frozen=True)
class SceneObject:
    center: tuple[float, float]
    size: tuple[float, float]  # (w, l)
    theta: float
    cls: int
    dist: float


@dataclass
class Scene:
    objects: list[SceneObject]
    vis_p: list[bool]
    vis_i: list[bool]
    seed: int = 0
    # radial camera displacement actually applied per object (cells)
    cam_shift: list[float] = field(default_factory=list)

    def visible(self, modality):
        flags = self.vis_p if modality == "P" else self.vis_i
        return [o for o, v in zip(self.objects, flags) if v]

    def bucket(self, k):
        p, i = self.vis_p[k], self.vis_i[k]
        if p and i:
            return "both"
        if p:
            return "lidar_only"
        if i:
            return "camera_only"
        return "neither"


def _extent(w, l):
    return 0.5 * np.hypot(w, l)


def generate_scene(rng, grid=GridConfig(), conflict=ConflictConfig()):
    """3-12 non-overlapping boxes with class size priors and visibility flags."""
    seed = rng.as_seed() if isinstance(rng, Rng) else int(rng)
    place = Rng(seed, 1)
    vis = Rng(seed, 2)
    n_target = int(place.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    ex, ey = grid.ego
    objects = []
    for _ in range(n_target):
        for _attempt in range(50):
            cls = int(place.integers(0, grid.n_classes))
            (w0, w1), (l0, l1) = SIZE_PRIORS[cls % 3]
            w = float(place.uniform(w0, w1))
            l = float(place.uniform(l0, l1))
            theta = float(place.uniform(-np.pi / 2, np.pi / 2))
            r = _extent(w, l)
            cx = float(place.uniform(r, grid.X - 1 - r))
            cy = float(place.uniform(r, grid.Y - 1 - r))
            if all(np.hypot(cx - o.center[0], cy - o.center[1]) > r + _extent(*o.size) + 1.0 for o in objects):
                objects.append(SceneObject((cx, cy), (w, l), theta, cls, float(np.hypot(cx - ex, cy - ey))))
                break
    vis_p, vis_i, shift = [], [], []
    for o in objects:
        drop = vis.random() < conflict.p_lidar_drop_small
        occl = vis.random() < conflict.p_cam_occlude
        z = vis.normal()
        vp = not (o.cls == SMALL and o.dist > conflict.far_dist and drop)
        vi = not occl
        if not vp and not vi:
            vi = True
        vis_p.append(vp)
        vis_i.append(vi)
        shift.append(float(z * conflict.depth_sigma * o.dist))
    return Scene(objects, vis_p, vis_i, seed, shift)


def class_templates(grid, modality):
    """Fixed unit-norm per-class template vectors for one modality, ``[N_c, C]``."""
    key = {"P": 11, "I": 12}[modality]
    r = Rng(grid.template_seed, key)
    common = r.normal(size=grid.channels)
    common /= np.linalg.norm(common)
    out = []
    for _ in range(grid.n_classes):
        s = r.normal(size=grid.channels)
        s -= s.dot(common) * common
        s /= np.linalg.norm(s)
        a = grid.template_overlap
        out.append(a * common + np.sqrt(1 - a * a) * s)
    return np.array(out)


def footprint(grid, center, size, theta):
    """Centre-peaked weight of each cell over the (slightly dilated) rotated box, ``[X, Y]``."""
    w, l = size
    ii, jj = np.meshgrid(np.arange(grid.X), np.arange(grid.Y), indexing="ij")
    dx = ii - center[0]
    dy = jj - center[1]
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    ru = u / (l / 2 + 0.5)
    rv = v / (w / 2 + 0.5)
    rr = ru * ru + rv * rv
    return np.where(rr <= 1.0, np.exp(-2.0 * rr), 0.0)


def amplitude(grid, dist):
    return float(np.exp(-dist / grid.decay_len))


def _stamps(scene, grid, conflict, modality):
    """(position, weight, object) triples that a modality renders."""
    out = []
    ex, ey = grid.ego
    for k, o in enumerate(scene.objects):
        if modality == "P":
            if scene.vis_p[k]:
                out.append((o.center, 1.0, o))
            continue
        if not scene.vis_i[k]:
            continue
        rx, ry = o.center[0] - ex, o.center[1] - ey
        n = np.hypot(rx, ry)
        rx, ry = (rx / n, ry / n) if n > 0 else (1.0, 0.0)
        shift = scene.cam_shift[k] if scene.cam_shift else 0.0
        wts = SMEAR_DECAY ** np.arange(conflict.smear_len)
        wts = wts / wts.sum()
        for s, wt in enumerate(wts):
            d = shift + s
            out.append(((o.center[0] + d * rx, o.center[1] + d * ry), float(wt), o))
    return out


def _render(scene, grid, conflict, modality):
    tmpl = class_templates(grid, modality)
    feat = np.zeros((grid.X, grid.Y, grid.channels))
    for pos, wt, o in _stamps(scene, grid, conflict, modality):
        prof = footprint(grid, pos, o.size, o.theta)
        feat += (wt * amplitude(grid, o.dist)) * prof[:, :, None] * tmpl[o.cls]
    noise = Rng(scene.seed, {"P": 3, "I": 4}[modality])
    feat += noise.normal(0.0, NOISE_SIGMA, feat.shape)
    target = gaussian_gt_map(scene.visible(modality), grid.X, grid.Y, grid.n_classes)
    return feat, target


def render_lidar(scene, grid=GridConfig(), conflict=ConflictConfig()):
    """LiDAR BEV feature ``[X, Y, C]`` and its visible-object heatmap target."""
    return _render(scene, grid, conflict, "P")


def render_camera(scene, grid=GridConfig(), conflict=ConflictConfig()):
    """Camera BEV feature ``[X, Y, C]`` (shifted, smeared stamps) and its target."""
    return _render(scene, grid, conflict, "I")


def scene_seeds(seed, split, n):
    """Integer seeds of the ``n`` scenes of a split (0 = train, 1 = eval, ...)."""
    return [Rng(seed, split, k).as_seed() for k in range(n)]


def mean_camera_shift(depth_sigma, grid=GridConfig(), n_scenes=200, seed=0):
    """Mean |radial shift| (cells) the camera stamps get for a given ``depth_sigma``."""
    conflict = ConflictConfig(depth_sigma=depth_sigma)
    shifts = [abs(s) for sd in scene_seeds(seed, 9, n_scenes)
              for s in generate_scene(sd, grid, conflict).cam_shift]
    return float(np.mean(shifts))


# -- ground-truth accounting ---------------------------------------------------

BUCKETS = ("both", "lidar_only", "camera_only")


def gt_subsets(scene, predictions, radius=2.0, min_conf=0.3):
    """Per-visibility-bucket recall of confident predictions (class-agnostic).

    ``predictions`` are objects with ``center`` and ``confidence``. Returns
    ``{bucket: {"hits": h, "total": n, "recall": h / n or nan}}``.
    """
    pts = np.array([p.center for p in predictions if p.confidence >= min_conf]).reshape(-1, 2)
    out = {b: {"hits": 0, "total": 0} for b in BUCKETS}
    for k, o in enumerate(scene.objects):
        b = scene.bucket(k)
        if b not in out:
            continue
        out[b]["total"] += 1
        if len(pts) and np.min(np.hypot(pts[:, 0] - o.center[0], pts[:, 1] - o.center[1])) <= radius:
            out[b]["hits"] += 1
    for v in out.values():
        v["recall"] = v["hits"] / v["total"] if v["total"] else float("nan")
    return out


def query_coverage(scene, candidates, radius=2.0):
    """Which objects each query source reaches: ``{"F"|"P"|"I": set of object indices}``.

    An object is covered by a source when one of that source's query cells
    lies within ``radius`` of its centre.
    """
    cov = {"F": set(), "P": set(), "I": set()}
    for c in candidates:
        for k, o in enumerate(scene.objects):
            if np.hypot(c.pos[0] - o.center[0], c.pos[1] - o.center[1]) <= radius:
                cov[c.source].add(k)
    return cov


# -- text format ------------------------------------------------------------------

def scene_to_text(scene):
    lines = [f"# seed {scene.seed}", "# cls cx cy w l theta vis_p vis_i"]
    for o, p, i in zip(scene.objects, scene.vis_p, scene.vis_i):
        lines.append(f"{o.cls} {o.center[0]!r} {o.center[1]!r} {o.size[0]!r} {o.size[1]!r} "
                     f"{o.theta!r} {int(p)} {int(i)}")
    if scene.cam_shift:
        lines.append("# cam_shift " + " ".join(repr(s) for s in scene.cam_shift))
    return "\n".join(lines) + "\n"


def scene_from_text(text, grid=GridConfig()):
    seed = 0
    shift = []
    objects, vp, vi = [], [], []
    ex, ey = grid.ego
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("# seed"):
            seed = int(line.split()[2])
            continue
        if line.startswith("# cam_shift"):
            shift = [float(v) for v in line.split()[2:]]
            continue
        if not line or line.startswith("#"):
            continue
        f = line.split()
        if len(f) != 8:
            raise ValueError(f"scene line needs 8 fields, got {len(f)}: {line!r}")
        cx, cy = float(f[1]), float(f[2])
        objects.append(SceneObject((cx, cy), (float(f[3]), float(f[4])), float(f[5]), int(f[0]),
                                   float(np.hypot(cx - ex, cy - ey))))
        vp.append(bool(int(f[6])))
        vi.append(bool(int(f[7])))
    return Scene(objects, vp, vi, seed, shift)


def save_scene(path, scene):
    Path(path).write_text(scene_to_text(scene))


def load_scene(path, grid=GridConfig()):
    return scene_from_text(Path(path).read_text(), grid)

"""Central finite-difference gradient checks."""
from dataclasses import dataclass

import numpy as np

from .autodiff import backward

REL_FLOOR = 1e-6


@dataclass
class GradCheck:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_err(self):
        # denominators below REL_FLOOR turn this into an absolute comparison
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), REL_FLOOR)


def check_gradients(loss_fn, params, n_samples=None, h=1e-5, rng=None):
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``params`` maps names to leaf Nodes. With ``n_samples`` set, that many
    (name, index) entries are drawn at random with ``rng``; otherwise every
    entry of every parameter is checked. Returns a list of GradCheck.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    entries = [(name, idx) for name, p in params.items() for idx in np.ndindex(p.shape)]
    if n_samples is not None and n_samples < len(entries):
        pick = rng.permutation(len(entries))[:n_samples]
        entries = [entries[i] for i in sorted(pick)]
    out = []
    for name, idx in entries:
        p = params[name]
        g = 0.0 if p.grad is None else float(p.grad[idx])
        old = p.value[idx]
        p.value[idx] = old + h
        fp = loss_fn().item()
        p.value[idx] = old - h
        fm = loss_fn().item()
        p.value[idx] = old
        out.append(GradCheck(name, idx, g, (fp - fm) / (2 * h)))
    return out


def max_rel_err(checks):
    return max((c.rel_err for c in checks), default=0.0)

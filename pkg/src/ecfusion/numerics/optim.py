import numpy as np


def adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, in place.

    ``params`` and ``grads`` map names to arrays; ``state`` holds the step
    counter ``"t"`` and per-name first/second moments, and is created on
    the first call when empty. Names with a ``None`` gradient are skipped.
    """
    b1, b2 = betas
    t = state.get("t", 0) + 1
    state["t"] = t
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        m[name] = b1 * m[name] + (1 - b1) * g
        v[name] = b2 * v[name] + (1 - b2) * g * g
        mhat = m[name] / (1 - b1 ** t)
        vhat = v[name] / (1 - b2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


class Adam:
    """Adam over a dict of leaf Nodes."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        values = {k: p.value for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(values, grads, self.state, self.lr, self.betas, self.eps)

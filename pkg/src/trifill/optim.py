"""Adaptive-moment gradient descent over named parameter lists."""

from __future__ import annotations

import numpy as np


class Adam:
    """Classic bias-corrected Adam. Parameters are (name, tensor) pairs so
    the moment buffers can be checkpointed by name; update order is the
    insertion order of the list, which keeps runs reproducible."""

    def __init__(self, named_params, lr=1e-4, betas=(0.5, 0.9), eps=1e-8):
        self.params = [(name, p) for name, p in named_params]
        seen = set()
        for name, _ in self.params:
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        """Moment buffers and step count as a flat name -> array mapping."""
        out = {"t": np.array([self.t], dtype=np.int64)}
        for name, _ in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"][0])
        for name, p in self.params:
            m, v = arrays[f"m.{name}"], arrays[f"v.{name}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ValueError(f"moment shape mismatch for {name!r}")
            self.m[name] = m.astype(p.data.dtype, copy=True)
            self.v[name] = v.astype(p.data.dtype, copy=True)

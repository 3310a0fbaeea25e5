"""Neural building blocks on top of the autodiff engine.

Modules hold named parameters (trainable) and buffers (state carried in
checkpoints but not optimized, e.g. power-iteration vectors). Registration
order is deterministic, so parameter iteration order is too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor):
            if value.requires_grad:
                self._params[name] = value
            else:
                self._buffers[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = False
        self._buffers[name] = t
        object.__setattr__(self, name, t)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def cast(self, dtype):
        """Convert every parameter and buffer to `dtype`, recursively."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, b in self.named_buffers():
            b.data = b.data.astype(dtype)
        return self

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def kaiming_uniform(rng, shape, fan_in):
    """He-style fan-in uniform init: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, dilation=1, bias=True):
        super().__init__()
        if padding is None:
            padding = dilation * (k - 1) // 2  # "same" for odd k at stride 1
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = kaiming_uniform(rng, (cout, cin, k, k), cin * k * k)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias,
                         stride=self.stride, padding=self.padding, dilation=self.dilation)


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True):
        super().__init__()
        self.weight = kaiming_uniform(rng, (cin, cout), cin)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x):
        return ad.fully_connected(x, self.weight, self.bias)


_FEATURE_ACTS = {
    "elu": ad.elu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "linear": lambda t: t,
}


class GatedConv(Module):
    """Two convs of identical geometry; output = act(conv_f(x)) * sigmoid(conv_g(x))."""

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, dilation=1, activation="elu"):
        super().__init__()
        if activation not in _FEATURE_ACTS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.feature = Conv2d(cin, cout, k, rng, stride=stride, padding=padding, dilation=dilation)
        self.gate = Conv2d(cin, cout, k, rng, stride=stride, padding=padding, dilation=dilation)

    def forward_with_gate(self, x):
        # One fused conv over both parameter sets: halves the im2col/GEMM cost.
        f, c = self.feature, self.gate
        w = ad.concat([f.weight, c.weight], axis=0)
        b = ad.concat([f.bias, c.bias], axis=0)
        both = ad.conv2d(x, w, b, stride=f.stride, padding=f.padding,
                         dilation=f.dilation)
        feat, gate = ad.split(both, axis=1, parts=2)
        g = ad.sigmoid(gate)
        return _FEATURE_ACTS[self.activation](feat) * g, g

    def forward(self, x):
        out, _ = self.forward_with_gate(x)
        return out


class SpectralNormConv(Module):
    """Conv whose weight is divided by a power-iteration estimate of its top
    singular value (over the (cout, cin*k*k) matricization).

    u and v are buffers: updated in-place under no_grad, treated as constants
    by backward, carried through checkpoints.
    """

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, bias=True,
                 init_iterations=1000):
        super().__init__()
        if padding is None:
            padding = (k - 1) // 2
        self.stride, self.padding = stride, padding
        self.weight = kaiming_uniform(rng, (cout, cin, k, k), cin * k * k)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        u = rng.normal(size=cout)
        v = rng.normal(size=cin * k * k)
        self.register_buffer("u", u / np.linalg.norm(u))
        self.register_buffer("v", v / np.linalg.norm(v))
        self.refresh(init_iterations)

    def refresh(self, iterations=1):
        """Power-iteration updates of (u, v) against the current raw weight.

        Multi-iteration refreshes stop early once u stabilizes; the
        single-iteration per-step update never triggers the check, so
        training trajectories stay an exact function of the step count.
        """
        w = self.weight.data.reshape(self.weight.shape[0], -1)
        u, v = self.u.data, self.v.data
        for _ in range(iterations):
            v = w.T @ u
            v /= max(np.linalg.norm(v), 1e-12)
            u_next = w @ v
            u_next /= max(np.linalg.norm(u_next), 1e-12)
            if iterations > 1 and np.max(np.abs(u_next - u)) < 1e-14:
                u = u_next
                break
            u = u_next
        self.u.data = u
        self.v.data = v

    def sigma(self):
        """sigma-hat = u^T W v as a differentiable function of the raw weight."""
        o = self.weight.shape[0]
        w_mat = ad.reshape(self.weight, (o, -1))
        u = ad.reshape(Tensor(self.u.data), (1, o))
        v = ad.reshape(Tensor(self.v.data), (-1, 1))
        s = ad.reshape(ad.matmul(ad.matmul(u, w_mat), v), ())
        return ad.clamp(s, 1e-12, np.inf)

    def effective_weight(self):
        return self.weight / self.sigma()

    def forward(self, x, update=False):
        if update:
            self.refresh(1)
        return ad.conv2d(x, self.effective_weight(), self.bias,
                         stride=self.stride, padding=self.padding)


def spectral_normalize(layer, iterations=1):
    """Run power iterations, then return the normalized effective weight."""
    layer.refresh(iterations)
    return layer.effective_weight()


@dataclass(frozen=True)
class PatchGrid:
    """Tiling of an N×C×H×W map into rows×cols patches of h×w each.

    Patch index p corresponds to (row, col) = (p // cols, p % cols).
    """

    h: int
    w: int
    c: int
    rows: int
    cols: int

    @property
    def n(self):
        return self.rows * self.cols

    @classmethod
    def for_map(cls, shape, h, w):
        _, c, hh, ww = shape
        if hh % h != 0 or ww % w != 0:
            raise ValueError(f"patch {h}x{w} does not tile map {hh}x{ww}")
        return cls(h=h, w=w, c=c, rows=hh // h, cols=ww // w)


def patch_split(x, h, w):
    """Tile N×C×H×W into a list of N×C×h×w patches, row-major."""
    grid = PatchGrid.for_map(x.shape, h, w)
    patches = []
    for r in range(grid.rows):
        row = ad.narrow(x, 2, r * h, h)
        for c in range(grid.cols):
            patches.append(ad.narrow(row, 3, c * w, w))
    return patches, grid


def patch_merge(patches, grid):
    if len(patches) != grid.n:
        raise ValueError(f"expected {grid.n} patches, got {len(patches)}")
    rows = []
    for r in range(grid.rows):
        rows.append(ad.concat(patches[r * grid.cols:(r + 1) * grid.cols], axis=3))
    return ad.concat(rows, axis=2)


def patch_split_packed(x, h, w):
    """Fused tiling: N×C×H×W -> (N, P, h*w*C) without per-patch ops.

    Row-major patch order, matching patch_split; within a patch the vector
    is laid out (h, w, C) so heads can later split the channel axis.
    """
    n, c, hh, ww = x.shape
    grid = PatchGrid.for_map(x.shape, h, w)
    t = ad.reshape(x, (n, c, grid.rows, h, grid.cols, w))
    t = ad.transpose(t, (0, 2, 4, 3, 5, 1))  # N, rows, cols, h, w, C
    return ad.reshape(t, (n, grid.n, h * w * c)), grid


def patch_merge_packed(packed, grid):
    n = packed.shape[0]
    t = ad.reshape(packed, (n, grid.rows, grid.cols, grid.h, grid.w, grid.c))
    t = ad.transpose(t, (0, 5, 1, 3, 2, 4))
    return ad.reshape(t, (n, grid.c, grid.rows * grid.h, grid.cols * grid.w))

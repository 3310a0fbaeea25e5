"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (NCHW layout for feature maps). Every differentiable
op records a node carrying its inputs and a backward rule; `backward()` walks
the nodes reachable from a scalar loss in reverse execution order and
accumulates gradients additively into every tensor that requires them.

64-bit floats are the default so finite-difference checks have headroom;
32-bit can be selected per run with `set_default_dtype`.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

_DEFAULT_DTYPE = np.float64
_OP_COUNTER = itertools.count()
_STATE = threading.local()


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}, use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def grad_enabled():
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager that suspends recording of backward rules."""

    def __enter__(self):
        self._prev = grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class OpNode:
    """One recorded operation: input tensors, output tensor, backward rule.

    `index` is a global monotone counter, so execution order doubles as a
    topological order of the graph.
    """

    __slots__ = ("inputs", "out", "rule", "index")

    def __init__(self, inputs, out, rule):
        self.inputs = inputs
        self.out = out
        self.rule = rule
        self.index = next(_OP_COUNTER)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        a = np.asarray(data, dtype=dtype)
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(_DEFAULT_DTYPE)  # ints/bools/lists land on the default
        self.data = a
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"expected a scalar tensor, got shape {self.shape}")

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    def detach(self):
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t.node = None
        return t

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            # No rule mutates a gradient buffer in place, so aliasing is safe;
            # fan-in below always allocates a fresh sum.
            self.grad = g.astype(self.data.dtype, copy=False)
        else:
            self.grad = self.grad + g

    def backward(self):
        backward(self)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out, inputs, rule):
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = OpNode(tuple(inputs), out, rule)
    return out


class ComputationRecord:
    """The recorded ops reachable from a root tensor, topologically ordered.

    `nodes` is sorted by ascending execution index; backward consumes it in
    reverse, visiting each node exactly once.
    """

    def __init__(self, root):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.index)
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Accumulate d(loss)/dt into every requires_grad tensor reachable from it."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    loss.accumulate_grad(np.ones_like(loss.data))
    record = ComputationRecord(loss)
    for node in reversed(record.nodes):
        g = node.out.grad
        if g is not None:
            for inp, gin in zip(node.inputs, node.rule(g)):
                if gin is not None and inp.requires_grad:
                    inp.accumulate_grad(_unbroadcast(gin, inp.data.shape))
        # The walk is single-use: release grads, closures, and graph edges as
        # it passes so activation memory frees by refcount, not gc cycles.
        node.out.grad = None
        node.out.node = None
        node.out = None
        node.inputs = None
        node.rule = None
    return record


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a, b):
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a, b):
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    out = Tensor(a.data / b.data)
    return _record(out, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def neg(a):
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def pow_scalar(a, p):
    p = float(p)
    out = Tensor(a.data**p)
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a):
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g / (2.0 * y),))


def absolute(a):
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def clamp(a, lo, hi):
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


# -- activations --------------------------------------------------------------


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a):
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def leaky_relu(a, slope=0.2):
    y = np.where(a.data > 0, a.data, slope * a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * np.where(a.data > 0, 1.0, slope),))


def elu(a, alpha=1.0):
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    y = np.where(a.data > 0, a.data, neg_part)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * np.where(a.data > 0, 1.0, neg_part + alpha),))


# -- reductions ---------------------------------------------------------------


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def sum_(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape),)

    return _record(out, (a,), rule)


def mean(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    count = float(np.prod([a.data.shape[ax] for ax in axes])) if axes else 1.0
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.data.shape),)

    return _record(out, (a,), rule)


def max_(a, axis=None, keepdims=False):
    """Max over axes; ties share the incoming gradient equally."""
    axes = _normalize_axes(axis, a.ndim)
    peak = a.data.max(axis=axes, keepdims=True)
    out = Tensor(peak if keepdims else peak.reshape(
        tuple(s for i, s in enumerate(a.data.shape) if i not in axes)))

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        mask = a.data == peak
        count = mask.sum(axis=axes, keepdims=True)
        return (g * mask / count,)

    return _record(out, (a,), rule)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.shape[-1]} (lhs last) vs {b.shape[-2]} (rhs second-to-last)")
    out = Tensor(a.data @ b.data)

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (ga, gb)

    return _record(out, (a, b), rule)


def fully_connected(x, w, b=None):
    """x: (N, K), w: (K, M), optional bias (M,)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, reshape(b, (1, -1)))
    return y


# -- convolution --------------------------------------------------------------


# gathered conv windows below this size are kept alive for the backward
# pass; larger ones are regathered (cheap strided copies) to bound memory
_COLS_CACHE_BYTES = 64 * 1024 * 1024


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    """Cross-correlation of NCHW input with OIKK kernel, zero padding.

    Lowered to one batched GEMM over gathered kernel windows; 1x1 stride-1
    kernels skip the gather and multiply the input view directly.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got {x.ndim} dims")
    if w.ndim != 4:
        raise ValueError(f"conv2d kernel must be OIKK, got {w.ndim} dims")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    n, c, h, wa = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"input has {c} channels but kernel expects {ci} input channels")
    if b is not None and b.shape != (o,):
        raise ValueError(f"bias shape {b.shape} does not match {o} output channels")
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wa + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"kernel does not fit: output spatial dims would be {oh}x{ow}")

    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    xp = (np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
          if padding else x.data)
    hp, wp = xp.shape[2], xp.shape[3]
    # Contracting stride-1 convs go through the shift form: one pointwise GEMM
    # per kernel tap over the padded map, then shifted window sums. It avoids
    # the gather/scatter passes entirely; its work scales with O where the
    # gathered form scales with C, so dispatch on whichever is smaller (and
    # fall back when padding inflates the position count too much).
    shifted = (not pointwise and stride == 1 and o <= c
               and 2 * oh * ow >= hp * wp)
    if shifted:
        return _conv2d_shifted(x, w, b, padding, dilation, xp, oh, ow)
    row_end, col_end = (oh - 1) * stride + 1, (ow - 1) * stride + 1

    def gather():
        cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                hi, wj = i * dilation, j * dilation
                cols[:, :, i, j] = xp[:, :, hi:hi + row_end:stride, wj:wj + col_end:stride]
        return cols

    w_mat = w.data.reshape(o, c * kh * kw)
    if pointwise:
        cols = None
        y = np.matmul(w_mat[None], x.data.reshape(n, c, oh * ow))
    else:
        cols = gather()
        y = np.matmul(w_mat[None], cols.reshape(n, c * kh * kw, oh * ow))
    y = y.reshape(n, o, oh, ow)
    if b is not None:
        y += b.data.reshape(1, o, 1, 1)
    out = Tensor(y)
    if cols is not None and cols.nbytes > _COLS_CACHE_BYTES:
        cols = None  # regather in backward instead of pinning memory

    def rule(g):
        gw = gx = gb = None
        g_mat = g.reshape(n, o, oh * ow)
        if w.requires_grad:
            if pointwise:
                src = x.data.reshape(n, c, oh * ow)
            else:
                src = (cols if cols is not None else gather()).reshape(n, c * kh * kw, oh * ow)
            gw = np.matmul(g_mat, src.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad or x.node is not None:
            dcols = np.matmul(w_mat.T[None], g_mat)  # (N, C*KH*KW, OH*OW)
            if pointwise:
                gx = dcols.reshape(n, c, h, wa)
            else:
                dcols = dcols.reshape(n, c, kh, kw, oh, ow)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        hi, wj = i * dilation, j * dilation
                        gxp[:, :, hi:hi + row_end:stride,
                            wj:wj + col_end:stride] += dcols[:, :, i, j]
                gx = gxp if not padding else np.ascontiguousarray(
                    gxp[:, :, padding:padding + h, padding:padding + wa])
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, rule)


def _conv2d_shifted(x, w, b, padding, dilation, xp, oh, ow):
    """Stride-1 conv as per-tap pointwise GEMMs plus shifted window sums."""
    n, c, h, wa = x.shape
    o, _, kh, kw = w.shape
    hp, wp = xp.shape[2], xp.shape[3]
    wf = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1)).reshape(o * kh * kw, c)
    pmap = np.matmul(wf[None], xp.reshape(n, c, hp * wp)).reshape(n, o, kh, kw, hp, wp)
    y = None
    for i in range(kh):
        for j in range(kw):
            win = pmap[:, :, i, j, i * dilation:i * dilation + oh,
                       j * dilation:j * dilation + ow]
            y = win.copy() if y is None else np.add(y, win, out=y)
    if b is not None:
        y += b.data.reshape(1, o, 1, 1)
    out = Tensor(y)

    def rule(g):
        gw = gx = gb = None
        if not g.flags["C_CONTIGUOUS"]:
            g = np.ascontiguousarray(g)
        dp = np.zeros((n, o, kh, kw, hp, wp), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                dp[:, :, i, j, i * dilation:i * dilation + oh,
                   j * dilation:j * dilation + ow] = g
        dpm = dp.reshape(n, o * kh * kw, hp * wp)
        if w.requires_grad:
            gw = np.matmul(dpm, xp.reshape(n, c, hp * wp).transpose(0, 2, 1)).sum(axis=0)
            gw = np.ascontiguousarray(gw.reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        if x.requires_grad or x.node is not None:
            gxp = np.matmul(wf.T[None], dpm).reshape(n, c, hp, wp)
            gx = (np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + wa])
                  if padding else gxp)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, rule)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim:
            raise ValueError("concat operands must share rank")
        for d in range(t.ndim):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise ValueError(
                    f"concat dimension {d} disagrees: {t.shape[d]} vs {tensors[0].shape[d]}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for k in range(len(sizes)):
            sl[axis] = slice(bounds[k], bounds[k + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _record(out, tuple(tensors), rule)


def narrow(a, axis, start, length):
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow [{start}:{start + length}] out of range on axis {axis} "
                         f"of extent {a.shape[axis]}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(np.ascontiguousarray(a.data[sl]))

    def rule(g):
        gx = np.zeros_like(a.data)
        gx[sl] = g
        return (gx,)

    return _record(out, (a,), rule)


def split(a, axis, parts):
    """Split into `parts` equal chunks along axis; exact inverse of concat."""
    axis = axis % a.ndim
    extent = a.shape[axis]
    if extent % parts != 0:
        raise ValueError(f"axis {axis} of extent {extent} does not divide into {parts} parts")
    step = extent // parts
    return [narrow(a, axis, k * step, step) for k in range(parts)]


def upsample_nearest(a, factor):
    if a.ndim != 4:
        raise ValueError("upsample_nearest expects NCHW input")
    y = a.data.repeat(factor, axis=2).repeat(factor, axis=3)
    out = Tensor(y)
    n, c, h, w = a.shape

    def rule(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _record(out, (a,), rule)


# -- normalization and softmax ------------------------------------------------


def softmax(a, axis):
    if np.isnan(a.data).any():
        raise ValueError("softmax input contains NaN")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), rule)


def log_softmax(a, axis):
    if np.isnan(a.data).any():
        raise ValueError("log_softmax input contains NaN")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor(y)

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), rule)


def layer_norm(a, axes, eps=1e-5):
    """Zero mean, unit variance over `axes` (no affine)."""
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    axes = _normalize_axes(axes, a.ndim)
    for ax in axes:
        if a.shape[ax] == 0:
            raise ValueError(f"cannot normalize over empty axis {ax}")
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y)
    m = float(np.prod([a.shape[ax] for ax in axes]))

    def rule(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record(out, (a,), rule)


# -- pooling ------------------------------------------------------------------


def avg_pool_global(a):
    """NCHW -> NC mean over spatial dims."""
    if a.ndim != 4:
        raise ValueError("avg_pool_global expects NCHW input")
    return mean(a, axis=(2, 3))


def max_pool_global(a):
    """NCHW -> NC max over spatial dims."""
    if a.ndim != 4:
        raise ValueError("max_pool_global expects NCHW input")
    return max_(a, axis=(2, 3))


# -- gradient checking --------------------------------------------------------


def grad_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` must map the tensor `x` to a scalar Tensor. The relative error at each
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))

"""Reverse-mode automatic differentiation on a dynamically built tape.

Every differentiable quantity is a ``Value`` wrapping a float64 numpy array.
Operations record their inputs and a vector-Jacobian product (VJP) closure;
``backward`` replays the tape in reverse topological order and accumulates
cotangents into ``.grad``. All activations stay alive for the backward pass
(no checkpointing). Custom operations, e.g. implicit solvers, hook in through
``record``.

Kinks (relu, abs, clip_min) use the one-sided subgradient convention with
value 0 exactly at the kink.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Value:
    """Node in the computation graph: float64 data plus backward plumbing."""

    __slots__ = ("data", "grad", "parents", "vjp", "op", "needs_grad")

    def __init__(self, data, parents=(), vjp=None, op="leaf", needs_grad=True):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.needs_grad = bool(needs_grad)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Value(op={self.op}, shape={self.data.shape})"

    # operator sugar; scalars and arrays are lifted to constants
    def __add__(self, other):
        return add(self, as_value(other))

    def __radd__(self, other):
        return add(as_value(other), self)

    def __sub__(self, other):
        return sub(self, as_value(other))

    def __rsub__(self, other):
        return sub(as_value(other), self)

    def __mul__(self, other):
        return mul(self, as_value(other))

    def __rmul__(self, other):
        return mul(as_value(other), self)

    def __truediv__(self, other):
        return div(self, as_value(other))

    def __rtruediv__(self, other):
        return div(as_value(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_value(other))

    def __pow__(self, p):
        return pow_const(self, p)


def leaf(x) -> Value:
    """Differentiable input node."""
    return Value(x, needs_grad=True)


def constant(x) -> Value:
    """Node that never receives a gradient."""
    return Value(x, needs_grad=False)


def as_value(x) -> Value:
    if isinstance(x, Value):
        return x
    return constant(x)


def _needs(parents) -> bool:
    return any(p.needs_grad for p in parents)


def record(op: str, inputs, forward_fn, vjp_fn) -> Value:
    """Register a custom operation on the tape.

    ``forward_fn(*arrays) -> (out_array, ctx)`` runs the primal computation;
    ``vjp_fn(ctx, g) -> tuple`` maps an output cotangent to one cotangent per
    input (entries may be None for inputs that need no gradient).
    """
    inputs = tuple(as_value(x) for x in inputs)
    out_data, ctx = forward_fn(*(x.data for x in inputs))
    out = Value(out_data, parents=inputs, op=op, needs_grad=_needs(inputs))
    if out.needs_grad:
        out.vjp = lambda g: vjp_fn(ctx, g)
    return out


def _unbroadcast(g: Array, shape) -> Array:
    """Sum a broadcast cotangent back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(op, data, parents, vjp):
    out = Value(data, parents=parents, op=op, needs_grad=_needs(parents))
    if out.needs_grad:
        out.vjp = vjp
    return out


# ---------------------------------------------------------------- arithmetic


def add(a: Value, b: Value) -> Value:
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Value, b: Value) -> Value:
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def neg(a: Value) -> Value:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Value, b: Value) -> Value:
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: Value, b: Value) -> Value:
    ad, bd = a.data, b.data
    out = ad / bd
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def pow_const(a: Value, p: float) -> Value:
    ad = a.data
    return _make("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Value) -> Value:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Value) -> Value:
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Value) -> Value:
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Value) -> Value:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Value) -> Value:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def swish(a: Value) -> Value:
    ad = a.data
    s = 1.0 / (1.0 + np.exp(-ad))
    return _make("swish", ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


def gelu(a: Value) -> Value:
    # exact (erf) form, not the tanh approximation
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    return _make("gelu", ad * cdf, (a,),
                 lambda g: (g * (cdf + ad * _INV_SQRT2PI * np.exp(-0.5 * ad * ad)),))


def relu(a: Value) -> Value:
    ad = a.data
    return _make("relu", np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0.0),))


def absolute(a: Value) -> Value:
    ad = a.data
    return _make("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def clip_min(a: Value, floor: float) -> Value:
    """max(a, floor); gradient passes only where a > floor."""
    ad = a.data
    return _make("clip_min", np.maximum(ad, floor), (a,), lambda g: (g * (ad > floor),))


# ----------------------------------------------------------- shape and index


def reshape(a: Value, shape) -> Value:
    old = a.data.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Value, axes) -> Value:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def take_flat(a: Value, idx) -> Value:
    """Gather by flat index; the VJP scatter-adds, so repeats are allowed."""
    idx = np.asarray(idx, dtype=np.intp)
    size, shape = a.data.size, a.data.shape

    def vjp(g):
        ga = np.zeros(size)
        np.add.at(ga, idx.ravel(), g.ravel())
        return (ga.reshape(shape),)

    return _make("take", a.data.reshape(-1)[idx], (a,), vjp)


def concat(values, axis=0) -> Value:
    values = tuple(as_value(v) for v in values)
    sizes = [v.data.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]
    return _make("concat", np.concatenate([v.data for v in values], axis=axis), values,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(values) -> Value:
    """Stack scalar or same-shape Values along a new leading axis."""
    values = tuple(as_value(v) for v in values)
    return _make("stack", np.stack([v.data for v in values]), values,
                 lambda g: tuple(g[i] for i in range(len(values))))


def pad2d(a: Value, pad: int) -> Value:
    """Zero-pad the two trailing axes symmetrically."""
    ndim = a.data.ndim
    width = [(0, 0)] * (ndim - 2) + [(pad, pad), (pad, pad)]

    def vjp(g):
        sl = [slice(None)] * (ndim - 2) + [slice(pad, -pad), slice(pad, -pad)]
        return (g[tuple(sl)],)

    return _make("pad2d", np.pad(a.data, width), (a,), vjp if pad else lambda g: (g,))


# ------------------------------------------------------------------ algebra


def matmul(a: Value, b: Value) -> Value:
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.needs_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.needs_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return (ga, gb)

    return _make("matmul", np.matmul(ad, bd), (a, b), vjp)


def vsum(a: Value, axis=None, keepdims=False) -> Value:
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def vmean(a: Value, axis=None, keepdims=False) -> Value:
    shape = a.data.shape
    n = a.data.size if axis is None else np.prod(
        [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def softmax(a: Value, axis=-1) -> Value:
    ad = a.data
    z = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# -------------------------------------------------------------- convolution


def _im2col(xp: Array, kh: int, kw: int, stride: int):
    b, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    v = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return v.reshape(b, c * kh * kw, ho * wo).copy(), ho, wo


def _col2im(gcols: Array, padded_shape, kh: int, kw: int, stride: int, ho: int, wo: int):
    b, c, h, w = padded_shape
    gx = np.zeros(padded_shape)
    gc = gcols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += gc[:, :, i, j]
    return gx


def conv2d(x: Value, w: Value, stride: int = 1, pad: int | None = None) -> Value:
    """2D convolution (cross-correlation), NCHW input, OIHW kernel."""
    kh, kw = w.data.shape[2], w.data.shape[3]
    if pad is None:
        pad = (kh - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    o = w.data.shape[0]
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(x.data.shape[0], o, ho, wo)
    padded_shape = xp.shape

    def vjp(g):
        gmat = g.reshape(g.shape[0], o, -1)
        gw = gx = None
        if w.needs_grad:
            gw = np.einsum("bon,bkn->ok", gmat, cols).reshape(w.data.shape)
        if x.needs_grad:
            gcols = np.matmul(wmat.T, gmat)
            gfull = _col2im(gcols, padded_shape, kh, kw, stride, ho, wo)
            gx = gfull[:, :, pad:gfull.shape[2] - pad, pad:gfull.shape[3] - pad] if pad else gfull
        return (gx, gw)

    return _make("conv2d", out, (x, w), vjp)


def upsample2x(a: Value) -> Value:
    """Nearest-neighbour 2x upsampling on the two trailing axes."""
    out = np.repeat(np.repeat(a.data, 2, axis=-2), 2, axis=-1)
    b, c, h, w = a.data.shape

    def vjp(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make("upsample2x", out, (a,), vjp)


# ----------------------------------------------------------------- backward


def _toposort(out: Value):
    order, visited, stk = [], set(), [(out, False)]
    while stk:
        node, done = stk.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stk.append((node, True))
        for p in node.parents:
            if id(p) not in visited and p.needs_grad:
                stk.append((p, False))
    return order  # children before parents


def backward(out: Value, cotangent=None) -> dict:
    """Propagate cotangents from ``out`` to every reachable node.

    With no cotangent, ``out`` must be scalar and is seeded with 1. Returns a
    mapping from leaf Values (no parents, needs_grad) to their gradients; the
    same arrays are left on ``.grad`` of every visited node.
    """
    if cotangent is None:
        if out.data.size != 1:
            raise ValueError("backward() without a cotangent needs a scalar output")
        cotangent = np.ones_like(out.data)
    else:
        cotangent = np.asarray(cotangent, dtype=np.float64).reshape(out.data.shape)
    if not out.needs_grad:
        return {}
    order = _toposort(out)
    for node in order:
        node.grad = None
    out.grad = cotangent.copy()
    leaves = {}
    for node in reversed(order):
        if node.grad is None:
            continue
        if node.vjp is None:
            if not node.parents:
                leaves[node] = node.grad
            continue
        grads = node.vjp(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.needs_grad:
                continue
            if p.grad is None:
                p.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                p.grad = p.grad + g
    return leaves


# --------------------------------------------------------------- grad check


class GradCheckError(RuntimeError):
    pass


def grad_check(f, x, step=1e-6, floor=1e-10, coords=None, rng=None) -> float:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` maps a Value to a scalar Value. ``coords`` limits the sweep: None
    probes every coordinate, an int probes that many chosen by ``rng``, an
    iterable names flat indices directly. The step is scaled per coordinate by
    max(1, |x_i|). Returns max_i |g_ad - g_fd| / max(|g_fd|, floor).
    """
    x = np.asarray(x, dtype=np.float64)
    v = leaf(x)
    y = f(v)
    backward(y)
    g_ad = v.grad.reshape(-1) if v.grad is not None else np.zeros(x.size)

    if coords is None:
        idx = np.arange(x.size)
    elif np.isscalar(coords):
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(x.size, size=min(int(coords), x.size), replace=False)
    else:
        idx = np.asarray(list(coords), dtype=np.intp)

    worst = 0.0
    flat = x.reshape(-1)
    for i in idx:
        h = step * max(1.0, abs(flat[i]))
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(constant(xp.reshape(x.shape))).data)
        fm = float(f(constant(xm.reshape(x.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"non-finite objective at probe coordinate {int(i)}")
        g_fd = (fp - fm) / (2.0 * h)
        err = abs(g_ad[i] - g_fd) / max(abs(g_fd), floor)
        worst = max(worst, err)
    return worst

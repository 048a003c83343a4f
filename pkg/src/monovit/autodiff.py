"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every differentiable primitive the networks and losses need lives here:
elementwise math, reductions, shape ops, batched matmul, conv2d, upsampling
and flat gather.  Tensors record the op that produced them; ``backward``
replays those records in reverse topological order exactly once, then
releases the tape.  A second backward through the same records raises.
"""

import contextlib

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / plain numerics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeError(RuntimeError):
    """Backward requested through records that were already consumed."""


class _Node:
    """One executed primitive: parent tensors plus the vjp closure."""

    __slots__ = ("op", "parents", "vjp", "consumed")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.consumed = False


class Tensor:
    """n-d float64 array with an optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; full definitions live at module level
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, vjp):
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, parents, vjp)
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into .grad for every reachable tensor.

    The records reachable from `loss` are consumed: their parent links are
    dropped and a repeated backward raises TapeError.
    """
    if not isinstance(loss, Tensor):
        raise ValueError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ValueError("loss has no recorded history to differentiate")

    # iterative topological sort (graphs can be thousands of nodes deep)
    topo = []
    visiting = {}
    stack = [(loss, False)]
    while stack:
        t, done = stack.pop()
        node = t._node
        if node is None:
            continue
        if done:
            topo.append(t)
            continue
        tid = id(node)
        if tid in visiting:
            continue
        if node.consumed:
            raise TapeError(f"tape already consumed at op '{node.op}'")
        visiting[tid] = True
        stack.append((t, True))
        for p in node.parents:
            if p._node is not None and id(p._node) not in visiting:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for t in reversed(topo):
        node = t._node
        g = t.grad
        if g is None:
            continue
        grads = node.vjp(g)
        for p, pg in zip(node.parents, grads):
            if pg is None or not p.requires_grad:
                continue
            p.grad = pg if p.grad is None else p.grad + pg
        node.consumed = True
        node.parents = ()
        node.vjp = None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)))


def div(a, b):
    """Elementwise quotient; division by zero propagates inf per IEEE."""
    a, b = as_tensor(a), as_tensor(b)
    ash, bsh = a.shape, b.shape
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / bd, ash),
                            _unbroadcast(-g * ad / (bd * bd), bsh)))


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def abs_(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * s,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def sin(a):
    a = as_tensor(a)
    c = np.cos(a.data)
    return _make(np.sin(a.data), "sin", (a,), lambda g: (g * c,))


def cos(a):
    a = as_tensor(a)
    s = np.sin(a.data)
    return _make(np.cos(a.data), "cos", (a,), lambda g: (-g * s,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, "log", (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    a = as_tensor(a)
    m = a.data > 0
    return _make(np.where(m, a.data, 0.0), "relu", (a,), lambda g: (g * m,))


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a):
    """Exact gelu x*Phi(x) via erf (the tanh approximation is too loose)."""
    a = as_tensor(a)
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * ad * ad)
    return _make(ad * cdf, "gelu", (a,), lambda g: (g * (cdf + ad * pdf),))


def minimum(a, b):
    """Per-element min of two tensors; gradient goes to the winner, ties to a."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"minimum: shapes differ {a.shape} vs {b.shape}")
    m = a.data <= b.data
    return _make(np.where(m, a.data, b.data), "minimum", (a, b),
                 lambda g: (g * m, g * ~m))


def clamp(a, lo=None, hi=None):
    """Clamp to [lo, hi]; gradient passes only where the input was in range."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, "clamp", (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    sh = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = g
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            for x in sorted(_norm_axes(ax, len(sh))):
                gg = np.expand_dims(gg, x)
        return (np.broadcast_to(gg, sh).copy(),)

    return _make(out, "sum", (a,), vjp)


def _norm_axes(axes, ndim):
    return tuple(x % ndim for x in axes)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[x] for x in _norm_axes(ax, a.ndim)]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def max_data(a, axis=None, keepdims=False):
    """Max of the raw values, detached from the tape (for softmax shifts etc.)."""
    return as_tensor(a).data.max(axis=axis, keepdims=keepdims)


def reshape(a, shape):
    a = as_tensor(a)
    sh = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(sh),))


def permute(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), "permute", (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), "concat", ts, vjp)


def slice_(a, key):
    a = as_tensor(a)
    sh = a.shape

    def vjp(g):
        full = np.zeros(sh)
        full[key] = g
        return (full,)

    return _make(a.data[key].copy(), "slice", (a,), vjp)


def take(a, idx):
    """Flat gather: out.flat[k] = a.flat[idx.flat[k]], any idx shape."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    n = a.size
    flat_idx = idx.ravel()

    def vjp(g):
        acc = np.bincount(flat_idx, weights=g.ravel(), minlength=n)
        return (acc.reshape(a.shape),)

    return _make(a.data.ravel()[flat_idx].reshape(idx.shape), "take", (a,), vjp)


def matmul(a, b):
    """Batched matrix product over the last two axes, broadcasting the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors with >= 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def vjp(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ash)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bsh)
        return (ga, gb)

    return _make(ad @ bd, "matmul", (a, b), vjp)


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """2-d cross-correlation with zero padding.

    x: [N,C,H,W], w: [Co,C/groups,kh,kw], b: [Co] or None.  Output spatial
    size is (H + 2*padding - kh)//stride + 1 (and likewise for W).
    """
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    N, C, H, W = x.shape
    Co, Cig, kh, kw = w.shape
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel sides must be odd, got {kh}x{kw}")
    if Cig * groups != C or Co % groups != 0:
        raise ValueError(
            f"conv2d: channel mismatch C={C}, kernel {Co}x{Cig}, groups={groups}")
    if b is not None and b.shape != (Co,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({Co},)")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")

    G, Cog = groups, Co // groups
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]          # [N,C,Ho,Wo,kh,kw] view
    # im2col: group the reduction axes together for one batched BLAS call
    cols = win.reshape(N, G, Cig, Ho, Wo, kh, kw)
    cols = cols.transpose(1, 2, 5, 6, 0, 3, 4).reshape(G, Cig * kh * kw, N * Ho * Wo)
    cols = np.ascontiguousarray(cols)
    wmat = w.data.reshape(G, Cog, Cig * kh * kw)
    out = wmat @ cols                             # [G,Cog,N*Ho*Wo]
    out = out.reshape(G, Cog, N, Ho, Wo).transpose(2, 0, 1, 3, 4).reshape(N, Co, Ho, Wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def vjp(g):
        gmat = g.reshape(N, G, Cog, Ho, Wo).transpose(1, 2, 0, 3, 4)
        gmat = np.ascontiguousarray(gmat).reshape(G, Cog, N * Ho * Wo)
        gw = (gmat @ cols.transpose(0, 2, 1)).reshape(Co, Cig, kh, kw)
        gcols = wmat.transpose(0, 2, 1) @ gmat    # [G,CigKK,N*Ho*Wo]
        gcols = gcols.reshape(G, Cig, kh, kw, N, Ho, Wo).transpose(4, 0, 1, 5, 6, 2, 3)
        gxp = np.zeros((N, C, H + 2 * p, W + 2 * p))
        gxv = gxp.reshape(N, G, Cig, H + 2 * p, W + 2 * p)
        for i in range(kh):
            for j in range(kw):
                gxv[:, :, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, :, i, j]
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, "conv2d", parents, vjp)


_upsample_cache = {}


def _bilinear_taps(n_in, factor):
    """Source indices and weights for align-corners-false upsampling."""
    dst = np.arange(n_in * factor)
    src = (dst + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(np.int64)
    w1 = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    return i0c, i1c, w1


def upsample(x, factor, mode="nearest"):
    """Integer-factor spatial upsampling of [N,C,H,W] maps."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError("upsample expects [N,C,H,W]")
    if not isinstance(factor, (int, np.integer)) or factor < 2:
        raise ValueError(f"upsample: factor must be an int >= 2, got {factor}")
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"upsample: unknown mode {mode!r}")
    N, C, H, W = x.shape
    f = int(factor)
    key = (H, W, f, mode)
    if key not in _upsample_cache:
        if mode == "nearest":
            ry = np.repeat(np.arange(H), f)
            rx = np.repeat(np.arange(W), f)
            idx = (ry[:, None] * W + rx[None, :]).ravel()
            _upsample_cache[key] = (idx,)
        else:
            y0, y1, wy = _bilinear_taps(H, f)
            x0, x1, wx = _bilinear_taps(W, f)
            grid = lambda ys, xs: (ys[:, None] * W + xs[None, :]).ravel()
            _upsample_cache[key] = (
                grid(y0, x0), grid(y0, x1), grid(y1, x0), grid(y1, x1),
                np.outer(1 - wy, 1 - wx).ravel(), np.outer(1 - wy, wx).ravel(),
                np.outer(wy, 1 - wx).ravel(), np.outer(wy, wx).ravel())
    cached = _upsample_cache[key]
    flat = reshape(x, (N * C, H * W))
    if mode == "nearest":
        out = take(flat, np.arange(N * C)[:, None] * (H * W) + cached[0][None, :])
        return reshape(out, (N, C, H * f, W * f))
    i00, i01, i10, i11, w00, w01, w10, w11 = cached
    base = np.arange(N * C)[:, None] * (H * W)
    out = (take(flat, base + i00[None, :]) * w00 + take(flat, base + i01[None, :]) * w01
           + take(flat, base + i10[None, :]) * w10 + take(flat, base + i11[None, :]) * w11)
    return reshape(out, (N, C, H * f, W * f))


_reflect_cache = {}


def reflect_pad2d(x, pad):
    """Reflection-pad the two trailing axes of [N,C,H,W] by `pad` on each side."""
    x = as_tensor(x)
    N, C, H, W = x.shape
    key = (H, W, pad)
    if key not in _reflect_cache:
        ry = np.abs(np.arange(-pad, H + pad))
        ry = np.where(ry >= H, 2 * (H - 1) - ry, ry)
        rx = np.abs(np.arange(-pad, W + pad))
        rx = np.where(rx >= W, 2 * (W - 1) - rx, rx)
        _reflect_cache[key] = (ry[:, None] * W + rx[None, :]).ravel()
    idx = _reflect_cache[key]
    flat = reshape(x, (N * C, H * W))
    out = take(flat, np.arange(N * C)[:, None] * (H * W) + idx[None, :])
    return reshape(out, (N, C, H + 2 * pad, W + 2 * pad))


# ---------------------------------------------------------------------------
# composites with their own contracts


def softmax(x, axis):
    """Stable softmax along `axis`; rows sum to 1."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shift = max_data(x, axis=axis, keepdims=True)
    e = exp(x - shift)
    return e / sum_(e, axis=axis, keepdims=True)


def layernorm(x, axis, gamma, beta, eps=1e-6):
    """Normalize to zero mean / unit variance along `axis`, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"layernorm: axis {axis} invalid for shape {x.shape}")
    n = x.shape[axis]
    if gamma.size != n or beta.size != n:
        raise ValueError(
            f"layernorm: gamma/beta size {gamma.size}/{beta.size} != axis size {n}")
    shape = [1] * x.ndim
    shape[axis] = n
    mu = mean(x, axis=axis, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=axis, keepdims=True)
    xn = xc / sqrt(var + eps)
    return xn * reshape(gamma, shape) + reshape(beta, shape)


def linear(x, w, b=None):
    """x @ w^T + b with x: [..., in], w: [out, in]."""
    out = matmul(x, permute(w, tuple(range(w.ndim - 2)) + (-1, -2)) if w.ndim > 2
                 else permute(w, (1, 0)))
    return out if b is None else out + b

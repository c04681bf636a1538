"""A small reverse-mode autodiff tensor on top of numpy.

Only what the networks need is here: broadcasting arithmetic, batched
matmul, reshapes, reductions, the activations, layer and batch norm, 3-D
convolution and its transpose, and the two training losses.  Each op
records a closure that maps the output gradient to input gradients;
:meth:`Tensor.backward` replays them in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .errors import NonFiniteValue, ShapeMismatch

_grad_enabled = True
_corrupted: set[str] = set()


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def corrupt_backward(*ops: str):
    """Test hook: scale the backward of the named ops by 1.5."""
    _corrupted.update(ops)
    try:
        yield
    finally:
        _corrupted.difference_update(ops)


def _hook(op, grads):
    if op in _corrupted:
        return tuple(None if g is None else g * 1.5 for g in grads)
    return grads


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data, parents, backward, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = lambda g: _hook(op, backward(g))
    out.op = op
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ----------------------------------------------------------

def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = b
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul"
    )


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope=0.2):
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x):
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def gelu(x):
    """Exact (erf) GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
    return _make(d * cdf, (x,), lambda g: (g * (cdf + d * pdf),), "gelu")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


# shapes and reductions ------------------------------------------------

def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def sum_all(x):
    shape = x.shape
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x):
    shape, n = x.shape, x.data.size
    return _make(x.data.mean(), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# normalisation --------------------------------------------------------

def layer_norm(x, gamma, beta, axis=-1, eps=1e-5):
    """Normalise over one axis; ``gamma``/``beta`` have that axis' length."""
    axis = axis % x.ndim
    d = x.data
    mu = d.mean(axis=axis, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    gd = gamma.data.reshape(bshape)
    n = x.shape[axis]
    red = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gx_hat = g * gd
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=axis, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=axis, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gd + beta.data.reshape(bshape), (x, gamma, beta), backward, "layer_norm")


def batch_norm3d(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5):
    """Per-channel norm over batch and spatial axes of ``(N, C, D, H, W)``.

    In training mode the running statistics arrays are updated in place
    with the (biased) batch statistics.
    """
    red = (0, 2, 3, 4)
    d = x.data
    if training:
        mu = d.mean(axis=red, keepdims=True)
        xc = d - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1)
    else:
        mu = running_mean.reshape(1, -1, 1, 1, 1).astype(d.dtype)
        xc = d - mu
        var = running_var.reshape(1, -1, 1, 1, 1).astype(d.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(1, -1, 1, 1, 1)
    bd = beta.data.reshape(1, -1, 1, 1, 1)
    m = d.size // d.shape[1]

    def backward(g):
        gx_hat = g * gd
        if training:
            gx = inv / m * (
                m * gx_hat
                - gx_hat.sum(axis=red, keepdims=True)
                - xhat * (gx_hat * xhat).sum(axis=red, keepdims=True)
            )
        else:
            gx = gx_hat * inv
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gd + bd, (x, gamma, beta), backward, "batch_norm3d")


# convolution ----------------------------------------------------------

def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv_transpose_out_size(n, k, stride, pad):
    return (n - 1) * stride - 2 * pad + k


def _im2col(x, k, stride, pad, out):
    """``(N, C, D, H, W)`` -> ``(N * D'H'W', C * k^3)`` patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride][:, :, : out[0], : out[1], : out[2]]
    n, c = x.shape[:2]
    return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * out[0] * out[1] * out[2], c * k**3)


def _col2im(cols, shape, k, stride, pad, out):
    """Adjoint of :func:`_im2col`: scatter-add patches back onto ``shape``."""
    n, c, D, H, W = shape
    padded = np.zeros((n, c, D + 2 * pad, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    patches = cols.reshape(n, out[0], out[1], out[2], c, k, k, k).transpose(0, 4, 5, 6, 7, 1, 2, 3)
    sd, sh, sw = (stride * (o - 1) + 1 for o in out)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                padded[:, :, a : a + sd : stride, b : b + sh : stride, e : e + sw : stride] += patches[:, :, a, b, e]
    if pad:
        return padded[:, :, pad:-pad, pad:-pad, pad:-pad]
    return padded


def _to_rows(t):
    """``(N, C, D, H, W)`` -> ``(N * DHW, C)``."""
    n, c = t.shape[:2]
    return t.transpose(0, 2, 3, 4, 1).reshape(-1, c), t.shape


def _from_rows(rows, n, spatial):
    c = rows.shape[1]
    return np.ascontiguousarray(rows.reshape(n, *spatial, c).transpose(0, 4, 1, 2, 3))


def conv3d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of ``x (N, Cin, D, H, W)`` with ``w (Cout, Cin, k, k, k)``."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch("conv3d expects 5-D input and weight")
    n, cin = x.shape[:2]
    cout, wcin, k = w.shape[:3]
    if wcin != cin:
        raise ShapeMismatch(f"conv3d: input has {cin} channels, weight expects {wcin}")
    out = tuple(conv_out_size(s, k, stride, pad) for s in x.shape[2:])
    if min(out) < 1:
        raise ShapeMismatch(f"conv3d: kernel {k} does not fit input {x.shape[2:]} with pad {pad}")
    cols = _im2col(x.data, k, stride, pad, out)
    wm = w.data.reshape(cout, -1)
    y = cols @ wm.T
    if b is not None:
        y = y + b.data
    xshape = x.shape

    def backward(g):
        gm, _ = _to_rows(g)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = _col2im(gm @ wm, xshape, k, stride, pad, out) if x.requires_grad else None
        gb = gm.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(_from_rows(y, n, out), parents, backward, "conv3d")


def conv_transpose3d(x, w, b=None, stride=1, pad=0):
    """Transposed convolution; ``w`` is ``(Cin, Cout, k, k, k)``.

    Exactly the adjoint of :func:`conv3d` with the same weight viewed as a
    ``(Cout_conv=Cin, Cin_conv=Cout)`` convolution kernel.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch("conv_transpose3d expects 5-D input and weight")
    n, cin = x.shape[:2]
    wcin, cout, k = w.shape[:3]
    if wcin != cin:
        raise ShapeMismatch(f"conv_transpose3d: input has {cin} channels, weight expects {wcin}")
    spatial = x.shape[2:]
    out = tuple(conv_transpose_out_size(s, k, stride, pad) for s in spatial)
    if min(out) < 1:
        raise ShapeMismatch(f"conv_transpose3d: empty output for input {spatial}")
    xm, _ = _to_rows(x.data)
    wm = w.data.reshape(cin, -1)
    oshape = (n, cout) + out
    y = _col2im(xm @ wm, oshape, k, stride, pad, spatial)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gcols = _im2col(g, k, stride, pad, spatial)
        gx = _from_rows(gcols @ wm.T, n, spatial) if x.requires_grad else None
        gw = (xm.T @ gcols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, backward, "conv_transpose3d")


# losses ---------------------------------------------------------------

def l1_loss(pred, target):
    if pred.shape != target.shape:
        raise ShapeMismatch(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    sign = np.sign(diff)
    return _make(np.abs(diff).mean(), (pred, target), lambda g: (g * sign / n, -g * sign / n), "l1_loss")


def bce_with_logits(logits, target: float):
    """Mean binary cross-entropy against a constant label, overflow safe."""
    z = logits.data
    loss = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    value = loss.mean()
    if not np.isfinite(value):
        raise NonFiniteValue("bce_with_logits produced a non-finite value")
    n = z.size
    return _make(value, (logits,), lambda g: (g * (expit(z) - target) / n,), "bce_with_logits")


# verification ----------------------------------------------------------

def grad_check(f, x: Tensor, eps=1e-5) -> float:
    """Maximum relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar tensor.  The error per element is
    ``|a - n| / max(1, |a| + |n|)``.
    """
    x.grad = None
    x.requires_grad = True
    y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteValue("grad_check: function value is not finite")
    y.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(x).item()
            flat[i] = orig - eps
            down = f(x).item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteValue("grad_check: perturbed function value is not finite")
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
    x.grad = None
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0

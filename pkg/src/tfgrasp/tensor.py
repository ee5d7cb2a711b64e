"""Dense float32 tensors with tape-based reverse-mode autodiff.

Every differentiable operation records an entry on the active tape
(define-by-run). `backward(loss)` replays the tape in reverse and
accumulates gradients into leaf tensors that require them. A float64
"shadow" mode (pass dtype=np.float64 at construction) is used by the
finite-difference verification suite.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, NumericError, ParameterError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """N-d array of floats plus gradient bookkeeping.

    `data` is stored row-major (C order). `grad` stays None until a
    backward pass deposits something. Tensors produced by operations are
    marked non-leaf; gradients persist only on leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, *inputs):
    """Wrap an op output; inherits requires_grad from inputs."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out.is_leaf = False
    return out


class TapeEntry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of forward operations.

    Execution order is a topological order of the dataflow graph, so
    replaying backward rules in reverse yields correct gradients for
    every leaf reachable from the loss.
    """

    def __init__(self):
        self.entries = []

    def record(self, inputs, output, backward_fn):
        self.entries.append(TapeEntry(inputs, output, backward_fn))

    def clear(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


_ACTIVE_TAPE = Tape()
_GRAD_ENABLED = True


def get_tape():
    return _ACTIVE_TAPE


@contextmanager
def use_tape(tape):
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


@contextmanager
def no_grad():
    """Disable tape recording (evaluation / finite-difference probes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _record(inputs, output, backward_fn):
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        _ACTIVE_TAPE.record(inputs, output, backward_fn)
    return output


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Repeated calls keep adding; use zero_grad/AdamW.zero_grad between
    steps. Intermediate (non-leaf) gradients live only in scratch space
    for the duration of the call.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads = {id(loss): np.ones_like(loss.data)}

    def deposit(t, g):
        if t.is_leaf:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            return
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    if loss.is_leaf:
        deposit(loss, np.ones_like(loss.data))
        return
    for entry in reversed(_ACTIVE_TAPE.entries):
        g_out = grads.pop(id(entry.output), None)
        if g_out is None:
            continue
        for t, g in zip(entry.inputs, entry.backward_fn(g_out)):
            if g is not None and t.requires_grad:
                deposit(t, g)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    out = _result(data, a, b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record((a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    out = _result(data, a, b)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record((a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _result(a.data * s, a)
    return _record((a,), out, lambda g: (g * s,))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: 0.5*x*(1 + erf(x/sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _result(x * cdf, a)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _record((a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    out = _result(y, a)
    return _record((a,), out, lambda g: (g * (y * (1.0 - y)),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}") from None
    out = _result(data, a, b)

    def bwd(g):
        da = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        db = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return da, db

    return _record((a, b), out, bwd)


def softmax(a: Tensor, axis: int) -> Tensor:
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    if not np.isfinite(x).all():
        raise NumericError("softmax input contains non-finite values")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, a)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record((a,), out, bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = _result(xn * gamma.data + beta.data, a, gamma, beta)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xn).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xn * (gx * xn).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record((a, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}") from None
    out = _result(data, a)
    return _record((a,), out, lambda g: (g.reshape(a.data.shape),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)
    out = _result(a.data.transpose(axes), a)
    return _record((a,), out, lambda g: (g.transpose(inv),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat shapes incompatible: " + ", ".join(str(t.shape) for t in tensors)) from None
    out = _result(data, *tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(tuple(tensors), out, bwd)


def roll(a: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(int(x) for x in axes)
    out = _result(np.roll(a.data, shifts, axis=axes), a)
    neg = tuple(-s for s in shifts)
    return _record((a,), out, lambda g: (np.roll(g, neg, axis=axes),))


def take_rows(table: Tensor, indices) -> Tensor:
    """Row gather: out[k] = table[indices[k]]; backward scatter-adds."""
    idx = np.asarray(indices)
    if idx.min() < 0 or idx.max() >= table.data.shape[0]:
        raise ShapeError(f"take_rows indices out of range for table {table.shape}")
    out = _result(table.data[idx], table)

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return _record((table,), out, bwd)


def strided_conv2d(x: Tensor, kernels: Tensor, stride: int) -> Tensor:
    """Non-overlapping p x p patch projection.

    x: [C, H, W] or [B, C, H, W]; kernels: [D, C, p, p] with p == stride.
    Equivalent to flattening each patch to a vector and applying one
    shared linear map; built from recorded reshape/permute/matmul so the
    backward pass needs no dedicated rule.
    """
    p = int(stride)
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4) or kernels.data.ndim != 4:
        raise ShapeError(f"strided_conv2d shapes {x.shape} / {kernels.shape} unsupported")
    d_out, c_k, ph, pw = kernels.data.shape
    if ph != p or pw != p:
        raise ShapeError(f"kernel spatial size {ph}x{pw} must equal stride {p}")
    c, h, w = x.data.shape[-3:]
    if c != c_k:
        raise ShapeError(f"input channels {c} != kernel channels {c_k}")
    if h % p or w % p:
        raise ShapeError(f"spatial size {h}x{w} not divisible by stride {p}")
    b = x.data.shape[0] if batched else 1
    hp, wp = h // p, w // p

    xb = x if batched else reshape(x, (1, c, h, w))
    patches = reshape(xb, (b, c, hp, p, wp, p))
    patches = permute(patches, (0, 2, 4, 1, 3, 5))          # [B, Hp, Wp, C, p, p]
    patches = reshape(patches, (b * hp * wp, c * p * p))
    weight = permute(reshape(kernels, (d_out, c * p * p)), (1, 0))
    y = matmul(patches, weight)                              # [B*Hp*Wp, D]
    y = permute(reshape(y, (b, hp, wp, d_out)), (0, 3, 1, 2))
    return y if batched else reshape(y, (d_out, hp, wp))


# ---------------------------------------------------------------------------
# reductions / losses
# ---------------------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    out = _result(a.data.sum(), a)
    return _record((a,), out, lambda g: (np.broadcast_to(g, a.data.shape),))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean (not sum) of squared differences over all elements."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = _result(np.asarray((diff * diff).mean(), dtype=pred.data.dtype), pred, target)

    def bwd(g):
        d = g * (2.0 / n) * diff
        return d, -d

    return _record((pred, target), out, bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adamw_update(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam step, in place on `param`.

    m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2, bias-corrected by step
    count t (1-based); p <- p - lr*(m_hat/(sqrt(v_hat)+eps) + wd*p).
    """
    if grad.shape != param.shape or m.shape != param.shape or v.shape != param.shape:
        raise ParameterError(
            f"adamw state/grad shape mismatch: param {param.shape}, grad {grad.shape}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-2):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adamw_update(p.data, p.grad, self.m[name], self.v[name], self.t,
                         self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

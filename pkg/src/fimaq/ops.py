"""Differentiable primitives.

Each function accepts Tensors or plain arrays/scalars and returns a Tensor.
Backward rules return one gradient per input in input order.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .autodiff import ShapeError, Tensor, as_tensor, record, unbroadcast

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return record(a.data * c, (a,), lambda g: (g * c,))


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return record(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


# -- reductions and shape ----------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take(x, index: int, axis: int) -> Tensor:
    """Select a single slice along ``axis`` (the axis is dropped)."""
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return record(np.take(x.data, index, axis=axis), (x,), back)


def concat(xs, axis: int) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record(np.concatenate([t.data for t in xs], axis=axis), xs, back)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return record(a.data @ b.data, (a, b), back)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input feature dim {x.shape[-1]} != weight in-dim {w.shape[1]}")
    inputs = (x, w) if b is None else (x, w, as_tensor(b))
    out = x.data @ w.data.T
    if b is not None:
        if inputs[2].shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {inputs[2].shape} != ({w.shape[0]},)")
        out = out + inputs[2].data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ w.data, g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return record(out, inputs, back)


# -- normalization / probability --------------------------------------------

def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine params must have shape ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def back(g):
        dxhat = g * gain.data
        dx = rstd * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(xhat * gain.data + bias.data, (x, gain, bias), back)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(_log_softmax(x.data))

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), back)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    ls = _log_softmax(x.data)
    p = np.exp(ls)
    return record(ls, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def kl_divergence(p_logits, q_logits) -> Tensor:
    """Row-wise KL(softmax(p) || softmax(q)) over the last axis.

    The raw (reference) logits come first, the perturbed ones second.
    """
    p, q = as_tensor(p_logits), as_tensor(q_logits)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes differ {p.shape} vs {q.shape}")
    if p.shape[-1] < 2:
        raise ValueError("kl_divergence needs at least 2 classes")
    lp, lq = _log_softmax(p.data), _log_softmax(q.data)
    pp, pq = np.exp(lp), np.exp(lq)
    d = lp - lq
    out = np.maximum((pp * d).sum(axis=-1), 0.0)

    def back(g):
        g = np.expand_dims(g, -1)
        gp = g * pp * (d - (pp * d).sum(axis=-1, keepdims=True))
        gq = g * (pq - pp)
        return gp, gq

    return record(out, (p, q), back)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels``."""
    z = as_tensor(logits)
    labels = np.asarray(labels)
    n = z.shape[0]
    ls = _log_softmax(z.data)
    loss = -ls[np.arange(n), labels].mean()

    def back(g):
        grad = np.exp(ls)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return record(np.asarray(loss), (z,), back)

"""Primitive registry: forward kernels and vector-Jacobian products."""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular as _solve_tri
from scipy.special import expit

from .tensor import NumericalError, Primitive, ShapeError, record, register

LOG_FLOOR = 1e-300


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def _add(a, b):
    _broadcast_check("add", a, b)
    return a + b


def _sub(a, b):
    _broadcast_check("sub", a, b)
    return a - b


def _mul(a, b):
    _broadcast_check("mul", a, b)
    return a * b


def _div(a, b):
    _broadcast_check("div", a, b)
    if np.any(np.abs(b) < LOG_FLOOR):
        raise NumericalError("div: divisor with magnitude below 1e-300")
    return a / b


register(Primitive("add", _add, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))))
register(Primitive("sub", _sub, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))))
register(Primitive("mul", _mul, lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))))
register(
    Primitive(
        "div",
        _div,
        lambda g, out, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
    )
)
register(Primitive("neg", lambda a: -a, lambda g, out, a: (-g,)))


# -- matmul ------------------------------------------------------------------

def _matmul(a, b):
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


def _matmul_vjp(g, out, a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    ga = _unbroadcast(ga, a2.shape)
    gb = _unbroadcast(gb, b2.shape)
    return ga.reshape(a.shape), gb.reshape(b.shape)


register(Primitive("matmul", _matmul, _matmul_vjp))


# -- elementwise unary -------------------------------------------------------

def _log(a):
    return np.log(np.maximum(a, LOG_FLOOR))


def _softplus(a):
    return np.logaddexp(0.0, a)


register(Primitive("exp", np.exp, lambda g, out, a: (g * out,)))
register(Primitive("log", _log, lambda g, out, a: (g / np.maximum(a, LOG_FLOOR),)))
register(Primitive("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),)))
register(Primitive("sigmoid", expit, lambda g, out, a: (g * out * (1.0 - out),)))
register(Primitive("softplus", _softplus, lambda g, out, a: (g * expit(a),)))
register(Primitive("square", np.square, lambda g, out, a: (2.0 * g * a,)))
register(Primitive("sqrt", np.sqrt, lambda g, out, a: (0.5 * g / out,)))


# -- reductions --------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _sum_vjp(g, out, a, axis=None, keepdims=False):
    return (_expand_reduced(g, a.shape, axis, keepdims),)


def _mean_vjp(g, out, a, axis=None, keepdims=False):
    n = a.size / max(out.size, 1) if axis is not None else a.size
    return (_expand_reduced(g, a.shape, axis, keepdims) / n,)


def _logsumexp(a, axis=None, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        s = np.squeeze(s, axis=axis) if axis is not None else s.reshape(())
    return s


def _logsumexp_vjp(g, out, a, axis=None, keepdims=False):
    out_k = _expand_reduced(out, a.shape, axis, keepdims)
    g_k = _expand_reduced(g, a.shape, axis, keepdims)
    return (g_k * np.exp(a - out_k),)


register(Primitive("sum", lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims), _sum_vjp))
register(Primitive("mean", lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims), _mean_vjp))
register(Primitive("logsumexp", _logsumexp, _logsumexp_vjp))


def _cumsum_vjp(g, out, a, axis=0):
    return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)


register(Primitive("cumsum", lambda a, axis=0: np.cumsum(a, axis=axis), _cumsum_vjp))


# -- structural --------------------------------------------------------------

def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def _getitem_vjp(g, out, a, index):
    ga = np.zeros_like(a)
    if _is_basic(index):
        ga[index] = g
    else:
        np.add.at(ga, index, g)
    return (ga,)


register(Primitive("getitem", lambda a, index: np.asarray(a[index]), _getitem_vjp))
register(
    Primitive(
        "reshape",
        lambda a, shape: np.reshape(a, shape),
        lambda g, out, a, shape: (np.reshape(g, a.shape),),
    )
)


def _transpose_vjp(g, out, a, axes=None):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


register(Primitive("transpose", lambda a, axes=None: np.transpose(a, axes), _transpose_vjp))


def _concat(*arrays, axis=0):
    return np.concatenate(arrays, axis=axis)


def _concat_vjp(g, out, *arrays, axis=0):
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _stack_vjp(g, out, *arrays, axis=0):
    return tuple(np.take(g, i, axis=axis) for i in range(len(arrays)))


register(Primitive("concat", _concat, _concat_vjp))
register(Primitive("stack", lambda *arrays, axis=0: np.stack(arrays, axis=axis), _stack_vjp))


# -- linear algebra ----------------------------------------------------------

def _batched(fn, L, B):
    # leading dims shared by L (..., D, D) and B (..., D, M)
    if L.ndim < 2 or L.shape[-1] != L.shape[-2]:
        raise ShapeError(f"solve_tril: factor must be square, got {L.shape}")
    if B.ndim != L.ndim or B.shape[:-1] != L.shape[:-1]:
        raise ShapeError(f"solve_tril: factor {L.shape} and right-hand side {B.shape} disagree")
    lead = L.shape[:-2]
    Lf = L.reshape((-1,) + L.shape[-2:])
    Bf = B.reshape((-1,) + B.shape[-2:])
    out = np.empty_like(Bf)
    for i in range(Lf.shape[0]):
        out[i] = fn(Lf[i], Bf[i])
    return out.reshape(lead + B.shape[-2:])


def _solve_tril(L, B):
    if np.any(np.abs(np.diagonal(L, axis1=-2, axis2=-1)) < LOG_FLOOR):
        raise NumericalError("solve_tril: singular triangular factor")
    return _batched(lambda l, b: _solve_tri(l, b, lower=True, check_finite=False), L, B)


def _solve_tril_vjp(g, out, L, B):
    gB = _batched(lambda l, b: _solve_tri(l, b, lower=True, trans="T", check_finite=False), L, g)
    gL = -np.tril(np.matmul(gB, np.swapaxes(out, -1, -2)))
    return gL, gB


register(Primitive("solve_tril", _solve_tril, _solve_tril_vjp))


# -- functional front-ends ---------------------------------------------------

def add(a, b):
    return record("add", [a, b])


def sub(a, b):
    return record("sub", [a, b])


def mul(a, b):
    return record("mul", [a, b])


def div(a, b):
    return record("div", [a, b])


def matmul(a, b):
    return record("matmul", [a, b])


def exp(a):
    return record("exp", [a])


def log(a):
    """Natural log with inputs clamped at 1e-300."""
    return record("log", [a])


def tanh(a):
    return record("tanh", [a])


def sigmoid(a):
    return record("sigmoid", [a])


def softplus(a):
    return record("softplus", [a])


def square(a):
    return record("square", [a])


def sqrt(a):
    return record("sqrt", [a])


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return record("sum", [a], axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return record("mean", [a], axis=axis, keepdims=keepdims)


def logsumexp(a, axis=None, keepdims=False):
    return record("logsumexp", [a], axis=axis, keepdims=keepdims)


def cumsum(a, axis=0):
    return record("cumsum", [a], axis=axis)


def reshape(a, shape):
    return record("reshape", [a], shape=tuple(shape))


def transpose(a, axes=None):
    return record("transpose", [a], axes=None if axes is None else tuple(axes))


def concat(tensors, axis=0):
    return record("concat", list(tensors), axis=axis)


def stack(tensors, axis=0):
    return record("stack", list(tensors), axis=axis)


def solve_tril(L, B):
    """Solve ``L @ X = B`` for lower-triangular ``L``, batched over leading dims."""
    return record("solve_tril", [L, B])


def log_sigmoid(a):
    return -softplus(-a)

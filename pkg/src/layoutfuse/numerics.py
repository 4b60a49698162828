"""Dense f64 linear algebra and the scaled dot-product attention primitive.

Everything here is pure.  ``count_ops`` installs a counter that
``scaled_dot_attention`` feeds, which lets the FLOP model be checked against
what actually executes.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_FD_STEP = 1e-5


@dataclass
class OpCounter:
    """Multiply-add and exponential tallies for attention kernels.

    A product of an (L x d) and a (d x m) operand is booked as ``2 * L * d * m``.
    """

    madds: int = 0
    exps: int = 0
    calls: int = 0


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar("layoutfuse_counter", default=None)


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with the row maximum subtracted first."""
    m = _as_matrix(m, "m")
    if not np.isfinite(m).all():
        raise NumericError("softmax input contains NaN or infinity")
    if m.shape[1] == 0:
        raise ShapeError("softmax over an empty row")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def scaled_dot_attention(q, k, v, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d)) V.

    Each output row depends only on the matching row of ``q``, which is what
    lets crop-and-merge evaluate a box of queries in isolation.
    """
    q = _as_matrix(q, "Q")
    k = _as_matrix(k, "K")
    v = _as_matrix(v, "V")
    if q.shape[1] < 1 or q.shape[1] != k.shape[1]:
        raise ShapeError(f"Q {q.shape} and K {k.shape} must share a non-zero inner dimension")
    if k.shape[0] < 1:
        raise ShapeError("attention needs at least one key")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"K {k.shape} and V {v.shape} must have the same number of rows")
    d = q.shape[1]
    probs = softmax_rows((q @ k.T) / math.sqrt(d))
    out = probs @ v

    counter = _counter.get()
    if counter is not None:
        rows, m = probs.shape
        counter.madds += 2 * rows * m * d + 2 * rows * m * v.shape[1]
        counter.exps += rows * m
        counter.calls += 1
    if return_weights:
        return out, probs
    return out


def attention_backward(q, k, v, probs, d_out):
    """Gradients of ``scaled_dot_attention`` w.r.t. Q, K, V given dL/d(out)."""
    scale = 1.0 / math.sqrt(q.shape[1])
    d_v = probs.T @ d_out
    d_p = d_out @ v.T
    d_s = probs * (d_p - np.sum(d_p * probs, axis=1, keepdims=True))
    d_q = (d_s @ k) * scale
    d_k = (d_s.T @ q) * scale
    return d_q, d_k, d_v


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(theta))
        flat[i] = orig - h
        down = float(f(theta))
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(theta.shape)

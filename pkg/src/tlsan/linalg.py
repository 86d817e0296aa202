"""Small dense kernel used by the model: products, activations, masked softmax, init.

Everything is float64. Vectors and matrices are plain numpy arrays; the helpers
here add the shape checks and numerically stable formulations the model relies on.
"""

import os

import numpy as np

DTYPE = np.float64

# set TLSAN_DEBUG_FINITE=1 to check every kernel output for NaN/Inf
_CHECK_FINITE = os.environ.get("TLSAN_DEBUG_FINITE", "") not in ("", "0")


class ShapeError(ValueError):
    pass


def _finite(x, what):
    if _CHECK_FINITE and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {what}")
    return x


def as_vec(data):
    v = np.ascontiguousarray(data, dtype=DTYPE)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    return v


def as_mat(data):
    m = np.ascontiguousarray(data, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return m


def matvec(M, v):
    M = np.asarray(M, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if M.ndim != 2 or v.ndim != 1 or M.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec dimension mismatch: {M.shape} x {v.shape}")
    return _finite(M @ v, "matvec")


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(pre):
    """Subgradient of ReLU; 0 at exactly 0."""
    return (pre > 0.0).astype(DTYPE)


def sigmoid(x):
    """Logistic function, evaluated on the branch that never overflows exp."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else out[()]


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def add(a, b):
    return _finite(np.add(a, b, dtype=DTYPE), "add")


def mul(a, b):
    return _finite(np.multiply(a, b, dtype=DTYPE), "mul")


def scale(a, s):
    return _finite(np.multiply(a, float(s), dtype=DTYPE), "scale")


def masked_softmax(scores, mask, axis=-1):
    """Softmax along ``axis`` over the positions where ``mask`` is true.

    ``mask`` broadcasts against ``scores``. Masked entries get exactly zero
    weight. Slices with no unmasked entry come back all-zero; callers that need
    the hard-error behaviour use :func:`softmax_over_positions`.
    """
    scores = np.asarray(scores, dtype=DTYPE)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    masked = np.where(mask, scores, -np.inf)
    top = np.max(masked, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(masked - top), 0.0)
    total = np.sum(e, axis=axis, keepdims=True)
    return e / np.where(total > 0.0, total, 1.0)


def softmax_over_positions(scores, mask):
    """Feature-wise softmax of a ``D x J`` score matrix.

    Each row (one feature dimension) is normalised across the ``J`` positions
    separately; masked positions receive weight 0 in every row.
    """
    scores = as_mat(scores)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (scores.shape[1],):
        raise ShapeError(f"mask shape {mask.shape} does not match {scores.shape[1]} positions")
    if not mask.any():
        raise ValueError("all positions are masked")
    return masked_softmax(scores, mask[None, :], axis=1)


def init_matrix(rng, rows, cols, scheme):
    """Initial values for one parameter tensor.

    Schemes: ``"glorot"`` (attention weights), ``"embedding"`` (lookup tables,
    uniform in +-0.5/cols), ``"zeros"`` (biases), ``"ones"`` (position table).
    """
    if scheme == "glorot":
        a = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-a, a, size=(rows, cols))
    if scheme == "embedding":
        a = 0.5 / cols
        return rng.uniform(-a, a, size=(rows, cols))
    if scheme == "zeros":
        return np.zeros((rows, cols), dtype=DTYPE)
    if scheme == "ones":
        return np.ones((rows, cols), dtype=DTYPE)
    raise ValueError(f"unknown init scheme {scheme!r}")


def block_diagonal_mask(dim, blocks):
    """``dim x dim`` 0/1 matrix with ``blocks`` equal square blocks on the diagonal."""
    if dim % blocks:
        raise ShapeError(f"{dim} features cannot be split into {blocks} equal heads")
    width = dim // blocks
    head = np.arange(dim) // width
    return (head[:, None] == head[None, :]).astype(DTYPE)

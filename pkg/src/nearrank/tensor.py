"""Dense float64 tensors, mode unfoldings and norms.

Tensors are plain :class:`numpy.ndarray` objects in C (row-major) order.
:func:`as_tensor` is the validating constructor used throughout the package;
it returns a read-only float64 array so that tensors can be shared between
workers without copying.

Unfolding convention
--------------------
The mode-``k`` unfolding of a tensor of shape ``(n_0, ..., n_{N-1})`` is the
``n_k x prod(n_j, j != k)`` matrix obtained by moving axis ``k`` to the front
and reshaping in C order.  Column ``j`` therefore holds the mode-``k`` fiber
whose remaining indices ``(i_0, .., i_{k-1}, i_{k+1}, .., i_{N-1})`` have
row-major linear index ``j`` (the last index varies fastest).  Any lossless
convention gives the same singular values; this one is fixed so that
:func:`mode_fold` is its exact inverse.
"""

import math

import numpy as np

__all__ = [
    "as_tensor",
    "as_matrix",
    "mode_unfold",
    "mode_fold",
    "frobenius_norm",
    "matmul",
]


def as_tensor(data, shape=None):
    """Validate ``data`` and return it as a read-only float64 C-ordered array.

    ``shape`` may be given to build a tensor from a flat sequence.
    """
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != arr.size:
            raise ValueError(f"shape {shape} needs {math.prod(shape)} entries, got {arr.size}")
        arr = arr.reshape(shape)
    if arr.ndim < 1:
        raise ValueError("a tensor needs at least one mode")
    if any(s < 1 for s in arr.shape):
        raise ValueError(f"all dimensions must be >= 1, got {arr.shape}")
    arr.flags.writeable = False
    return arr


def as_matrix(data):
    """:func:`as_tensor` restricted to order 2."""
    arr = as_tensor(data)
    if arr.ndim != 2:
        raise ValueError(f"expected a matrix, got order-{arr.ndim} tensor")
    return arr


def mode_unfold(t, k):
    """Return the mode-``k`` unfolding of ``t`` (see module docstring)."""
    t = np.asarray(t, dtype=np.float64)
    if not 0 <= k < t.ndim:
        raise IndexError(f"mode {k} out of range for order-{t.ndim} tensor")
    return np.moveaxis(t, k, 0).reshape(t.shape[k], -1)


def mode_fold(m, k, shape):
    """Inverse of :func:`mode_unfold`: rebuild the tensor of ``shape``."""
    shape = tuple(shape)
    if not 0 <= k < len(shape):
        raise IndexError(f"mode {k} out of range for order-{len(shape)} tensor")
    front = (shape[k],) + shape[:k] + shape[k + 1:]
    return np.moveaxis(np.asarray(m).reshape(front), 0, k)


def frobenius_norm(t):
    """Square root of the sum of squared entries."""
    t = np.asarray(t, dtype=np.float64)
    # scale first so huge or tiny entries do not overflow/underflow
    scale = np.max(np.abs(t)) if t.size else 0.0
    if scale == 0.0 or not np.isfinite(scale):
        return float(scale)
    return float(scale * np.sqrt(np.sum(np.square(t / scale))))


def matmul(a, b):
    """Matrix product with shape checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b

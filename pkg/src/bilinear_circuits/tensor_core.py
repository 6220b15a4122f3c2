"""Dense tensors, the generalized tensor inner product, unfoldings and HOSVD.

Tensors are plain ``numpy.ndarray`` objects of order 1 to 4 with a float64
(default) or float32 dtype. :func:`as_tensor` validates that contract.

Axis numbering is zero-based. The written notation ``U ._{jk} V`` counts axes
from one, so ``._{12}`` is ``tensor_inner(U, V, 0, 1)`` and ``._{21}`` is
``tensor_inner(U, V, 1, 0)``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ArgumentError, DimensionError

MAX_ORDER = 4
_FLOAT_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))


def as_tensor(data, dtype=None) -> np.ndarray:
    """Return ``data`` as a validated tensor (order 1-4, positive extents, float dtype)."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    if not 1 <= arr.ndim <= MAX_ORDER:
        raise ArgumentError(f"tensor order must be 1-{MAX_ORDER}, got {arr.ndim}")
    if any(n <= 0 for n in arr.shape):
        raise ArgumentError(f"tensor extents must be positive, got {arr.shape}")
    return arr


def _check_axis(t: np.ndarray, axis: int, name: str) -> None:
    if not isinstance(axis, (int, np.integer)) or not 0 <= axis < t.ndim:
        raise ArgumentError(f"axis {axis} out of range for {name} of order {t.ndim}")


def tensor_inner(U, V, j: int, k: int) -> np.ndarray:
    """Contract axis ``j`` of ``U`` with axis ``k`` of ``V``.

    The result's axes are the surviving axes of ``U`` in their original order
    followed by the surviving axes of ``V`` in their original order, so its
    order is ``U.ndim + V.ndim - 2``. Two vectors give a 0-d array.

    The sum runs over the contracted index in ascending order with one
    multiply and one add per term, so results are bit-identical to a naive
    nested loop that accumulates from zero.
    """
    U = as_tensor(U)
    V = as_tensor(V)
    _check_axis(U, j, "U")
    _check_axis(V, k, "V")
    if U.shape[j] != V.shape[k]:
        raise DimensionError(
            f"cannot contract axis {j} of U (extent {U.shape[j]}) "
            f"with axis {k} of V (extent {V.shape[k]})"
        )
    if U.ndim + V.ndim - 2 > MAX_ORDER:
        raise ArgumentError(f"result order {U.ndim + V.ndim - 2} exceeds {MAX_ORDER}")

    Um = np.moveaxis(U, j, -1)
    Vm = np.moveaxis(V, k, 0)
    dtype = np.result_type(U, V)
    acc = np.zeros(Um.shape[:-1] + Vm.shape[1:], dtype=dtype)
    for b in range(U.shape[j]):
        acc += np.multiply.outer(Um[..., b], Vm[b])
    return acc


def mode_unfold(T, n: int) -> np.ndarray:
    """Mode-``n`` unfolding.

    Row ``r`` holds every entry with index ``r`` on axis ``n``; columns run over
    the remaining axes in ascending axis order, last axis fastest (row-major).
    """
    T = as_tensor(T)
    if T.ndim < 2:
        raise ArgumentError("mode_unfold needs a tensor of order >= 2")
    _check_axis(T, n, "T")
    return np.ascontiguousarray(np.moveaxis(T, n, 0).reshape(T.shape[n], -1))


def mode_fold(M: np.ndarray, n: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`mode_unfold`."""
    shape = tuple(shape)
    rest = shape[:n] + shape[n + 1:]
    return np.moveaxis(np.asarray(M).reshape((shape[n],) + rest), 0, n)


def mode_multiply(T: np.ndarray, M: np.ndarray, n: int) -> np.ndarray:
    """Multiply every mode-``n`` fiber of ``T`` by the matrix ``M``."""
    out = np.tensordot(M, T, axes=(1, n))
    return np.moveaxis(out, 0, n)


def fix_signs(U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip columns so each column's largest-magnitude entry is nonnegative.

    Ties go to the first such entry. Returns the flipped matrix and the
    applied signs (+1/-1 per column).
    """
    if U.size == 0:
        return U.copy(), np.ones(U.shape[1])
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[idx, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return U * signs, signs


def hosvd(T, ranks: Sequence[int] | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Higher-order SVD.

    Each factor holds the leading left singular vectors of the corresponding
    mode unfolding (descending singular values, signs fixed by
    :func:`fix_signs`). ``ranks`` truncates each factor; without it every
    factor keeps ``min(extent, product of other extents)`` columns and
    :func:`tucker_reconstruct` reproduces ``T``.
    """
    T = as_tensor(T)
    if T.ndim < 2:
        raise ArgumentError("hosvd needs a tensor of order 2-4")
    if not np.all(np.isfinite(T)):
        raise ArgumentError("hosvd input contains non-finite entries")
    if ranks is not None and len(ranks) != T.ndim:
        raise ArgumentError(f"expected {T.ndim} ranks, got {len(ranks)}")

    factors = []
    for n in range(T.ndim):
        u, _, _ = np.linalg.svd(mode_unfold(T, n), full_matrices=False)
        u, _ = fix_signs(u)
        if ranks is not None:
            r = ranks[n]
            if not 1 <= r <= u.shape[1]:
                raise ArgumentError(f"rank {r} for mode {n} outside 1..{u.shape[1]}")
            u = u[:, :r]
        factors.append(u)

    core = T
    for n, F in enumerate(factors):
        core = mode_multiply(core, F.T, n)
    return core, factors


def mode_singular_values(T) -> list[np.ndarray]:
    T = as_tensor(T)
    return [np.linalg.svd(mode_unfold(T, n), compute_uv=False) for n in range(T.ndim)]


def tucker_reconstruct(core: np.ndarray, factors: Sequence[np.ndarray]) -> np.ndarray:
    out = core
    for n, F in enumerate(factors):
        out = mode_multiply(out, F, n)
    return out

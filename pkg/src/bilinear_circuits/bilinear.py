"""Bilinear MLP layers and their third-order tensor form.

A bilinear layer maps ``x`` to ``(W1 x) * (W2 x)``. The same map is the
quadratic form ``x ._{12} B ._{21} x`` with ``B[i, j, k] = W1[i, j] * W2[i, k]``.
Axis order of ``B`` is (output, left input, right input).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, CapacityError, DimensionError, PreconditionError
from .tensor_core import tensor_inner

DEFAULT_MATERIALIZATION_LIMIT = 2 ** 26


@dataclass(frozen=True)
class BilinearLayer:
    """Paired weight matrices of a bilinear MLP.

    ``W1`` feeds the modifier side and ``W2`` the default-output side. With
    ``one_plus_modifier`` the layer computes ``(W1 x + 1) * (W2 x)``. Biases
    ``b1``/``b2`` are added inside the respective factor.
    """

    W1: np.ndarray
    W2: np.ndarray
    one_plus_modifier: bool = False
    b1: np.ndarray | None = None
    b2: np.ndarray | None = None

    def __post_init__(self):
        W1 = np.asarray(self.W1)
        if W1.dtype.kind != "f":
            W1 = W1.astype(float)
        W2 = np.asarray(self.W2, dtype=W1.dtype)
        if W1.ndim != 2 or W1.shape != W2.shape:
            raise DimensionError(f"W1 and W2 must be matrices of equal shape, got {W1.shape} and {W2.shape}")
        if min(W1.shape) < 1:
            raise DimensionError("layer extents must be positive")
        object.__setattr__(self, "W1", W1)
        object.__setattr__(self, "W2", W2)
        for name in ("b1", "b2"):
            b = getattr(self, name)
            if b is not None:
                b = np.asarray(b, dtype=W1.dtype)
                if b.shape != (W1.shape[0],):
                    raise DimensionError(f"{name} must have length {W1.shape[0]}, got shape {b.shape}")
                object.__setattr__(self, name, b)

    @property
    def d_out(self) -> int:
        return self.W1.shape[0]

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def has_bias(self) -> bool:
        return self.b1 is not None or self.b2 is not None


def _check_input(layer_or_n, x) -> np.ndarray:
    n = layer_or_n if isinstance(layer_or_n, int) else layer_or_n.d_in
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(float)
    if x.shape[-1:] != (n,):
        raise DimensionError(f"input has length {x.shape[-1:]}, layer expects {n}")
    return x


def forward(layer: BilinearLayer, x) -> np.ndarray:
    """Apply the layer to a vector, or to each row of a batch."""
    x = _check_input(layer, x)
    left = x @ layer.W1.T
    right = x @ layer.W2.T
    if layer.b1 is not None:
        left = left + layer.b1
    if layer.b2 is not None:
        right = right + layer.b2
    if layer.one_plus_modifier:
        left = left + 1.0
    return left * right


def build_z(m: int, dtype=np.float64) -> np.ndarray:
    """Superdiagonal ``m x m x m`` tensor: one where all three indices agree."""
    if m < 1:
        raise ArgumentError(f"m must be positive, got {m}")
    Z = np.zeros((m, m, m), dtype=dtype)
    idx = np.arange(m)
    Z[idx, idx, idx] = 1.0
    return Z


@dataclass
class ThirdOrderForm:
    """Order-3 tensor view of a bilinear layer, dense or factored.

    The factored form keeps ``W1`` and ``W2`` and never builds ``B``. For a
    one-plus-modifier layer the extra linear term ``W2 x`` is carried in
    ``linear`` and is not part of ``B``.
    """

    W1: np.ndarray
    W2: np.ndarray
    B: np.ndarray | None = None
    linear: np.ndarray | None = None
    materialization_limit: int = DEFAULT_MATERIALIZATION_LIMIT

    @classmethod
    def factored(cls, layer: BilinearLayer, materialization_limit: int = DEFAULT_MATERIALIZATION_LIMIT):
        _require_bias_free(layer)
        linear = layer.W2 if layer.one_plus_modifier else None
        return cls(layer.W1, layer.W2, None, linear, materialization_limit)

    @property
    def is_dense(self) -> bool:
        return self.B is not None

    @property
    def shape(self) -> tuple[int, int, int]:
        m, n = self.W1.shape
        return (m, n, n)

    @property
    def size(self) -> int:
        m, n, _ = self.shape
        return m * n * n

    def dense(self) -> np.ndarray:
        """Return ``B``, materializing it if within the limit."""
        if self.B is not None:
            return self.B
        if self.size > self.materialization_limit:
            raise CapacityError(
                f"dense B would have {self.size} elements (limit {self.materialization_limit}); "
                "use the factored form"
            )
        return _elementwise_b(self.W1, self.W2)


def _require_bias_free(layer: BilinearLayer) -> None:
    if layer.has_bias:
        raise PreconditionError("B-form analyses require a bias-free layer")


def _elementwise_b(W1: np.ndarray, W2: np.ndarray) -> np.ndarray:
    return W1[:, :, None] * W2[:, None, :]


def build_b(layer: BilinearLayer, materialization_limit: int = DEFAULT_MATERIALIZATION_LIMIT) -> ThirdOrderForm:
    """Dense third-order form with ``B[i, j, k] = W1[i, j] * W2[i, k]``."""
    _require_bias_free(layer)
    m, n = layer.W1.shape
    if m * n * n > materialization_limit:
        raise CapacityError(
            f"dense B would have {m * n * n} elements (limit {materialization_limit}); use ThirdOrderForm.factored"
        )
    linear = layer.W2 if layer.one_plus_modifier else None
    return ThirdOrderForm(layer.W1, layer.W2, _elementwise_b(layer.W1, layer.W2), linear, materialization_limit)


def build_b_by_contraction(layer: BilinearLayer) -> np.ndarray:
    """``B`` via ``W1 ._{12} Z ._{21} W2`` and an axis swap.

    The contraction yields axes (left input, output, right input); swapping the
    first two gives the canonical order used by :func:`build_b`.
    """
    _require_bias_free(layer)
    Z = build_z(layer.d_out, layer.W1.dtype)
    T = tensor_inner(layer.W1, Z, 0, 1)
    T = tensor_inner(T, layer.W2, 1, 0)
    return np.ascontiguousarray(np.transpose(T, (1, 0, 2)))


def apply_quadratic(bform: ThirdOrderForm, x, y, order: str = "left") -> np.ndarray:
    """Evaluate ``x ._{12} B ._{21} y``, i.e. ``sum_jk x_j y_k B[:, j, k]``.

    Factored forms compute ``(W1 x) * (W2 y)``. Dense forms contract
    explicitly, with ``x`` first (``order="left"``) or ``y`` first
    (``order="right"``). The linear term of a one-plus layer is not included;
    see :func:`evaluate_form`.
    """
    n = bform.shape[1]
    x = _check_input(n, x)
    y = _check_input(n, y)
    if x.ndim != 1 or y.ndim != 1:
        raise DimensionError("apply_quadratic takes single vectors")
    if not bform.is_dense:
        return (bform.W1 @ x) * (bform.W2 @ y)
    B = bform.B
    if order == "left":
        return tensor_inner(tensor_inner(x, B, 0, 1), y, 1, 0)
    if order == "right":
        return tensor_inner(tensor_inner(B, y, 2, 0), x, 1, 0)
    raise ArgumentError(f"order must be 'left' or 'right', got {order!r}")


def evaluate_form(bform: ThirdOrderForm, x) -> np.ndarray:
    """Quadratic part plus the separately carried linear term, if any."""
    out = apply_quadratic(bform, x, x)
    if bform.linear is not None:
        out = out + bform.linear @ np.asarray(x, dtype=out.dtype)
    return out


@dataclass(frozen=True)
class FeatureSet:
    """Feature dictionary ``D`` (rows are directions) and nonnegative coefficients ``a``."""

    D: np.ndarray
    a: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        D = np.asarray(self.D, dtype=float)
        a = np.asarray(self.a, dtype=float)
        if D.ndim != 2 or a.shape != (D.shape[0],):
            raise DimensionError(f"D must be n_features x d and a length n_features; got {D.shape}, {a.shape}")
        if np.any(a < 0):
            raise ArgumentError("feature coefficients must be nonnegative")
        if self.normalized and not np.allclose(np.linalg.norm(D, axis=1), 1.0, atol=1e-9):
            raise ArgumentError("feature directions must have unit norm (pass normalized=False to skip)")
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "a", a)

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.a)

    def combine(self) -> np.ndarray:
        return self.a @ self.D


def pairwise_decompose(bform: ThirdOrderForm, features: FeatureSet) -> dict[tuple[int, int], np.ndarray]:
    """Split the layer output on ``x = sum_i a_i d_i`` into pairwise terms.

    Entry ``(i, j)`` is ``a_i a_j (d_i ._{12} B ._{21} d_j)`` for active
    ``i, j``; keys come in ascending order and the terms sum to the layer
    output.
    """
    if features.D.shape[1] != bform.shape[1]:
        raise DimensionError(f"features have dimension {features.D.shape[1]}, layer expects {bform.shape[1]}")
    R = features.active
    left = features.D[R] @ bform.W1.T
    right = features.D[R] @ bform.W2.T
    out = {}
    for p, i in enumerate(R):
        for q, j in enumerate(R):
            if bform.is_dense:
                term = apply_quadratic(bform, features.D[i], features.D[j])
            else:
                term = left[p] * right[q]
            out[(int(i), int(j))] = features.a[i] * features.a[j] * term
    return out

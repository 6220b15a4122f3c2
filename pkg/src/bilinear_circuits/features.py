"""Feature-construction analysis for bilinear and elementwise MLP layers.

Covers modifier vectors, default-output-feature bases (SVD and ICA), the
modifications an input feature makes to those default features, per-feature
contribution scores, and rankings over ``B`` coefficients and feature pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import erf

from .bilinear import BilinearLayer, FeatureSet, ThirdOrderForm, apply_quadratic
from .errors import ArgumentError, DimensionError, PreconditionError
from .ica import fastica
from .tensor_core import fix_signs

HEURISTIC_PAIRS_WARNING = (
    "correlated_pair_ranking is a heuristic scoring of correlated, mutually modifying "
    "feature pairs; scores are not a ground-truth measure"
)
ICA_GAUSSIAN_WARNING = "ICA unidentifiable: every whitened direction is near-Gaussian"


def _relu(z):
    return np.maximum(z, 0.0)


def _gelu(z):
    return 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))


def _identity(z):
    return z


ACTIVATIONS = {"relu": _relu, "gelu": _gelu, "identity": _identity}


def modifier_vector(kind: str, weights, x) -> np.ndarray:
    """The vector ``m(x)`` with ``layer(x) = m(x) * preactivation``.

    For elementwise kinds (``relu``, ``gelu``, ``identity``) ``weights`` is the
    matrix ``W`` and ``m(x)_i = sigma(Wx)_i / (Wx)_i``, taken as 0 where
    ``(Wx)_i == 0``. For ``bilinear`` ``weights`` is a :class:`BilinearLayer`
    and ``m(x) = W1 x`` (plus one for a one-plus-modifier layer); the
    preactivation it scales is ``W2 x``.
    """
    x = np.asarray(x, dtype=float)
    if kind == "bilinear":
        if not isinstance(weights, BilinearLayer):
            raise ArgumentError("bilinear modifier needs a BilinearLayer")
        if weights.has_bias:
            raise PreconditionError("modifier analysis requires a bias-free layer")
        m = weights.W1 @ x
        return m + 1.0 if weights.one_plus_modifier else m
    if kind not in ACTIVATIONS:
        raise ArgumentError(f"unknown activation kind {kind!r}")
    W = np.asarray(weights, dtype=float)
    if W.shape[-1] != x.shape[-1]:
        raise DimensionError(f"W has {W.shape[-1]} columns, x has length {x.shape[-1]}")
    z = W @ x
    post = ACTIVATIONS[kind](z)
    out = np.zeros_like(z)
    nz = z != 0
    out[nz] = post[nz] / z[nz]
    return out


@dataclass
class Basis:
    """Factorization ``W ~ U @ Vt`` with ``U``'s columns as feature directions."""

    U: np.ndarray
    Vt: np.ndarray | None
    method: str
    residual: float | None = None
    rank_deficient: bool = False
    warnings: list[str] = field(default_factory=list)
    sources: np.ndarray | None = None
    n_iter: int | None = None


def svd_basis(W) -> Basis:
    """Left singular vectors as ``U`` and ``Sigma V^T`` as ``Vt``."""
    W = np.asarray(W, dtype=float)
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    U, signs = fix_signs(U)
    Vt = (s * signs)[:, None] * Vt
    return Basis(U, Vt, "svd", float(np.max(np.abs(W - U @ Vt))))


class Regression(NamedTuple):
    Vt: np.ndarray
    residual: float
    rank_deficient: bool


def right_components(U, W) -> Regression:
    """Least-squares ``Vt`` minimizing ``||W - U Vt||_F`` (minimum-norm when ``U`` is rank deficient)."""
    U = np.asarray(U, dtype=float)
    W = np.asarray(W, dtype=float)
    if U.shape[0] != W.shape[0]:
        raise DimensionError(f"U has {U.shape[0]} rows, W has {W.shape[0]}")
    Vt = np.linalg.pinv(U) @ W
    rank = np.linalg.matrix_rank(U)
    return Regression(Vt, float(np.max(np.abs(W - U @ Vt))), bool(rank < U.shape[1]))


def ica_basis(preacts, n_components: int, seed: int = 0, weights=None,
              tol: float = 1e-6, max_iter: int = 1000) -> Basis:
    """Independent directions of the pre-activation data as ``U``.

    ``preacts`` is ``samples x m`` (e.g. rows of ``X W2^T``). Columns of ``U``
    are unit-norm mixing directions with the largest-magnitude entry
    nonnegative. Pass ``weights`` (the ``m x n`` matrix that produced the
    pre-activations) to fill ``Vt`` by least squares.

    When every whitened direction is near-Gaussian the basis carries a
    warning, and a failure to converge falls back to the whitening directions
    instead of raising, since no rotation is identifiable.
    """
    preacts = np.asarray(preacts, dtype=float)
    probe = fastica(preacts, n_components, seed=seed, tol=tol, max_iter=max_iter, allow_nonconvergence=True)
    if not probe.converged and not probe.near_gaussian:
        fastica(preacts, n_components, seed=seed, tol=tol, max_iter=max_iter)  # raises ConvergenceError
    U = probe.mixing / np.linalg.norm(probe.mixing, axis=0)
    U, signs = fix_signs(U)
    scale = np.linalg.norm(probe.mixing, axis=0) * signs
    warnings = [ICA_GAUSSIAN_WARNING] if probe.near_gaussian else []
    basis = Basis(U, None, "ica", warnings=warnings, sources=probe.sources * scale, n_iter=probe.n_iter)
    if weights is not None:
        reg = right_components(U, weights)
        basis.Vt, basis.residual, basis.rank_deficient = reg
    return basis


def modified_default_features(d_i, W1, U2) -> np.ndarray:
    """Default output features after modification by input feature ``d_i``.

    Column ``l`` is ``(W1 d_i) * U2[:, l]``.
    """
    d_i = np.asarray(d_i, dtype=float)
    W1 = np.asarray(W1, dtype=float)
    U2 = np.asarray(U2, dtype=float)
    if W1.shape[1] != d_i.shape[0] or U2.shape[0] != W1.shape[0]:
        raise DimensionError(f"incompatible shapes d_i {d_i.shape}, W1 {W1.shape}, U2 {U2.shape}")
    v = W1 @ d_i
    return v[:, None] * U2


def modification_magnitudes(d_i, W1, U2) -> np.ndarray:
    U2 = np.asarray(U2, dtype=float)
    return np.linalg.norm(U2 - modified_default_features(d_i, W1, U2), axis=0)


def _topk_desc(scores: np.ndarray, k: int) -> list[int]:
    # stable sort on the negated scores keeps ascending index among ties
    return [int(i) for i in np.argsort(-scores, kind="stable")[:k]]


def topk_modified(d_i, W1, U2, k: int) -> list[int]:
    r = np.asarray(U2).shape[1]
    if not 0 <= k <= r:
        raise ArgumentError(f"k must be in 0..{r}, got {k}")
    return _topk_desc(modification_magnitudes(d_i, W1, U2), k)


@dataclass
class ModificationReport:
    modified: dict[int, np.ndarray]
    magnitudes: dict[int, np.ndarray]
    topk: dict[int, list[int]]


def modification_report(D, W1, U2, k: int) -> ModificationReport:
    """Per-feature modified bases, magnitudes and top-k indices for each row of ``D``."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    rep = ModificationReport({}, {}, {})
    for i, d in enumerate(D):
        rep.modified[i] = modified_default_features(d, W1, U2)
        rep.magnitudes[i] = np.linalg.norm(np.asarray(U2) - rep.modified[i], axis=0)
        rep.topk[i] = _topk_desc(rep.magnitudes[i], k)
    return rep


def contribution_linear(W, d_i, a_i: float, d_out) -> float:
    """``(W d_i a_i)^T d_out``."""
    return float((np.asarray(W) @ np.asarray(d_i) * a_i) @ np.asarray(d_out))


def contribution_pairwise(bform: ThirdOrderForm, i: int, features: FeatureSet, d_out) -> float:
    """Contribution of active feature ``i`` to output direction ``d_out``.

    Self-interaction counts fully; each cross interaction with another active
    feature is split evenly between the two, so contributions over all active
    features add up to ``layer(x)^T d_out``.
    """
    R = features.active
    if i not in R:
        raise ArgumentError(f"feature {i} is not active")
    a, D = features.a, features.D
    total = a[i] * a[i] * apply_quadratic(bform, D[i], D[i])
    for j in R:
        if j == i:
            continue
        cross = apply_quadratic(bform, D[i], D[j]) + apply_quadratic(bform, D[j], D[i])
        total = total + 0.5 * a[i] * a[j] * cross
    return float(total @ np.asarray(d_out, dtype=float))


def top_b_coefficients(bform: ThirdOrderForm, k: int) -> list[tuple[int, int, int, float]]:
    """``k`` entries of ``B`` with the largest magnitude, ties in lexicographic index order."""
    B = bform.dense()
    flat = B.ravel()
    k = min(k, flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")[:k]
    out = []
    for f in order:
        i, j, l = np.unravel_index(f, B.shape)
        out.append((int(i), int(j), int(l), float(flat[f])))
    return out


def _abs_corr(A: np.ndarray) -> np.ndarray:
    Ac = A - A.mean(axis=0)
    sd = np.sqrt((Ac ** 2).mean(axis=0))
    ok = sd > 0
    C = np.zeros((A.shape[1], A.shape[1]))
    Z = Ac[:, ok] / sd[ok]
    C[np.ix_(ok, ok)] = np.abs(Z.T @ Z / A.shape[0])
    return C


def correlated_pair_ranking(activations, D, W1, W2, U2, k: int) -> list[dict]:
    """Rank ordered feature pairs ``(l, m)`` by a heuristic interaction score.

    score = |corr(a_l, a_m)| * max_f( mod_f(d_m) * |mean(a_l) * U2[:, f] . W2 d_l| )

    where ``mod_f(d_m)`` is how much ``d_m`` modifies default feature ``f``.
    Constant activation columns have correlation 0. Sorted by descending score,
    then ascending ``(l, m)``.
    """
    A = np.asarray(activations, dtype=float)
    D = np.asarray(D, dtype=float)
    U2 = np.asarray(U2, dtype=float)
    nf = A.shape[1]
    if D.shape[0] != nf:
        raise DimensionError(f"{nf} activation columns but {D.shape[0]} feature directions")
    corr = _abs_corr(A)
    mod = np.stack([modification_magnitudes(d, W1, U2) for d in D])  # nf x r
    induced = np.abs(A.mean(axis=0)[:, None] * (D @ np.asarray(W2).T @ U2))  # nf x r
    pairs = []
    for l in range(nf):
        for m in range(nf):
            if l == m:
                continue
            score = corr[l, m] * float(np.max(mod[m] * induced[l]))
            pairs.append((-score, l, m))
    pairs.sort()
    return [{"pair": [l, m], "score": -s} for s, l, m in pairs[:k]]

"""Symmetric fixed-point ICA with a logcosh contrast."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConvergenceError
from .rng import stream

GAUSSIAN_KURTOSIS_BAND = 0.05


@dataclass
class ICAResult:
    mixing: np.ndarray  # m x r, columns are source directions in data space
    unmixing: np.ndarray  # r x m
    sources: np.ndarray  # samples x r
    mean: np.ndarray
    n_iter: int
    whitened_kurtosis: np.ndarray
    near_gaussian: bool
    converged: bool


def whiten(X: np.ndarray, n_components: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """PCA whitening. Returns (whitened data, whitening matrix K, mean)."""
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / Xc.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    evals, evecs = evals[order], evecs[:, order]
    if evals[-1] <= 1e-12 * max(evals[0], 1e-300):
        raise ArgumentError("data covariance is rank deficient for the requested number of components")
    K = evecs.T / np.sqrt(evals)[:, None]
    return Xc @ K.T, K, mean


def _sym_decorrelate(W: np.ndarray) -> np.ndarray:
    s, u = np.linalg.eigh(W @ W.T)
    s = np.clip(s, np.finfo(W.dtype).tiny, None)
    return (u / np.sqrt(s)) @ u.T @ W


def excess_kurtosis(Z: np.ndarray) -> np.ndarray:
    Zs = (Z - Z.mean(axis=0)) / Z.std(axis=0)
    return np.mean(Zs ** 4, axis=0) - 3.0


def fastica(
    X: np.ndarray,
    n_components: int,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 1000,
    allow_nonconvergence: bool = False,
) -> ICAResult:
    """Estimate ``n_components`` independent directions of the rows of ``X``.

    Raises :class:`ConvergenceError` when the symmetric update has not settled
    to ``tol`` after ``max_iter`` iterations, unless ``allow_nonconvergence``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ArgumentError("ICA input must be a samples x features matrix")
    m = X.shape[1]
    if not 1 <= n_components <= m:
        raise ArgumentError(f"n_components must be in 1..{m}, got {n_components}")

    Z, K, mean = whiten(X, n_components)
    kurt = excess_kurtosis(Z)
    near_gaussian = bool(np.all(np.abs(kurt) <= GAUSSIAN_KURTOSIS_BAND))

    W = _sym_decorrelate(stream(seed, "ica").normal(size=(n_components, n_components)))
    n = Z.shape[0]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Y = Z @ W.T
        g = np.tanh(Y)
        g_prime = 1.0 - g ** 2
        W_new = _sym_decorrelate(g.T @ Z / n - g_prime.mean(axis=0)[:, None] * W)
        lim = np.max(np.abs(np.abs(np.einsum("ij,ij->i", W_new, W)) - 1.0))
        W = W_new
        if lim < tol:
            converged = True
            break
    if not converged and not allow_nonconvergence:
        raise ConvergenceError(f"ICA did not converge within {max_iter} iterations", it)

    unmixing = W @ K
    mixing = np.linalg.pinv(unmixing)
    return ICAResult(mixing, unmixing, (X - mean) @ unmixing.T, mean, it, kurt, near_gaussian, converged)

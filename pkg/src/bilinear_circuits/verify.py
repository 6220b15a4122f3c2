"""Equivalence suites run against a trained or random model.

Each check yields a :class:`Check` with the measured error and its tolerance.
A check passes only when the error is a finite number within tolerance, so
NaN or infinite weights always fail.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

from . import circuits
from .bilinear import (
    BilinearLayer,
    FeatureSet,
    ThirdOrderForm,
    apply_quadratic,
    build_b,
    build_b_by_contraction,
    evaluate_form,
    forward,
    pairwise_decompose,
)
from .errors import ArgumentError
from .rng import stream
from .training.gradcheck import grad_check

SUITES = ("bform", "expansion", "gradcheck")
F32_TOL = 1e-4


def numeric_dtype() -> np.dtype:
    """dtype for the numeric suites, from ``BLC_DTYPE`` (``f64`` default, or ``f32``)."""
    value = os.environ.get("BLC_DTYPE", "f64").lower()
    if value not in ("f32", "f64"):
        raise ArgumentError(f"BLC_DTYPE must be f32 or f64, got {value!r}")
    return np.dtype(np.float32 if value == "f32" else np.float64)


def scaled_tol(tol: float, dtype) -> float:
    """Tolerances are stated for float64; float32 runs use a flat 1e-4."""
    return tol if np.dtype(dtype) == np.float64 else max(tol, F32_TOL)


@dataclass
class Check:
    suite: str
    name: str
    error: float
    tolerance: float
    passed: bool
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _check(suite, name, error, tol, note="") -> Check:
    error = float(error)
    return Check(suite, name, error, tol, bool(np.isfinite(error) and error <= tol), note)


def _maxabs(a, b) -> float:
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    if d.size == 0:
        return 0.0
    return float(np.nan) if np.any(~np.isfinite(d)) else float(np.max(d))


def bform_suite(layer: BilinearLayer, seed: int = 0, n_inputs: int = 100, dtype=np.float64) -> list[Check]:
    """B-form identities for one bias-free layer."""
    dtype = np.dtype(dtype)
    layer = BilinearLayer(layer.W1.astype(dtype), layer.W2.astype(dtype), layer.one_plus_modifier)
    rng = stream(seed, "verify", 0)
    dense = build_b(layer)
    fact = ThirdOrderForm.factored(layer)
    X = rng.normal(size=(n_inputs, layer.d_in)).astype(dtype)
    fwd = forward(layer, X)
    e_dense = max(_maxabs(fwd[i], evaluate_form(dense, X[i])) for i in range(n_inputs))
    e_fact = max(_maxabs(apply_quadratic(dense, X[i], X[i]), apply_quadratic(fact, X[i], X[i]))
                 for i in range(n_inputs))
    e_assoc = max(_maxabs(apply_quadratic(dense, X[i], X[i], "left"), apply_quadratic(dense, X[i], X[i], "right"))
                  for i in range(min(n_inputs, 20)))
    # tolerances are absolute for O(1) outputs and relative beyond that
    tol = scaled_tol(1e-10, dtype) * max(1.0, float(np.max(np.abs(fwd))))
    checks = [
        _check("bform", "forward vs dense x.B.x", e_dense, tol),
        _check("bform", "dense vs factored", e_fact, tol),
        _check("bform", "left-first vs right-first contraction", e_assoc, tol),
    ]
    zb = build_b_by_contraction(layer)
    ulps = np.abs(zb - dense.B) / np.spacing(np.maximum(np.abs(dense.B), np.finfo(dtype).tiny))
    checks.append(_check("bform", "Z-contraction route vs elementwise B (ulps)",
                         float(np.max(ulps)) if np.all(np.isfinite(zb)) else np.nan, 0.0))

    n_feat = min(8, layer.d_in + 2)
    D = rng.normal(size=(n_feat, layer.d_in))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    a = np.where(rng.uniform(size=n_feat) < 0.6, rng.uniform(size=n_feat), 0.0)
    fs = FeatureSet(D.astype(dtype), a.astype(dtype))
    terms = pairwise_decompose(fact, fs)
    total = sum(terms.values()) if terms else np.zeros(layer.d_out)
    x = fs.combine()
    target = apply_quadratic(fact, x, x)
    checks.append(_check("bform", "pairwise completeness", _maxabs(total, target),
                         scaled_tol(1e-9, dtype) * max(1.0, float(np.max(np.abs(target))))))
    return checks


def expansion_suite(model: circuits.ToyTransformer, seed: int = 0, n_sequences: int = 20,
                    dtype=np.float64, materialize: bool = False) -> list[Check]:
    """Path-expansion identities for the one-layer transformer."""
    dtype = np.dtype(dtype)
    model = model.astype(dtype)
    rng = stream(seed, "verify", 1)
    n_ctx_max = model.W_pos.shape[0] if model.W_pos is not None else 16
    worst = {"sum": 0.0, "mlp": 0.0, "resid": 0.0, "rows": 0.0, "causal": 0.0, "mat": 0.0}
    with np.errstate(all="ignore"):
        for _ in range(n_sequences):
            n_ctx = int(rng.integers(1, n_ctx_max + 1))
            toks = rng.integers(0, model.n_vocab, size=n_ctx)
            logits = circuits.forward(model, toks)
            terms = circuits.full_expansion(model, toks)
            worst["sum"] = _worse(worst["sum"], _maxabs(sum(t.logits for t in terms), logits))
            comps = circuits.residual_components(model, toks)
            x1 = circuits.residual_after_attention(model, toks)
            worst["resid"] = _worse(worst["resid"], _maxabs(sum(c.values for c in comps), x1))
            groups = circuits.mlp_term_groups(model, comps)
            worst["mlp"] = _worse(worst["mlp"], _maxabs(sum(g.logits for g in groups), model.mlp(x1)))
            for h in range(model.n_heads):
                A = circuits.attention_pattern(model, toks, h)
                worst["rows"] = _worse(worst["rows"], _maxabs(A.sum(axis=1), 1.0))
                worst["causal"] = _worse(worst["causal"], float(np.max(np.abs(np.triu(A, 1)), initial=0.0)))
            if materialize:
                mat = circuits.materialized_expansion(model, toks)
                worst["mat"] = _worse(worst["mat"], max(_maxabs(a.logits, b.logits) for a, b in zip(terms, mat)))
    checks = [
        _check("expansion", "sum of labeled terms vs forward logits", worst["sum"], scaled_tol(1e-8, dtype)),
        _check("expansion", "MLP term groups vs F(x1)", worst["mlp"], scaled_tol(1e-9, dtype)),
        _check("expansion", "residual components vs x1", worst["resid"], scaled_tol(1e-12, dtype)),
        _check("expansion", "attention rows sum to one", worst["rows"], scaled_tol(1e-12, dtype)),
        _check("expansion", "attention is causal", worst["causal"], 0.0),
    ]
    if materialize:
        checks.append(_check("expansion", "materialized vocab-space route vs distributed terms",
                             worst["mat"], scaled_tol(1e-6, dtype)))
    return checks


def _worse(current: float, new: float) -> float:
    if not np.isfinite(new) or not np.isfinite(current):
        return float("nan")
    return max(current, new)


def gradcheck_suite(model, batch, seed: int = 0, tol: float = 1e-6) -> list[Check]:
    res = grad_check(model, batch, seed=seed)
    return [_check("gradcheck", f"analytic vs central differences ({res.n_checked} coords, "
                   f"{res.n_excluded} kink-excluded)", res.max_rel_error, tol, note="always float64")]

"""One-layer attention + bilinear-MLP transformer and its path expansion.

Residual-stream matrices are ``n_ctx x d_model`` with one row per position.
Attention patterns act across positions; weight products act across
features. There is no layer norm, so the labeled terms returned by
:func:`full_expansion` add up to the forward-pass logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bilinear import BilinearLayer, build_b
from .errors import ArgumentError, CapacityError, ConsistencyError, DimensionError

MATERIALIZE_MAX_VOCAB = 64


@dataclass
class AttentionHead:
    W_Q: np.ndarray  # d_head x d_model
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray  # d_model x d_head

    @property
    def W_OV(self) -> np.ndarray:
        return self.W_O @ self.W_V

    @property
    def W_QK(self) -> np.ndarray:
        return self.W_Q.T @ self.W_K


@dataclass
class BilinearMLP:
    W_I1: np.ndarray  # d_mlp x d_model
    W_I2: np.ndarray
    W_Om: np.ndarray  # d_model x d_mlp

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return ((x @ self.W_I1.T) * (x @ self.W_I2.T)) @ self.W_Om.T

    def as_layer(self) -> BilinearLayer:
        return BilinearLayer(self.W_I1, self.W_I2)


@dataclass
class ToyTransformer:
    W_E: np.ndarray  # d_model x n_vocab
    W_U: np.ndarray  # n_vocab x d_model
    heads: list[AttentionHead]
    mlp: BilinearMLP
    qk_scale: bool = True
    W_pos: np.ndarray | None = None  # n_ctx_max x d_model

    def __post_init__(self):
        d_model, n_vocab = self.W_E.shape
        if self.W_U.shape != (n_vocab, d_model):
            raise DimensionError(f"W_U must be {(n_vocab, d_model)}, got {self.W_U.shape}")
        for h, head in enumerate(self.heads):
            d_head = head.W_Q.shape[0]
            for name in ("W_Q", "W_K", "W_V"):
                if getattr(head, name).shape != (d_head, d_model):
                    raise DimensionError(f"head {h} {name} must be {(d_head, d_model)}")
            if head.W_O.shape != (d_model, d_head):
                raise DimensionError(f"head {h} W_O must be {(d_model, d_head)}")
        d_mlp = self.mlp.W_I1.shape[0]
        if self.mlp.W_I1.shape != (d_mlp, d_model) or self.mlp.W_I2.shape != (d_mlp, d_model):
            raise DimensionError("MLP input matrices must be d_mlp x d_model")
        if self.mlp.W_Om.shape != (d_model, d_mlp):
            raise DimensionError("MLP output matrix must be d_model x d_mlp")
        if self.W_pos is not None and self.W_pos.shape[1] != d_model:
            raise DimensionError("positional embedding must have d_model columns")

    @property
    def d_model(self) -> int:
        return self.W_E.shape[0]

    @property
    def n_vocab(self) -> int:
        return self.W_E.shape[1]

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def d_mlp(self) -> int:
        return self.mlp.W_I1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        p = {"embed.W_E": self.W_E, "unembed.W_U": self.W_U}
        if self.W_pos is not None:
            p["pos.W_pos"] = self.W_pos
        for h, head in enumerate(self.heads):
            for name in ("W_Q", "W_K", "W_V", "W_O"):
                p[f"attn.{h}.{name}"] = getattr(head, name)
        p["mlp.W_I1"] = self.mlp.W_I1
        p["mlp.W_I2"] = self.mlp.W_I2
        p["mlp.W_Om"] = self.mlp.W_Om
        return p

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray], qk_scale: bool = True) -> "ToyTransformer":
        n_heads = len({k.split(".")[1] for k in params if k.startswith("attn.")})
        heads = [
            AttentionHead(*(params[f"attn.{h}.{n}"] for n in ("W_Q", "W_K", "W_V", "W_O")))
            for h in range(n_heads)
        ]
        mlp = BilinearMLP(params["mlp.W_I1"], params["mlp.W_I2"], params["mlp.W_Om"])
        return cls(params["embed.W_E"], params["unembed.W_U"], heads, mlp, qk_scale, params.get("pos.W_pos"))

    def astype(self, dtype) -> "ToyTransformer":
        return ToyTransformer.from_params({k: v.astype(dtype) for k, v in self.params().items()}, self.qk_scale)


def random_transformer(
    rng: np.random.Generator,
    d_model: int = 8,
    n_heads: int = 2,
    d_head: int | None = None,
    d_mlp: int = 16,
    n_vocab: int = 11,
    n_ctx_max: int | None = None,
    scale: float = 1.0,
) -> ToyTransformer:
    """Gaussian weights scaled by ``scale / sqrt(fan_in)``."""
    d_head = d_head or max(1, d_model // max(n_heads, 1))

    def w(rows, cols):
        return rng.normal(size=(rows, cols)) * scale / math.sqrt(cols)

    heads = [AttentionHead(w(d_head, d_model), w(d_head, d_model), w(d_head, d_model), w(d_model, d_head))
             for _ in range(n_heads)]
    mlp = BilinearMLP(w(d_mlp, d_model), w(d_mlp, d_model), w(d_model, d_mlp))
    W_pos = w(n_ctx_max, d_model) if n_ctx_max else None
    return ToyTransformer(w(d_model, n_vocab), w(n_vocab, d_model), heads, mlp, True, W_pos)


@dataclass
class PathComponent:
    label: str
    values: np.ndarray  # n_ctx x d_model


@dataclass
class TermContribution:
    label: str
    logits: np.ndarray  # n_ctx x n_vocab (or n_ctx x d_model before unembedding)


def _check_tokens(model: ToyTransformer, tokens) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim != 1 or t.size == 0:
        raise ArgumentError("tokens must be a non-empty 1-d sequence of ids")
    if t.dtype.kind not in "iu":
        if not np.all(t == np.round(t)):
            raise ArgumentError("token ids must be integers")
        t = t.astype(np.int64)
    if np.any(t < 0) or np.any(t >= model.n_vocab):
        raise ArgumentError(f"token ids must lie in [0, {model.n_vocab})")
    if model.W_pos is not None and t.size > model.W_pos.shape[0]:
        raise ArgumentError(f"sequence length {t.size} exceeds positional table {model.W_pos.shape[0]}")
    return t


def embed(model: ToyTransformer, tokens) -> np.ndarray:
    t = _check_tokens(model, tokens)
    x0 = model.W_E[:, t].T
    if model.W_pos is not None:
        x0 = x0 + model.W_pos[: t.size]
    return x0


def causal_softmax(scores: np.ndarray) -> np.ndarray:
    n = scores.shape[-1]
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    s = np.where(mask, -np.inf, scores)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _pattern_from_residual(model: ToyTransformer, x0: np.ndarray, h: int) -> np.ndarray:
    head = model.heads[h]
    scores = (x0 @ head.W_Q.T) @ (x0 @ head.W_K.T).T
    if model.qk_scale:
        scores = scores / math.sqrt(head.W_Q.shape[0])
    return causal_softmax(scores)


def attention_pattern(model: ToyTransformer, tokens, h: int) -> np.ndarray:
    """Causal attention pattern of head ``h``; row ``p`` is the distribution over positions ``<= p``."""
    if not isinstance(h, (int, np.integer)) or not 0 <= h < model.n_heads:
        raise ArgumentError(f"head index {h} out of range for {model.n_heads} heads")
    return _pattern_from_residual(model, embed(model, tokens), h)


def residual_after_attention(model: ToyTransformer, tokens) -> np.ndarray:
    x0 = embed(model, tokens)
    x1 = x0.copy()
    for h, head in enumerate(model.heads):
        A = _pattern_from_residual(model, x0, h)
        x1 += A @ (x0 @ head.W_OV.T)
    return x1


def forward(model: ToyTransformer, tokens) -> np.ndarray:
    """Logits, ``n_ctx x n_vocab``."""
    x1 = residual_after_attention(model, tokens)
    return (x1 + model.mlp(x1)) @ model.W_U.T


def residual_components(model: ToyTransformer, tokens) -> list[PathComponent]:
    """Split the MLP input into direct, positional and per-head pieces.

    Heads read the full embedding (tokens plus positions when present).
    """
    t = _check_tokens(model, tokens)
    comps = [PathComponent("direct", model.W_E[:, t].T.copy())]
    if model.W_pos is not None:
        comps.append(PathComponent("pos", model.W_pos[: t.size].copy()))
    x0 = embed(model, t)
    for h, head in enumerate(model.heads):
        A = _pattern_from_residual(model, x0, h)
        comps.append(PathComponent(f"head:{h}", A @ (x0 @ head.W_OV.T)))
    return comps


def _short(label: str) -> str:
    return label.replace("head:", "head ")


def mlp_term_groups(model: ToyTransformer, components: list[PathComponent],
                    x1: np.ndarray | None = None) -> list[TermContribution]:
    """Distribute the bilinear MLP over every ordered pair of components.

    Returns one ``d_model``-space term per (left, right) pair labeled
    ``mlp:<left>×<right>``, in component order. When ``x1`` is given the
    components must add up to it.
    """
    if x1 is not None:
        total = sum(c.values for c in components)
        gap = float(np.max(np.abs(total - x1)))
        if not gap <= 1e-6:
            raise ConsistencyError(f"components differ from the residual stream by {gap:.3g}")
    mlp = model.mlp
    lefts = [c.values @ mlp.W_I1.T for c in components]
    rights = [c.values @ mlp.W_I2.T for c in components]
    terms = []
    for cl, l in zip(components, lefts):
        for cr, r in zip(components, rights):
            terms.append(TermContribution(f"mlp:{_short(cl.label)}×{_short(cr.label)}", (l * r) @ mlp.W_Om.T))
    return terms


def full_expansion(model: ToyTransformer, tokens) -> list[TermContribution]:
    """Labeled logit contributions that sum to :func:`forward`.

    Order: ``embed-unembed``, ``pos-unembed`` (positional table only),
    ``head:h`` for each head, then the MLP groups from :func:`mlp_term_groups`.
    Attention patterns come from the actual forward pass and are held fixed.
    """
    comps = residual_components(model, tokens)
    terms = []
    for c in comps:
        label = {"direct": "embed-unembed", "pos": "pos-unembed"}.get(c.label, c.label)
        terms.append(TermContribution(label, c.values @ model.W_U.T))
    for g in mlp_term_groups(model, comps):
        terms.append(TermContribution(g.label, g.logits @ model.W_U.T))
    return terms


def materialized_expansion(model: ToyTransformer, tokens) -> list[TermContribution]:
    """The same terms computed from explicit vocabulary-space objects.

    Every path is a ``d_model x (n_vocab + n_ctx)`` matrix over token ids and,
    when a positional table is present, positions. Direct, positional and head
    paths give ``W_U P`` logit matrices. Each MLP group builds the order-3
    tensor ``(P_l^T W_I1^T) ._{12} Z ._{21} (W_I2 P_r)`` and contracts it with
    the position-mixed one-hot index distributions.
    """
    if model.n_vocab > MATERIALIZE_MAX_VOCAB:
        raise CapacityError(f"materialized expansion supports n_vocab <= {MATERIALIZE_MAX_VOCAB}, got {model.n_vocab}")
    t = _check_tokens(model, tokens)
    n, V = t.size, model.n_vocab
    has_pos = model.W_pos is not None
    width = V + (n if has_pos else 0)
    tok_part = np.zeros((model.d_model, width))
    tok_part[:, :V] = model.W_E
    onehot = np.zeros((n, width))
    onehot[np.arange(n), t] = 1.0
    x0 = embed(model, t)
    full = tok_part.copy()
    # (label, position mixer, d_model x width path matrix)
    paths = [("direct", np.eye(n), tok_part)]
    if has_pos:
        pos_part = np.zeros_like(tok_part)
        pos_part[:, V:] = model.W_pos[:n].T
        onehot[np.arange(n), V + np.arange(n)] = 1.0
        full = full + pos_part
        paths.append(("pos", np.eye(n), pos_part))
    for h, head in enumerate(model.heads):
        paths.append((f"head:{h}", _pattern_from_residual(model, x0, h), head.W_OV @ full))

    names = {"direct": "embed-unembed", "pos": "pos-unembed"}
    terms = []
    for label, A, P in paths:
        vv = model.W_U @ P
        terms.append(TermContribution(names.get(label, label), A @ onehot @ vv.T))
    for ll, Al, Pl in paths:
        for lr, Ar, Pr in paths:
            B = build_b(BilinearLayer(model.mlp.W_I1 @ Pl, model.mlp.W_I2 @ Pr)).B  # d_mlp x width x width
            u = Al @ onehot
            v = Ar @ onehot
            hidden = np.einsum("pj,ijk,pk->pi", u, B, v)
            terms.append(TermContribution(f"mlp:{_short(ll)}×{_short(lr)}", hidden @ model.mlp.W_Om.T @ model.W_U.T))
    return terms


def term_norm_report(terms: list[TermContribution]) -> list[dict]:
    """Frobenius norm, max-abs and share (norm / norm of the summed logits) per term."""
    if not terms:
        return []
    total = sum(t.logits for t in terms)
    denom = float(np.linalg.norm(total))
    rows = []
    for t in terms:
        norm = float(np.linalg.norm(t.logits))
        rows.append({
            "label": t.label,
            "frobenius": norm,
            "max_abs": float(np.max(np.abs(t.logits))),
            "share": norm / denom if denom > 0 else (1.0 if len(terms) == 1 else 0.0),
        })
    return rows

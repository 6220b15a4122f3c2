"""Synthetic tasks: sparse superposition data and toy language-model sequences."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..errors import ArgumentError
from ..rng import stream


@dataclass
class TaskConfig:
    variant: str = "superposition"  # superposition | toy_lm
    # superposition
    n_features: int = 4
    d_input: int = 4
    p: float = 1.0
    importance_decay: float = 1.0
    dictionary: str = "random"  # random | identity
    # toy_lm
    n_vocab: int = 8
    n_ctx: int = 8
    pattern: str = "induction-repeat"  # induction-repeat | bigram
    repeat_len: int | None = None
    dataset_size: int = 2048

    def __post_init__(self):
        self.variant = self.variant.replace("-", "_")
        if self.variant not in ("superposition", "toy_lm"):
            raise ArgumentError(f"unknown task variant {self.variant!r}")
        if not 0.0 < self.p <= 1.0:
            raise ArgumentError(f"sparsity p must lie in (0, 1], got {self.p}")
        if self.n_features < 1 or self.d_input < 1:
            raise ArgumentError("n_features and d_input must be positive")
        if self.dictionary not in ("random", "identity"):
            raise ArgumentError(f"unknown dictionary kind {self.dictionary!r}")
        if self.dictionary == "identity" and self.n_features != self.d_input:
            raise ArgumentError("identity dictionary needs n_features == d_input")
        if self.pattern not in ("induction-repeat", "bigram"):
            raise ArgumentError(f"unknown toy-LM pattern {self.pattern!r}")
        if self.n_vocab < 2 or self.n_ctx < 2:
            raise ArgumentError("toy-LM needs n_vocab >= 2 and n_ctx >= 2")
        if 2 * self.segment_len > self.n_ctx:
            raise ArgumentError("repeat_len is too long for n_ctx")

    @property
    def segment_len(self) -> int:
        return self.repeat_len if self.repeat_len is not None else self.n_ctx // 2

    def importance(self) -> np.ndarray:
        return self.importance_decay ** np.arange(self.d_input)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        return cls(**_known(cls, d))


@dataclass
class OptConfig:
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    modifier_norm_penalty: float = 0.0
    penalty_kind: str = "l2"
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ArgumentError("steps and lr must be >= 0, batch_size >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ArgumentError("Adam betas must lie in [0, 1) and eps > 0")
        if self.modifier_norm_penalty < 0:
            raise ArgumentError("modifier_norm_penalty must be >= 0")
        self.penalty_kind = self.penalty_kind.lower()
        if self.penalty_kind not in ("l2", "l1"):
            raise ArgumentError(f"penalty_kind must be l2 or l1, got {self.penalty_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptConfig":
        return cls(**_known(cls, d))


@dataclass
class ModelConfig:
    d_hidden: int | None = None  # layer width; defaults to d_input
    one_plus_modifier: bool = True
    d_model: int = 16
    n_heads: int = 2
    d_head: int | None = None
    d_mlp: int = 32
    positional: bool = True
    init_scale: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**_known(cls, d))


def _known(cls, d: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ArgumentError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return dict(d)


def make_dictionary(cfg: TaskConfig, seed: int) -> np.ndarray:
    """``n_features x d_input`` matrix of unit-norm feature directions."""
    if cfg.dictionary == "identity":
        return np.eye(cfg.d_input)
    D = stream(seed, "dictionary").normal(size=(cfg.n_features, cfg.d_input))
    return D / np.linalg.norm(D, axis=1, keepdims=True)


def gen_superposition_batch(cfg: TaskConfig, seed: int, batch_size: int = 256, step: int = 0,
                            D: np.ndarray | None = None, stream_name: str = "data"):
    """Sparse coefficients ``A`` (Uniform[0, 1] kept with probability p) and ``X = A D``.

    Returns ``(A, X, D)``.
    """
    if D is None:
        D = make_dictionary(cfg, seed)
    rng = stream(seed, stream_name, step)
    vals = rng.uniform(0.0, 1.0, size=(batch_size, cfg.n_features))
    keep = rng.uniform(size=(batch_size, cfg.n_features)) < cfg.p
    A = np.where(keep, vals, 0.0)
    return A, A @ D, D


def gen_induction_batch(cfg: TaskConfig, seed: int, batch_size: int, step: int = 0,
                        stream_name: str = "data") -> np.ndarray:
    """Uniform random tokens with positions ``[L, 2L)`` copying positions ``[0, L)``."""
    L = cfg.segment_len
    rng = stream(seed, stream_name, step)
    toks = rng.integers(0, cfg.n_vocab, size=(batch_size, cfg.n_ctx))
    toks[:, L:2 * L] = toks[:, :L]
    return toks


def bigram_table(cfg: TaskConfig, seed: int) -> np.ndarray:
    logits = 3.0 * stream(seed, "bigram").normal(size=(cfg.n_vocab, cfg.n_vocab))
    P = np.exp(logits - logits.max(axis=1, keepdims=True))
    return P / P.sum(axis=1, keepdims=True)


def gen_bigram_batch(cfg: TaskConfig, seed: int, batch_size: int, step: int = 0,
                     stream_name: str = "data") -> np.ndarray:
    P = bigram_table(cfg, seed)
    cdf = np.cumsum(P, axis=1)
    rng = stream(seed, stream_name, step)
    toks = np.empty((batch_size, cfg.n_ctx), dtype=np.int64)
    toks[:, 0] = rng.integers(0, cfg.n_vocab, size=batch_size)
    u = rng.uniform(size=(batch_size, cfg.n_ctx))
    for p in range(1, cfg.n_ctx):
        rows = cdf[toks[:, p - 1]]
        toks[:, p] = np.minimum((rows < u[:, p:p + 1]).sum(axis=1), cfg.n_vocab - 1)
    return toks


def gen_token_batch(cfg: TaskConfig, seed: int, batch_size: int, step: int = 0,
                    stream_name: str = "data") -> np.ndarray:
    if cfg.pattern == "bigram":
        return gen_bigram_batch(cfg, seed, batch_size, step, stream_name)
    return gen_induction_batch(cfg, seed, batch_size, step, stream_name)

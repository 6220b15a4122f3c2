"""Trainable models with hand-written gradients.

Two families:

* :class:`LayerAutoencoder` maps ``x`` through one MLP layer (linear, relu,
  bilinear or swiglu) and a linear decoder back to input space.
* :class:`TransformerModel` wraps :class:`~bilinear_circuits.circuits.ToyTransformer`
  with a next-token cross-entropy loss.

Every model exposes ``params()`` (name -> array, live references),
``loss(batch)`` and ``loss_and_grads(batch)``.
"""
from __future__ import annotations

import math

import numpy as np

from ..bilinear import BilinearLayer
from ..circuits import ToyTransformer, causal_softmax
from ..errors import ArgumentError

LAYER_ARCHS = ("linear", "relu", "bilinear", "swiglu")
ARCH_ALIASES = {"toy-transformer": "toy_transformer"}


def normalize_arch(arch: str) -> str:
    arch = ARCH_ALIASES.get(arch, arch)
    if arch not in LAYER_ARCHS + ("toy_transformer",):
        raise ArgumentError(f"unknown architecture {arch!r}")
    return arch


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LayerAutoencoder:
    """``x -> W_dec @ layer(x)`` with per-coordinate importance-weighted MSE.

    The optional penalty ``lam * mean_b ||W1 x_b||^2`` (``penalty="l2"``) or
    ``lam * mean_b ||W1 x_b||_1`` (``"l1"``) acts on the modifier side of
    bilinear and swiglu layers.
    """

    def __init__(self, arch: str, params: dict[str, np.ndarray], one_plus_modifier: bool = False):
        if arch not in LAYER_ARCHS:
            raise ArgumentError(f"unknown layer architecture {arch!r}")
        self.arch = arch
        self._params = params
        self.one_plus_modifier = bool(one_plus_modifier) and arch == "bilinear"

    @classmethod
    def init(cls, arch: str, d_in: int, d_hidden: int, rng: np.random.Generator,
             one_plus_modifier: bool = False, scale: float = 1.0) -> "LayerAutoencoder":
        def w(rows, cols):
            return rng.normal(size=(rows, cols)) * scale / math.sqrt(cols)

        if arch == "linear":
            params = {"W": w(d_in, d_in)}
        elif arch == "relu":
            params = {"mlp.W": w(d_hidden, d_in), "dec.W": w(d_in, d_hidden)}
        elif arch in ("bilinear", "swiglu"):
            params = {"mlp.W1": w(d_hidden, d_in), "mlp.W2": w(d_hidden, d_in), "dec.W": w(d_in, d_hidden)}
        else:
            raise ArgumentError(f"unknown layer architecture {arch!r}")
        return cls(arch, params, one_plus_modifier)

    def params(self) -> dict[str, np.ndarray]:
        return self._params

    def metadata(self) -> dict:
        return {"one_plus_modifier": self.one_plus_modifier}

    @property
    def has_modifier(self) -> bool:
        return self.arch in ("bilinear", "swiglu")

    def bilinear_layer(self) -> BilinearLayer:
        if self.arch != "bilinear":
            raise ArgumentError(f"{self.arch} model has no bilinear layer")
        return BilinearLayer(self._params["mlp.W1"], self._params["mlp.W2"], self.one_plus_modifier)

    def decoder(self) -> np.ndarray:
        return self._params["W"] if self.arch == "linear" else self._params["dec.W"]

    def hidden(self, X: np.ndarray) -> np.ndarray:
        return self._forward(X)[1]["H"]

    def modifier_preacts(self, X: np.ndarray) -> np.ndarray:
        return X @ self._params["mlp.W1"].T

    def forward(self, X: np.ndarray) -> np.ndarray:
        return self._forward(X)[0]

    def _forward(self, X):
        p = self._params
        cache = {}
        if self.arch == "linear":
            return X @ p["W"].T, cache
        if self.arch == "relu":
            Z = X @ p["mlp.W"].T
            H = np.maximum(Z, 0.0)
            cache.update(Z=Z)
        else:
            G = X @ p["mlp.W1"].T
            R = X @ p["mlp.W2"].T
            if self.arch == "bilinear":
                L = G + 1.0 if self.one_plus_modifier else G
            else:
                L = G * _sigmoid(G)
            H = L * R
            cache.update(G=G, R=R, L=L)
        cache["H"] = H
        return H @ p["dec.W"].T, cache

    def loss(self, batch) -> float:
        return self.loss_and_grads(batch, need_grads=False)[0]

    def loss_and_grads(self, batch, need_grads: bool = True):
        """``batch`` is a dict with ``X``, ``target``, and optional ``importance``, ``lam``, ``penalty``.

        Returns (total loss, grads, parts) where parts has ``mse`` (weighted
        reconstruction term) and ``penalty``.
        """
        X, T = batch["X"], batch["target"]
        gamma = batch.get("importance")
        lam = float(batch.get("lam", 0.0))
        kind = batch.get("penalty", "l2")
        B, d_out = T.shape
        w = np.ones(d_out) if gamma is None else np.asarray(gamma)

        Y, cache = self._forward(X)
        diff = Y - T
        mse = float(np.sum(w * diff ** 2) / (B * d_out))
        pen = 0.0
        if lam:
            if not self.has_modifier:
                raise ArgumentError(f"modifier penalty needs a bilinear or swiglu layer, not {self.arch}")
            G = cache["G"]
            pen = lam * float(np.sum(G ** 2) if kind == "l2" else np.sum(np.abs(G))) / B
        total = mse + pen
        if not need_grads:
            return total, None, {"mse": mse, "penalty": pen}

        p = self._params
        g = {}
        dY = 2.0 * w * diff / (B * d_out)
        if self.arch == "linear":
            g["W"] = dY.T @ X
            return total, g, {"mse": mse, "penalty": pen}
        H = cache["H"]
        g["dec.W"] = dY.T @ H
        dH = dY @ p["dec.W"]
        if self.arch == "relu":
            dZ = dH * (cache["Z"] > 0)
            g["mlp.W"] = dZ.T @ X
        else:
            G, R, L = cache["G"], cache["R"], cache["L"]
            dL = dH * R
            dR = dH * L
            if self.arch == "swiglu":
                s = _sigmoid(G)
                dG = dL * (s + G * s * (1.0 - s))
            else:
                dG = dL
            if lam:
                dG = dG + lam * (2.0 * G if kind == "l2" else np.sign(G)) / B
            g["mlp.W1"] = dG.T @ X
            g["mlp.W2"] = dR.T @ X
        return total, g, {"mse": mse, "penalty": pen}

    def kink_mask(self, batch, threshold: float = 1e-3) -> dict[str, np.ndarray]:
        """Coordinates whose finite differences would straddle a relu kink."""
        if self.arch != "relu":
            return {}
        Z = batch["X"] @ self._params["mlp.W"].T
        rows = np.any(np.abs(Z) <= threshold, axis=0)
        mask = np.zeros_like(self._params["mlp.W"], dtype=bool)
        mask[rows] = True
        return {"mlp.W": mask}


class TransformerModel:
    """Next-token cross-entropy over a ``batch x n_ctx`` token matrix.

    Position ``p`` predicts token ``p + 1``; the last position has no target.
    """

    arch = "toy_transformer"

    def __init__(self, model: ToyTransformer):
        self.model = model
        self._params = model.params()

    @classmethod
    def init(cls, rng: np.random.Generator, n_vocab: int, n_ctx: int, d_model: int = 16, n_heads: int = 2,
             d_head: int | None = None, d_mlp: int = 32, positional: bool = True, scale: float = 1.0):
        from ..circuits import random_transformer

        m = random_transformer(rng, d_model=d_model, n_heads=n_heads, d_head=d_head, d_mlp=d_mlp,
                               n_vocab=n_vocab, n_ctx_max=n_ctx if positional else None, scale=scale)
        return cls(m)

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray], qk_scale: bool = True) -> "TransformerModel":
        return cls(ToyTransformer.from_params(params, qk_scale))

    def params(self) -> dict[str, np.ndarray]:
        return self._params

    def metadata(self) -> dict:
        return {"qk_scale": self.model.qk_scale}

    def bilinear_layer(self) -> BilinearLayer:
        return self.model.mlp.as_layer()

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        return self._forward(np.atleast_2d(tokens))[0]

    def _forward(self, tokens):
        m = self.model
        n = tokens.shape[1]
        x0 = m.W_E[:, tokens].transpose(1, 2, 0)  # B x n x d
        if m.W_pos is not None:
            x0 = x0 + m.W_pos[:n]
        heads = []
        x1 = x0.copy()
        for head in m.heads:
            q = x0 @ head.W_Q.T
            k = x0 @ head.W_K.T
            v = x0 @ head.W_V.T
            c = 1.0 / math.sqrt(head.W_Q.shape[0]) if m.qk_scale else 1.0
            A = causal_softmax(q @ k.transpose(0, 2, 1) * c)
            z = A @ v
            x1 = x1 + z @ head.W_O.T
            heads.append((q, k, v, A, z, c))
        L = x1 @ m.mlp.W_I1.T
        R = x1 @ m.mlp.W_I2.T
        H = L * R
        x2 = x1 + H @ m.mlp.W_Om.T
        logits = x2 @ m.W_U.T
        return logits, dict(x0=x0, x1=x1, x2=x2, L=L, R=R, H=H, heads=heads)

    def loss(self, batch) -> float:
        return self.loss_and_grads(batch, need_grads=False)[0]

    def loss_and_grads(self, batch, need_grads: bool = True):
        tokens = np.asarray(batch["tokens"] if isinstance(batch, dict) else batch)
        tokens = np.atleast_2d(tokens)
        m = self.model
        Bn, n = tokens.shape
        logits, c = self._forward(tokens)
        pred = logits[:, :-1]
        tgt = tokens[:, 1:]
        shifted = pred - pred.max(axis=-1, keepdims=True)
        logZ = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - logZ
        N = Bn * (n - 1)
        loss = float(-np.take_along_axis(logp, tgt[..., None], axis=-1).sum() / N)
        if not need_grads:
            return loss, None, {"ce": loss}

        dlogits = np.zeros_like(logits)
        probs = np.exp(logp)
        np.put_along_axis(probs, tgt[..., None], np.take_along_axis(probs, tgt[..., None], -1) - 1.0, -1)
        dlogits[:, :-1] = probs / N

        g = {}
        g["unembed.W_U"] = np.einsum("bpv,bpd->vd", dlogits, c["x2"])
        dx2 = dlogits @ m.W_U
        g["mlp.W_Om"] = np.einsum("bpd,bpm->dm", dx2, c["H"])
        dH = dx2 @ m.mlp.W_Om
        dL = dH * c["R"]
        dR = dH * c["L"]
        g["mlp.W_I1"] = np.einsum("bpm,bpd->md", dL, c["x1"])
        g["mlp.W_I2"] = np.einsum("bpm,bpd->md", dR, c["x1"])
        dx1 = dx2 + dL @ m.mlp.W_I1 + dR @ m.mlp.W_I2

        x0 = c["x0"]
        dx0 = dx1.copy()
        for h, (head, (q, k, v, A, z, scale)) in enumerate(zip(m.heads, c["heads"])):
            g[f"attn.{h}.W_O"] = np.einsum("bpd,bpe->de", dx1, z)
            dz = dx1 @ head.W_O
            dA = dz @ v.transpose(0, 2, 1)
            dv = A.transpose(0, 2, 1) @ dz
            ds = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
            dq = ds @ k
            dk = ds.transpose(0, 2, 1) @ q
            g[f"attn.{h}.W_Q"] = np.einsum("bpe,bpd->ed", dq, x0)
            g[f"attn.{h}.W_K"] = np.einsum("bpe,bpd->ed", dk, x0)
            g[f"attn.{h}.W_V"] = np.einsum("bpe,bpd->ed", dv, x0)
            dx0 = dx0 + dq @ head.W_Q + dk @ head.W_K + dv @ head.W_V

        dWE_T = np.zeros((m.n_vocab, m.d_model))
        np.add.at(dWE_T, tokens.ravel(), dx0.reshape(-1, m.d_model))
        g["embed.W_E"] = dWE_T.T
        if m.W_pos is not None:
            gp = np.zeros_like(m.W_pos)
            gp[:n] = dx0.sum(axis=0)
            g["pos.W_pos"] = gp
        return loss, g, {"ce": loss}

    def kink_mask(self, batch, threshold: float = 1e-3) -> dict[str, np.ndarray]:
        return {}


def model_from_params(arch: str, params: dict[str, np.ndarray], metadata: dict | None = None):
    metadata = metadata or {}
    arch = normalize_arch(arch)
    if arch == "toy_transformer":
        return TransformerModel.from_params(params, metadata.get("qk_scale", True))
    return LayerAutoencoder(arch, params, metadata.get("one_plus_modifier", False))


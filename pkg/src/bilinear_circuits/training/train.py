"""Training loop and evaluation metrics."""
from __future__ import annotations

import logging

import numpy as np

from ..errors import ArgumentError, TrainingError
from ..rng import stream
from .models import LayerAutoencoder, TransformerModel, normalize_arch
from .optim import Adam
from .tasks import ModelConfig, OptConfig, TaskConfig, gen_superposition_batch, gen_token_batch, make_dictionary

log = logging.getLogger(__name__)

MONITOR_SIZE = 512
EVAL_SIZE = 4096


def build_model(arch: str, task: TaskConfig, model_cfg: ModelConfig, seed: int):
    arch = normalize_arch(arch)
    rng = stream(seed, "init")
    if arch == "toy_transformer":
        if task.variant != "toy_lm":
            raise ArgumentError("toy_transformer trains on the toy_lm task")
        return TransformerModel.init(rng, task.n_vocab, task.n_ctx, model_cfg.d_model, model_cfg.n_heads,
                                     model_cfg.d_head, model_cfg.d_mlp, model_cfg.positional, model_cfg.init_scale)
    if task.variant != "superposition":
        raise ArgumentError(f"{arch} layers train on the superposition task")
    d_hidden = model_cfg.d_hidden or task.d_input
    return LayerAutoencoder.init(arch, task.d_input, d_hidden, rng,
                                 one_plus_modifier=model_cfg.one_plus_modifier, scale=model_cfg.init_scale)


def _superposition_batch(task, seed, D, size, step, name, opt=None):
    _, X, _ = gen_superposition_batch(task, seed, size, step, D=D, stream_name=name)
    batch = {"X": X, "target": X, "importance": task.importance()}
    if opt is not None and opt.modifier_norm_penalty:
        batch.update(lam=opt.modifier_norm_penalty, penalty=opt.penalty_kind)
    return batch


def train(arch: str, task: TaskConfig, opt: OptConfig, model_cfg: ModelConfig | None = None):
    """Train with Adam. Returns ``(model, metrics)``.

    ``metrics`` has one record per logged step: ``step``, ``loss`` (objective on
    a fixed monitoring batch, before the update), ``batch_loss`` and the
    penalty term. Everything is seeded from ``opt.seed``.
    """
    model_cfg = model_cfg or ModelConfig()
    seed = opt.seed
    model = build_model(arch, task, model_cfg, seed)
    adam = Adam(model.params(), opt.lr, opt.beta1, opt.beta2, opt.eps)
    metrics = []

    if task.variant == "superposition":
        D = make_dictionary(task, seed)
        monitor = _superposition_batch(task, seed, D, MONITOR_SIZE, 0, "monitor", opt)

        def next_batch(step):
            return _superposition_batch(task, seed, D, opt.batch_size, step, "data", opt)
    else:
        data = gen_token_batch(task, seed, task.dataset_size, 0, "data")
        monitor = {"tokens": data[:MONITOR_SIZE]}

        def next_batch(step):
            idx = stream(seed, "batch", step).integers(0, data.shape[0], size=opt.batch_size)
            return {"tokens": data[idx]}

    for step in range(opt.steps):
        batch = next_batch(step)
        loss, grads, parts = model.loss_and_grads(batch)
        if not np.isfinite(loss):
            raise TrainingError(f"loss became non-finite at step {step}", step)
        if step % opt.log_every == 0 or step == opt.steps - 1:
            mon_loss, _, mon_parts = model.loss_and_grads(monitor, need_grads=False)
            rec = {"step": step, "loss": mon_loss, "batch_loss": loss}
            if "penalty" in mon_parts:
                rec["penalty"] = mon_parts["penalty"]
            metrics.append(rec)
        adam.step(grads)
    for name, p in model.params().items():
        if not np.all(np.isfinite(p)):
            raise TrainingError(f"parameter {name} became non-finite", opt.steps)
    return model, metrics


def unigram_loss(train_tokens: np.ndarray, eval_tokens: np.ndarray, n_vocab: int) -> float:
    """Cross-entropy of an add-one-smoothed unigram model over next-token targets."""
    counts = np.bincount(train_tokens[:, 1:].ravel(), minlength=n_vocab) + 1.0
    logp = np.log(counts / counts.sum())
    return float(-logp[eval_tokens[:, 1:]].mean())


def dictionary_recovery(D_true: np.ndarray, decoder: np.ndarray) -> float:
    """Mean over true features of the best cosine with any decoder column."""
    Dn = D_true / np.linalg.norm(D_true, axis=1, keepdims=True)
    norms = np.linalg.norm(decoder, axis=0)
    cols = decoder[:, norms > 0] / norms[norms > 0]
    if cols.shape[1] == 0:
        return 0.0
    return float(np.mean(np.max(Dn @ cols, axis=1)))


def evaluate(model, task: TaskConfig, seed: int, opt: OptConfig | None = None) -> dict:
    """Held-out metrics from the ``eval`` stream of ``seed``."""
    if task.variant == "superposition":
        D = make_dictionary(task, seed)
        _, X, _ = gen_superposition_batch(task, seed, EVAL_SIZE, 0, D=D, stream_name="eval")
        Y = model.forward(X)
        out = {
            "loss": float(np.mean((Y - X) ** 2)),
            "weighted_loss": float(np.mean(task.importance() * (Y - X) ** 2)),
            "dictionary_recovery": dictionary_recovery(D, model.decoder()),
        }
        if model.has_modifier:
            out["mean_modifier_norm"] = float(np.mean(np.linalg.norm(model.modifier_preacts(X), axis=1)))
        return out
    train_tokens = gen_token_batch(task, seed, task.dataset_size, 0, "data")
    eval_tokens = gen_token_batch(task, seed, min(EVAL_SIZE, 1024), 0, "eval")
    return {
        "loss": model.loss({"tokens": eval_tokens}),
        "unigram_loss": unigram_loss(train_tokens, eval_tokens, task.n_vocab),
    }

"""``blc`` command-line entry point.

Subcommands: ``train``, ``verify``, ``expand``, ``analyze``. Each writes a
JSON run report. Exit codes: 0 success, 2 usage/config error, 3 training
failure, 4 verification failure, 5 I/O or integrity error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, circuits
from .bilinear import BilinearLayer, ThirdOrderForm, build_b
from .errors import (
    ArgumentError,
    BilinearCircuitsError,
    CapacityError,
    ConvergenceError,
    FormatError,
    IntegrityError,
    PreconditionError,
    TrainingError,
)
from .features import (
    HEURISTIC_PAIRS_WARNING,
    correlated_pair_ranking,
    ica_basis,
    modification_report,
    svd_basis,
    top_b_coefficients,
)
from .persistence import load_model, read_tensor, save_model
from .rng import stream
from .tensor_core import fix_signs, hosvd, mode_singular_values, tucker_reconstruct
from .training import (
    ModelConfig,
    OptConfig,
    TaskConfig,
    evaluate,
    gen_superposition_batch,
    gen_token_batch,
    make_dictionary,
    train,
)
from .training.models import TransformerModel, normalize_arch
from .verify import SUITES, bform_suite, expansion_suite, gradcheck_suite, numeric_dtype

log = logging.getLogger("blc")

EXIT_OK, EXIT_USAGE, EXIT_TRAIN, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_report(path, command: str, config: dict, seed, results, warnings, started: float) -> dict:
    report = {
        "command": command,
        "config": config,
        "seed": seed,
        "results": results,
        "tool_version": __version__,
        "warnings": sorted(set(warnings)),
        "wall_time_s": round(time.perf_counter() - started, 6),
    }
    report = _jsonable(report)
    if path is not None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ArgumentError(f"cannot read config {path}: {e}") from e
    if not isinstance(cfg, dict) or set(cfg) - {"task", "opt", "model"}:
        raise ArgumentError('config must be a JSON object with optional "task", "opt", "model" sections')
    return cfg


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = _load_config(args.config)
    task_d = dict(cfg.get("task", {}))
    task_d["variant"] = args.task.replace("-", "_")
    opt_d = dict(cfg.get("opt", {}))
    opt_d["seed"] = args.seed
    if args.lam is not None:
        opt_d["modifier_norm_penalty"] = args.lam
    if args.penalty is not None:
        opt_d["penalty_kind"] = args.penalty
    task = TaskConfig.from_dict(task_d)
    opt = OptConfig.from_dict(opt_d)
    model_cfg = ModelConfig.from_dict(cfg.get("model", {}))
    arch = normalize_arch(args.arch)

    model, metrics = train(arch, task, opt, model_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"arch": arch, "task": task.to_dict(), "opt": opt.to_dict(), "model": model_cfg.to_dict()}
    save_model(model, out, seed=opt.seed, metadata=resolved)
    with open(out / "metrics.jsonl", "w") as f:
        for rec in metrics:
            f.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
    results = {"final": metrics[-1] if metrics else None, "eval": evaluate(model, task, opt.seed)}
    _write_report(out / "report.json", "train", resolved, opt.seed, results, [], started)
    print(f"trained {arch} for {opt.steps} steps -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- verify


def _probe_batch(model, manifest, seed):
    meta = manifest.get("metadata", {})
    task = TaskConfig.from_dict(meta["task"]) if "task" in meta else None
    if isinstance(model, TransformerModel):
        if task is None:
            task = TaskConfig(variant="toy_lm", n_vocab=model.model.n_vocab,
                              n_ctx=model.model.W_pos.shape[0] if model.model.W_pos is not None else 8)
        return {"tokens": gen_token_batch(task, seed, 4, 0, "verify")}
    d_in = model.decoder().shape[0]
    X = stream(seed, "verify", 2).uniform(0, 1, size=(16, d_in))
    batch = {"X": X, "target": X}
    if task is not None and task.variant == "superposition" and task.d_input == d_in:
        batch["importance"] = task.importance()
    return batch


def cmd_verify(args) -> int:
    started = time.perf_counter()
    model, manifest = load_model(args.ckpt)
    seed = args.seed if args.seed is not None else (manifest.get("seed") or 0)
    dtype = numeric_dtype()
    suites = SUITES if args.suite == "all" else (args.suite,)
    checks, skipped = [], []
    for suite in suites:
        if suite == "bform":
            if not hasattr(model, "bilinear_layer") or getattr(model, "arch", "") not in ("bilinear", "toy_transformer"):
                skipped.append({"suite": "bform", "reason": f"{model.arch} checkpoint has no bilinear layer"})
                continue
            layer = model.bilinear_layer()
            checks += bform_suite(layer, seed=seed, dtype=dtype)
        elif suite == "expansion":
            if not isinstance(model, TransformerModel):
                skipped.append({"suite": "expansion", "reason": f"{model.arch} checkpoint is not a transformer"})
                continue
            checks += expansion_suite(model.model, seed=seed, dtype=dtype,
                                      materialize=model.model.n_vocab <= circuits.MATERIALIZE_MAX_VOCAB)
        elif suite == "gradcheck":
            checks += gradcheck_suite(model, _probe_batch(model, manifest, seed), seed=seed)
    ok = all(c.passed for c in checks)
    results = {"passed": ok, "checks": [c.to_dict() for c in checks], "skipped": skipped, "dtype": dtype.name}
    config = {"ckpt": str(args.ckpt), "suite": args.suite, "architecture": manifest["architecture"]}
    _write_report(args.report, "verify", config, seed, results, [], started)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  [{c.suite}] {c.name}: {c.error:.3g} (tol {c.tolerance:.3g})")
    for s in skipped:
        print(f"SKIP  [{s['suite']}] {s['reason']}")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------- expand


def _parse_tokens(text: str) -> list[int]:
    try:
        toks = [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError as e:
        raise ArgumentError(f"--tokens must be comma-separated integers: {e}") from e
    if not toks:
        raise ArgumentError("--tokens is empty")
    return toks


def cmd_expand(args) -> int:
    started = time.perf_counter()
    model, manifest = load_model(args.ckpt)
    if not isinstance(model, TransformerModel):
        raise ArgumentError(f"expand needs a toy_transformer checkpoint, got {model.arch}")
    tf = model.model
    tokens = _parse_tokens(args.tokens)
    if args.materialize and tf.n_vocab > circuits.MATERIALIZE_MAX_VOCAB:
        raise CapacityError(f"--materialize supports n_vocab <= {circuits.MATERIALIZE_MAX_VOCAB}, got {tf.n_vocab}")
    logits = circuits.forward(tf, tokens)
    terms = circuits.full_expansion(tf, tokens)
    total = sum(t.logits for t in terms)
    gap = float(np.max(np.abs(total - logits)))
    results = {
        "terms": circuits.term_norm_report(terms),
        "sum_vs_forward_max_abs": gap,
        "n_terms": len(terms),
    }
    if args.materialize:
        mat = circuits.materialized_expansion(tf, tokens)
        results["materialized"] = [
            {"label": a.label, "max_abs_gap": float(np.max(np.abs(a.logits - b.logits)))}
            for a, b in zip(terms, mat)
        ]
        results["materialized_max_abs_gap"] = max(r["max_abs_gap"] for r in results["materialized"])
    config = {"ckpt": str(args.ckpt), "tokens": tokens, "materialize": bool(args.materialize)}
    _write_report(args.report, "expand", config, manifest.get("seed"), results, [], started)
    print(f"{len(terms)} terms; |sum - forward| = {gap:.3g}")
    return EXIT_OK


# ---------------------------------------------------------------- analyze


def _analysis_weights(model) -> tuple[np.ndarray | None, np.ndarray]:
    """(modifier-side W1 or None, default-output-side W2) of the checkpoint's MLP layer."""
    if isinstance(model, TransformerModel):
        return model.model.mlp.W_I1, model.model.mlp.W_I2
    p = model.params()
    if model.arch in ("bilinear", "swiglu"):
        return p["mlp.W1"], p["mlp.W2"]
    if model.arch == "relu":
        return None, p["mlp.W"]
    return None, p["W"]


def _task_of(manifest) -> TaskConfig | None:
    meta = manifest.get("metadata", {})
    return TaskConfig.from_dict(meta["task"]) if "task" in meta else None


def cmd_analyze(args) -> int:
    started = time.perf_counter()
    model, manifest = load_model(args.ckpt)
    seed = args.seed if args.seed is not None else (manifest.get("seed") or 0)
    W1, W2 = _analysis_weights(model)
    method, k = args.method, args.k
    warnings: list[str] = []
    task = _task_of(manifest)

    def need_w1():
        if W1 is None:
            raise ArgumentError(f"--method {method} needs a bilinear layer; checkpoint is {model.arch}")
        return BilinearLayer(W1, W2)

    if method == "svd":
        b = svd_basis(W2)
        results = {"U": b.U, "singular_values": np.linalg.norm(b.Vt, axis=1), "residual": b.residual,
                   "top": list(range(min(k, b.U.shape[1])))}
        if args.data is not None:
            # report-only alternative basis: left singular vectors of the pre-activation samples
            P = _read_samples(args.data, W2.shape[1]) @ W2.T
            u, s, _ = np.linalg.svd(P.T, full_matrices=False)
            results["activation_svd"] = {"U": fix_signs(u)[0], "singular_values": s}
    elif method == "ica":
        if args.data is None:
            raise ArgumentError("--method ica needs --data (a BLT1 samples x d_in input matrix)")
        X = _read_samples(args.data, W2.shape[1])
        n_comp = min(k, W2.shape[0]) if k else W2.shape[0]
        b = ica_basis(X @ W2.T, n_comp, seed=seed, weights=W2)
        warnings += b.warnings
        results = {"U": b.U, "Vt": b.Vt, "residual": b.residual, "rank_deficient": b.rank_deficient,
                   "n_iter": b.n_iter, "n_components": n_comp}
    elif method == "hosvd":
        B = build_b(need_w1()).B
        core, factors = hosvd(B)
        full_err = float(np.max(np.abs(tucker_reconstruct(core, factors) - B)))
        sweep = []
        max_r = [f.shape[1] for f in factors]
        for frac in np.linspace(0.2, 1.0, 5):
            ranks = [max(1, int(round(frac * r))) for r in max_r]
            c, fs = hosvd(B, ranks)
            sweep.append({"ranks": ranks, "frobenius_error": float(np.linalg.norm(tucker_reconstruct(c, fs) - B))})
        flat = np.argsort(-np.abs(core.ravel()), kind="stable")[:k]
        top_core = [{"index": [int(i) for i in np.unravel_index(f, core.shape)], "value": float(core.ravel()[f])}
                    for f in flat]
        results = {"mode_singular_values": mode_singular_values(B), "reconstruction_max_abs": full_err,
                   "truncation_sweep": sweep, "top_core_entries": top_core}
    elif method == "top-b":
        form = ThirdOrderForm.factored(need_w1())
        results = {"top": [{"index": [i, j, l], "value": v} for i, j, l, v in top_b_coefficients(form, k)]}
    elif method == "top-modified":
        layer = need_w1()
        D = _feature_directions(args, task, seed, layer.d_in)
        U2 = svd_basis(W2).U
        rep = modification_report(D, layer.W1, U2, min(k, U2.shape[1]))
        results = {"default_features": "svd", "features": [
            {"feature": i, "topk": rep.topk[i], "magnitudes": rep.magnitudes[i]} for i in sorted(rep.topk)
        ]}
    elif method == "pairs":
        layer = need_w1()
        D = _feature_directions(args, task, seed, layer.d_in, allow_identity=False)
        if task is None or task.variant != "superposition":
            raise ArgumentError("--method pairs needs a superposition checkpoint for feature activations")
        A, _, _ = gen_superposition_batch(task, seed, 4096, 0, D=D, stream_name="analysis")
        U2 = svd_basis(W2).U
        results = {"pairs": correlated_pair_ranking(A, D, layer.W1, layer.W2, U2, k), "heuristic": True}
        warnings.append(HEURISTIC_PAIRS_WARNING)
    else:  # argparse restricts choices
        raise ArgumentError(f"unknown method {method}")

    config = {"ckpt": str(args.ckpt), "method": method, "k": k, "data": args.data,
              "architecture": manifest["architecture"]}
    _write_report(args.report, "analyze", config, seed, results, warnings, started)
    print(f"analyze {method}: report written to {args.report}")
    return EXIT_OK


def _read_samples(path, d_in: int) -> np.ndarray:
    X = read_tensor(path)
    if X.ndim != 2 or X.shape[1] != d_in:
        raise ArgumentError(f"--data must be samples x {d_in}, got {X.shape}")
    return X


def _feature_directions(args, task, seed, d_in, allow_identity=True) -> np.ndarray:
    if args.data is not None and args.method == "top-modified":
        D = read_tensor(args.data)
        if D.ndim != 2 or D.shape[1] != d_in:
            raise ArgumentError(f"--data must be n_features x {d_in}, got {D.shape}")
        return D
    if task is not None and task.variant == "superposition":
        return make_dictionary(task, seed)
    if allow_identity:
        return np.eye(d_in)
    raise ArgumentError("no feature dictionary available for this checkpoint")


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on a synthetic task")
    t.add_argument("--task", required=True, choices=["superposition", "toy-lm"])
    t.add_argument("--arch", required=True, choices=["bilinear", "relu", "swiglu", "toy-transformer", "linear"])
    t.add_argument("--config", help="JSON file with task/opt/model sections")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--lambda", dest="lam", type=float, help="modifier norm penalty weight")
    t.add_argument("--penalty", choices=["l2", "l1"])
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run equivalence suites on a checkpoint")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--suite", default="all", choices=["all", *SUITES])
    v.add_argument("--seed", type=int)
    v.add_argument("--report")
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("expand", help="path-expand a transformer's logits")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--tokens", required=True, help="comma-separated token ids")
    e.add_argument("--materialize", action="store_true")
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_expand)

    a = sub.add_parser("analyze", help="feature-construction analyses")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--method", required=True, choices=["ica", "svd", "hosvd", "top-b", "top-modified", "pairs"])
    a.add_argument("--k", type=int, default=5)
    a.add_argument("--data")
    a.add_argument("--seed", type=int)
    a.add_argument("--report", required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingError as e:
        print(f"training failed at step {e.step}: {e}", file=sys.stderr)
        return EXIT_TRAIN
    except ConvergenceError as e:
        print(f"error: {e} (after {e.iterations} iterations)", file=sys.stderr)
        return EXIT_VERIFY
    except (IntegrityError, FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ArgumentError, CapacityError, PreconditionError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except BilinearCircuitsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance criteria 1-13, each at its stated tolerance.

Every test records a ``criterion N: PASS|FAIL ...`` line (shown in the pytest
terminal summary) before asserting, so failures are reported too.
"""
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from bilinear_circuits import circuits
from bilinear_circuits.bilinear import (
    BilinearLayer,
    FeatureSet,
    ThirdOrderForm,
    apply_quadratic,
    build_b,
    build_b_by_contraction,
    build_z,
    forward,
    pairwise_decompose,
)
from bilinear_circuits.errors import FormatError, IntegrityError, VersionError
from bilinear_circuits.features import (
    ICA_GAUSSIAN_WARNING,
    ica_basis,
    modification_magnitudes,
    modified_default_features,
    modifier_vector,
    topk_modified,
)
from bilinear_circuits.persistence import decode_tensor, encode_tensor, load_model, read_checkpoint, save_model
from bilinear_circuits.rng import stream
from bilinear_circuits.tensor_core import hosvd, tensor_inner, tucker_reconstruct
from bilinear_circuits.training import (
    LayerAutoencoder,
    OptConfig,
    TaskConfig,
    TransformerModel,
    evaluate,
    gen_token_batch,
    grad_check,
    train,
)


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {n}: {detail}"


def _rng(case: int, tag: int) -> np.random.Generator:
    return stream(case, "verify", 1000 + tag)


def test_criterion_01_bform_identity():
    start = time.perf_counter()
    e_fwd = e_fact = 0.0
    for case in range(200):
        rng = _rng(case, 1)
        m, n = (int(v) for v in rng.integers(1, 65, size=2))
        layer = BilinearLayer(rng.normal(size=(m, n)), rng.normal(size=(m, n)))
        dense, fact = build_b(layer), ThirdOrderForm.factored(layer)
        X = rng.normal(size=(100, n))
        F = forward(layer, X)
        for i in range(100):
            q = apply_quadratic(dense, X[i], X[i])
            e_fwd = max(e_fwd, float(np.max(np.abs(F[i] - q))))
            e_fact = max(e_fact, float(np.max(np.abs(q - apply_quadratic(fact, X[i], X[i])))))
    elapsed = time.perf_counter() - start
    record(1, e_fwd <= 1e-10 and e_fact <= 1e-10 and elapsed <= 30.0,
           f"forward vs x.B.x {e_fwd:.2e}, dense vs factored {e_fact:.2e} (tol 1e-10), {elapsed:.1f}s (limit 30s)")


def test_criterion_02_z_contraction_route():
    worst_ulps = 0.0
    for case in range(50):
        rng = _rng(case, 2)
        m, n = (int(v) for v in rng.integers(1, 17, size=2))
        layer = BilinearLayer(rng.normal(size=(m, n)), rng.normal(size=(m, n)))
        # independent route spelled out here: W1 ._{12} Z ._{21} W2, then swap the first two axes
        T = tensor_inner(tensor_inner(layer.W1, build_z(m), 0, 1), layer.W2, 1, 0)
        via_z = np.transpose(T, (1, 0, 2))
        ref = build_b(layer).B
        assert np.array_equal(build_b_by_contraction(layer), via_z)
        ulps = np.abs(via_z - ref) / np.spacing(np.maximum(np.abs(ref), np.finfo(float).tiny))
        worst_ulps = max(worst_ulps, float(np.max(ulps)))
    record(2, worst_ulps == 0.0, f"max ulp distance {worst_ulps} over 50 cases (tol 0)")


def test_criterion_03_associativity():
    # dyadic data keeps every product and partial sum exact, so bitwise equality is a fair demand
    mismatches = 0
    for case in range(100):
        rng = _rng(case, 3)
        m, n = (int(v) for v in rng.integers(1, 17, size=2))
        layer = BilinearLayer(rng.integers(-16, 17, size=(m, n)) / 8, rng.integers(-16, 17, size=(m, n)) / 8)
        x, y = rng.integers(-16, 17, size=n) / 16, rng.integers(-16, 17, size=n) / 16
        d = build_b(layer)
        left = apply_quadratic(d, x, y, "left")
        right = apply_quadratic(d, x, y, "right")
        mismatches += not np.array_equal(left, right)
    # real-valued inputs: the two orders round differently, so bound the gap instead
    gap = 0.0
    for case in range(100):
        rng = _rng(case, 30)
        m, n = (int(v) for v in rng.integers(1, 17, size=2))
        d = build_b(BilinearLayer(rng.normal(size=(m, n)), rng.normal(size=(m, n))))
        x, y = rng.normal(size=n), rng.normal(size=n)
        gap = max(gap, float(np.max(np.abs(apply_quadratic(d, x, y, "left") - apply_quadratic(d, x, y, "right")))))
    record(3, mismatches == 0 and gap <= 1e-12,
           f"{100 - mismatches}/100 exact (dyadic data); real-valued max gap {gap:.2e} (tol 1e-12)")


def test_criterion_04_path_expansion():
    start = time.perf_counter()
    e_sum = e_mat = 0.0
    for case in range(50):
        rng = _rng(case, 4)
        n_heads = int(rng.integers(0, 5))
        d_model = int(rng.integers(max(n_heads, 1), 33))
        n_vocab = int(rng.integers(2, 65))
        n_ctx = int(rng.integers(1, 17))
        model = circuits.random_transformer(
            rng, d_model=d_model, n_heads=n_heads, d_mlp=int(rng.integers(1, 65)), n_vocab=n_vocab,
            n_ctx_max=n_ctx if case % 2 else None)
        toks = rng.integers(0, n_vocab, size=n_ctx)
        terms = circuits.full_expansion(model, toks)
        e_sum = max(e_sum, float(np.max(np.abs(sum(t.logits for t in terms) - circuits.forward(model, toks)))))
        mat = circuits.materialized_expansion(model, toks)
        assert [t.label for t in mat] == [t.label for t in terms]
        e_mat = max(e_mat, max(float(np.max(np.abs(a.logits - b.logits))) for a, b in zip(terms, mat)))
    elapsed = time.perf_counter() - start
    record(4, e_sum <= 1e-8 and e_mat <= 1e-6 and elapsed <= 120.0,
           f"sum vs forward {e_sum:.2e} (tol 1e-8), materialized {e_mat:.2e} (tol 1e-6), {elapsed:.1f}s (limit 120s)")


def test_criterion_05_mlp_summands():
    toks = [1, 4, 2, 7]
    m0 = circuits.random_transformer(_rng(0, 5), n_heads=0)
    terms = circuits.full_expansion(m0, toks)
    mlp_nonzero = [t.label for t in terms if t.label.startswith("mlp:") and np.any(t.logits != 0)]
    x0 = m0.W_E[:, toks].T
    groups0 = circuits.mlp_term_groups(m0, circuits.residual_components(m0, toks))
    direct_ok = mlp_nonzero == ["mlp:direct×direct"] and np.array_equal(groups0[0].logits, m0.mlp(x0))

    worst, labels_ok = 0.0, True
    for case in range(20):
        m1 = circuits.random_transformer(_rng(case, 50), n_heads=1)
        x1 = circuits.residual_after_attention(m1, toks)
        groups = circuits.mlp_term_groups(m1, circuits.residual_components(m1, toks), x1)
        labels_ok &= [g.label for g in groups] == ["mlp:direct×direct", "mlp:direct×head 0",
                                                   "mlp:head 0×direct", "mlp:head 0×head 0"]
        worst = max(worst, float(np.max(np.abs(sum(g.logits for g in groups) - m1.mlp(x1)))))
    record(5, direct_ok and labels_ok and worst <= 1e-9,
           f"no heads -> only direct×direct: {direct_ok}; one head -> 4 groups: {labels_ok}, "
           f"sum vs F(x1) {worst:.2e} (tol 1e-9)")


def test_criterion_06_pairwise_decomposition():
    worst = 0.0
    for case in range(100):
        rng = _rng(case, 6)
        m, n = (int(v) for v in rng.integers(1, 17, size=2))
        nf = int(rng.integers(1, 12))
        layer = BilinearLayer(rng.normal(size=(m, n)), rng.normal(size=(m, n)))
        D = rng.normal(size=(nf, n))
        D /= np.linalg.norm(D, axis=1, keepdims=True)
        a = np.where(rng.uniform(size=nf) < 0.4, rng.uniform(size=nf), 0.0)
        fs = FeatureSet(D, a)
        form = build_b(layer) if case % 2 else ThirdOrderForm.factored(layer)
        total = sum(pairwise_decompose(form, fs).values(), np.zeros(m))
        worst = max(worst, float(np.max(np.abs(total - forward(layer, fs.combine())))))

    layer = BilinearLayer(np.eye(2), np.array([[1.0, 1.0], [1.0, -1.0]]))
    terms = pairwise_decompose(build_b(layer), FeatureSet(np.eye(2), np.ones(2)))
    expected = {(0, 0): [1, 0], (0, 1): [1, 0], (1, 0): [0, 1], (1, 1): [0, -1]}
    two_ok = list(terms) == list(expected) and all(np.array_equal(terms[k], v) for k, v in expected.items())
    record(6, worst <= 1e-9 and two_ok,
           f"completeness {worst:.2e} (tol 1e-9); two-feature four summands term-by-term: {two_ok}")


def test_criterion_07_relu_modifier():
    rng = _rng(0, 7)
    bad = planted = 0
    for case in range(10_000):
        W = rng.normal(size=(6, 5))
        x = rng.normal(size=5)
        if case % 3 == 0:
            W[case % 6] = 0.0
            planted += 1
        z = W @ x
        mv = modifier_vector("relu", W, x)
        if not (np.all((mv == 0) | (mv == 1)) and np.array_equal(mv * z, np.maximum(z, 0.0))):
            bad += 1
    record(7, bad == 0, f"{10_000 - bad}/10000 exact, {planted} with planted zero pre-activations")


def test_criterion_08_ica():
    def hits(n_src):
        good = 0
        for seed in range(20):
            rng = _rng(seed, 80 + n_src)
            S = rng.uniform(-1, 1, size=(5000, n_src))
            A = rng.normal(size=(n_src, n_src))
            U = ica_basis(S @ A.T, n_src, seed=seed).U
            cos = np.abs(U.T @ (A / np.linalg.norm(A, axis=0))).max(axis=0)
            good += bool(np.all(cos >= 0.95))
        return good

    h2, h4 = hits(2), hits(4)
    rng = _rng(0, 88)
    W2 = rng.normal(size=(4, 4))
    b = ica_basis(rng.uniform(-1, 1, size=(5000, 4)) @ W2.T, 4, weights=W2)
    recon = float(np.max(np.abs(b.U @ b.Vt - W2)))
    gauss = ica_basis(rng.normal(size=(100_000, 3)), 3)
    warned = ICA_GAUSSIAN_WARNING in gauss.warnings
    record(8, h2 >= 18 and h4 >= 18 and recon <= 1e-6 and warned,
           f"2-source {h2}/20, 4-source {h4}/20 (need 18); U.Vt vs W2 {recon:.2e} (tol 1e-6); "
           f"Gaussian warning: {warned}")


def test_criterion_09_hosvd():
    worst = 0.0
    monotone = True
    for case in range(50):
        rng = _rng(case, 9)
        shape = tuple(int(v) for v in rng.integers(2, 7, size=3))
        T = rng.normal(size=shape)
        core, factors = hosvd(T)
        worst = max(worst, float(np.max(np.abs(tucker_reconstruct(core, factors) - T))))
        full = [f.shape[1] for f in factors]
        errs = []
        for frac in np.linspace(0.2, 1.0, 5):
            ranks = [max(1, int(round(frac * r))) for r in full]
            c, fs = hosvd(T, ranks)
            errs.append(float(np.linalg.norm(tucker_reconstruct(c, fs) - T)))
        monotone &= all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(errs, errs[1:]))
    record(9, worst <= 1e-10 and monotone,
           f"full reconstruction {worst:.2e} (tol 1e-10); truncation error non-increasing: {monotone}")


def test_criterion_10_modification_analysis():
    worst = 0.0
    topk_ok = 0
    for case in range(100):
        rng = _rng(case, 10)
        m, n, r = (int(v) for v in rng.integers(1, 12, size=3))
        W1, U2, d = rng.normal(size=(m, n)), rng.normal(size=(m, r)), rng.normal(size=n)
        v = W1 @ d
        via_z = tensor_inner(tensor_inner(build_z(m), v, 1, 0), U2, 1, 0)
        worst = max(worst, float(np.max(np.abs(via_z - modified_default_features(d, W1, U2)))))
        k = int(rng.integers(0, r + 1))
        mags = [float(np.linalg.norm(U2[:, l] - v * U2[:, l])) for l in range(r)]
        brute = sorted(range(r), key=lambda l: (-mags[l], l))[:k]
        np.testing.assert_allclose(modification_magnitudes(d, W1, U2), mags, rtol=1e-12, atol=1e-12)
        topk_ok += topk_modified(d, W1, U2, k) == brute
    record(10, worst <= 1e-12 and topk_ok == 100,
           f"Z-contraction vs columnwise scaling {worst:.2e} (tol 1e-12); topk vs brute force {topk_ok}/100")


def test_criterion_11_gradient_checks():
    errs = {}
    for arch in ("bilinear", "swiglu"):
        model = LayerAutoencoder.init(arch, 6, 8, stream(0, "init"))
        X = stream(0, "gradcheck", 1).uniform(0, 1, size=(16, 6))
        batch = {"X": X, "target": X, "importance": 0.9 ** np.arange(6), "lam": 0.1, "penalty": "l2"}
        assert sum(p.size for p in model.params().values()) <= 1000
        errs[arch] = grad_check(model, batch, n_coords=1000).max_rel_error
    tf = TransformerModel.init(stream(0, "init"), 8, 8, d_model=8, n_heads=2, d_mlp=12)
    assert sum(p.size for p in tf.params().values()) <= 1000
    tokens = gen_token_batch(TaskConfig(variant="toy_lm", n_vocab=8, n_ctx=8), 0, 4)
    errs["toy_transformer"] = grad_check(tf, {"tokens": tokens}, n_coords=1000).max_rel_error
    record(11, all(e <= 1e-6 for e in errs.values()),
           ", ".join(f"{k} {v:.2e}" for k, v in errs.items()) + " (tol 1e-6)")


@pytest.mark.slow
def test_criterion_12_training_sanity():
    task = TaskConfig(n_features=4, d_input=4, p=1.0)
    model, _ = train("bilinear", task, OptConfig(steps=2000, seed=0))
    mse = evaluate(model, task, 0)["loss"]

    start = time.perf_counter()
    lm_task = TaskConfig(variant="toy_lm", n_vocab=8, n_ctx=8, pattern="induction-repeat")
    lm, _ = train("toy_transformer", lm_task, OptConfig(steps=1500, batch_size=64, lr=1e-2, seed=0))
    lm_eval = evaluate(lm, lm_task, 0)
    lm_time = time.perf_counter() - start

    wins = 0
    pen_task = TaskConfig(n_features=6, d_input=4, p=0.5)
    for seed in range(10):
        norms = []
        for lam in (0.0, 1e3):
            mdl, _ = train("bilinear", pen_task, OptConfig(steps=500, seed=seed, modifier_norm_penalty=lam))
            norms.append(evaluate(mdl, pen_task, seed)["mean_modifier_norm"])
        wins += norms[1] < norms[0]
    ok = mse <= 0.01 and lm_eval["loss"] < lm_eval["unigram_loss"] and lm_time <= 300 and wins >= 9
    record(12, ok, f"superposition MSE {mse:.2e} after 2000 steps (tol 1e-2); toy-LM loss {lm_eval['loss']:.3f} "
                   f"vs unigram {lm_eval['unigram_loss']:.3f} in {lm_time:.1f}s (limit 300s); "
                   f"penalty shrinks modifier on {wins}/10 seeds (need 9)")


def test_criterion_13_persistence(tmp_path):
    rng = _rng(0, 13)
    tensors_ok = all(
        decode_tensor(encode_tensor(t)).tobytes() == t.tobytes()
        for t in (rng.normal(size=(3, 4, 5)), rng.normal(size=7).astype(np.float32), rng.normal(size=(2, 1, 3, 2)))
    )
    model = TransformerModel.init(stream(0, "init"), 8, 8, d_model=8, d_mlp=8)
    save_model(model, tmp_path / "ck", seed=0)
    back, _ = load_model(tmp_path / "ck")
    ckpt_ok = all(back.params()[k].tobytes() == v.tobytes() for k, v in model.params().items())

    errors = {}
    good = encode_tensor(np.ones(3))
    try:
        decode_tensor(b"BLT2" + good[4:])
    except FormatError:
        errors["magic"] = True
    f = tmp_path / "ck" / "mlp.W_I2.blt"
    raw = bytearray(f.read_bytes())
    raw[-1] ^= 0x01
    f.write_bytes(bytes(raw))
    try:
        read_checkpoint(tmp_path / "ck")
    except IntegrityError:
        errors["hash"] = True
    man = tmp_path / "ck" / "manifest.json"
    data = json.loads(man.read_text())
    data["format_version"] = 99
    man.write_text(json.dumps(data))
    try:
        read_checkpoint(tmp_path / "ck")
    except VersionError:
        errors["version"] = True
    ok = tensors_ok and ckpt_ok and errors == {"magic": True, "hash": True, "version": True}
    record(13, ok, f"tensor round-trip bitwise: {tensors_ok}; checkpoint round-trip bitwise: {ckpt_ok}; "
                   f"error classes raised: {sorted(errors)}")

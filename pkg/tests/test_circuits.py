import math

import numpy as np
import pytest

from bilinear_circuits import circuits
from bilinear_circuits.circuits import (
    AttentionHead,
    BilinearMLP,
    ToyTransformer,
    attention_pattern,
    forward,
    full_expansion,
    materialized_expansion,
    mlp_term_groups,
    random_transformer,
    residual_after_attention,
    residual_components,
    term_norm_report,
)
from bilinear_circuits.errors import ArgumentError, CapacityError, ConsistencyError


def _zero_model(d=3, V=4, heads=1, d_mlp=2):
    z = np.zeros
    hs = [AttentionHead(z((d, d)), z((d, d)), z((d, d)), z((d, d))) for _ in range(heads)]
    return ToyTransformer(z((d, V)), z((V, d)), hs, BilinearMLP(z((d_mlp, d)), z((d_mlp, d)), z((d, d_mlp))))


def test_attention_patterns():
    m = random_transformer(np.random.default_rng(0))
    np.testing.assert_array_equal(attention_pattern(m, [3], 0), [[1.0]])
    A = attention_pattern(_zero_model(), [0, 1, 2, 3], 0)
    for p in range(4):
        np.testing.assert_allclose(A[p, : p + 1], 1.0 / (p + 1), atol=1e-15)
        assert np.all(A[p, p + 1:] == 0)
    with pytest.raises(ArgumentError):
        attention_pattern(m, [0], 5)


def test_attention_rank_one_qk_by_hand():
    d = 2
    W_E = np.array([[1.0, 0.0], [0.0, 1.0]])
    q = np.array([[1.0, 2.0]])
    k = np.array([[3.0, -1.0]])
    head = AttentionHead(q, k, np.zeros((1, d)), np.zeros((d, 1)))
    mlp = BilinearMLP(np.zeros((1, d)), np.zeros((1, d)), np.zeros((d, 1)))
    m = ToyTransformer(W_E, np.eye(2), [head], mlp)
    A = attention_pattern(m, [0, 1], 0)
    # token 1 = e_1: query 2; keys: e_0 -> 3, e_1 -> -1; scale 1/sqrt(1)
    logits = np.array([2.0 * 3.0, 2.0 * -1.0])
    expected = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
    np.testing.assert_allclose(A[1], expected, rtol=1e-14)


def test_direct_pathway_only():
    m = _zero_model(d=3, V=4)
    rng = np.random.default_rng(1)
    W_E, W_U = rng.normal(size=(3, 4)), rng.normal(size=(4, 3))
    m = ToyTransformer(W_E, W_U, m.heads, m.mlp)
    toks = [0, 3, 1]
    np.testing.assert_allclose(forward(m, toks), (W_U @ W_E)[:, toks].T, atol=1e-15)


def test_zero_mlp_output_is_attention_only():
    m = random_transformer(np.random.default_rng(2))
    m0 = ToyTransformer(m.W_E, m.W_U, m.heads, BilinearMLP(m.mlp.W_I1, m.mlp.W_I2, np.zeros_like(m.mlp.W_Om)))
    toks = [1, 2, 3, 4]
    np.testing.assert_allclose(forward(m0, toks), residual_after_attention(m, toks) @ m.W_U.T, atol=1e-15)
    terms = full_expansion(m0, toks)
    nonzero = [t.label for t in terms if np.any(t.logits != 0)]
    assert nonzero == ["embed-unembed", "head:0", "head:1"]


@pytest.mark.parametrize("positional", [False, True])
def test_expansion_sums_to_forward(positional):
    for seed in range(50):
        m = random_transformer(np.random.default_rng(seed), n_ctx_max=5 if positional else None)
        toks = np.random.default_rng(seed + 1000).integers(0, 11, size=5)
        terms = full_expansion(m, toks)
        assert np.max(np.abs(sum(t.logits for t in terms) - forward(m, toks))) <= 1e-8


def test_residual_components():
    m = random_transformer(np.random.default_rng(3), n_heads=0)
    comps = residual_components(m, [1, 2])
    assert [c.label for c in comps] == ["direct"]
    np.testing.assert_array_equal(comps[0].values, m.W_E[:, [1, 2]].T)
    m = random_transformer(np.random.default_rng(4))
    zv = [AttentionHead(h.W_Q, h.W_K, np.zeros_like(h.W_V), h.W_O) for h in m.heads]
    mz = ToyTransformer(m.W_E, m.W_U, zv, m.mlp)
    for c in residual_components(mz, [1, 2, 3])[1:]:
        assert np.all(c.values == 0)
    toks = [0, 5, 9, 2]
    comps = residual_components(m, toks)
    np.testing.assert_allclose(sum(c.values for c in comps), residual_after_attention(m, toks), atol=1e-12)


def test_mlp_groups():
    m = random_transformer(np.random.default_rng(5), n_heads=0)
    toks = [1, 4]
    groups = mlp_term_groups(m, residual_components(m, toks))
    assert [g.label for g in groups] == ["mlp:direct×direct"]
    x0 = m.W_E[:, toks].T
    np.testing.assert_allclose(groups[0].logits, m.mlp(x0), atol=1e-14)

    m = random_transformer(np.random.default_rng(6), n_heads=1)
    comps = residual_components(m, [1, 2, 3])
    x1 = residual_after_attention(m, [1, 2, 3])
    groups = mlp_term_groups(m, comps, x1)
    assert [g.label for g in groups] == ["mlp:direct×direct", "mlp:direct×head 0",
                                         "mlp:head 0×direct", "mlp:head 0×head 0"]
    assert np.max(np.abs(sum(g.logits for g in groups) - m.mlp(x1))) <= 1e-9
    with pytest.raises(ConsistencyError):
        mlp_term_groups(m, comps, x1 + 1.0)

    zero = ToyTransformer(m.W_E, m.W_U, m.heads, BilinearMLP(np.zeros_like(m.mlp.W_I1), m.mlp.W_I2, m.mlp.W_Om))
    assert all(np.all(g.logits == 0) for g in mlp_term_groups(zero, comps))


def test_single_direct_term_for_identity_vocab():
    m = _zero_model(d=2, V=2, heads=0)
    m = ToyTransformer(np.eye(2), np.eye(2), [], m.mlp)
    terms = full_expansion(m, [0, 1, 1])
    nonzero = [t for t in terms if np.any(t.logits != 0)]
    assert [t.label for t in nonzero] == ["embed-unembed"]
    np.testing.assert_array_equal(nonzero[0].logits, np.eye(2)[[0, 1, 1]])


@pytest.mark.parametrize("positional", [False, True])
def test_materialized_matches_distributed(positional):
    for seed in range(10):
        m = random_transformer(np.random.default_rng(seed), n_ctx_max=6 if positional else None)
        toks = np.random.default_rng(seed).integers(0, 11, size=6)
        a, b = full_expansion(m, toks), materialized_expansion(m, toks)
        assert [t.label for t in a] == [t.label for t in b]
        for x, y in zip(a, b):
            assert np.max(np.abs(x.logits - y.logits)) <= 1e-6


def test_materialize_capacity_guard():
    m = random_transformer(np.random.default_rng(0), n_vocab=circuits.MATERIALIZE_MAX_VOCAB + 1)
    with pytest.raises(CapacityError):
        materialized_expansion(m, [0])


def test_token_validation():
    m = random_transformer(np.random.default_rng(0), n_ctx_max=3)
    for bad in ([], [11], [-1], [0, 1, 2, 3], [[0]]):
        with pytest.raises(ArgumentError):
            forward(m, bad)


def test_term_norm_report():
    t = circuits.TermContribution
    assert term_norm_report([t("a", np.array([[3.0, 4.0]]))])[0]["share"] == 1.0
    rows = term_norm_report([t("a", np.ones((2, 2))), t("b", np.ones((2, 2)))])
    assert rows[0]["frobenius"] == rows[1]["frobenius"]
    m = random_transformer(np.random.default_rng(7))
    terms = full_expansion(m, [1, 2, 3])
    rows = term_norm_report(terms)
    denom = np.linalg.norm(sum(x.logits for x in terms))
    s = sum(np.linalg.norm(x.logits) for x in terms) / denom
    assert 0.99 * s <= sum(r["share"] for r in rows) <= 1.01 * s


def test_qk_scaling():
    m = random_transformer(np.random.default_rng(8), d_head=4)
    h = m.heads[0]
    x0 = m.W_E[:, [1, 2]].T
    s = (x0 @ h.W_Q.T) @ (x0 @ h.W_K.T).T / math.sqrt(4)
    e = np.exp(s[1] - s[1].max())
    np.testing.assert_allclose(attention_pattern(m, [1, 2], 0)[1], e / e.sum(), rtol=1e-13)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from readfuse import fusion
from readfuse import numerics as nx
from readfuse.numerics import Tensor


def test_equal_scores_uniform():
    q = fusion.attention_from_scores(Tensor([[1.0, 1.0, 1.0]]), np.ones((1, 3)), np.ones((1, 3)))
    np.testing.assert_allclose(q.data, 1 / 3, rtol=1e-6)


def test_two_scores_no_discount():
    q = fusion.attention_from_scores(Tensor([[2.0, 1.0]]), np.ones((1, 2)), np.ones((1, 2)))
    np.testing.assert_allclose(q.data, [[0.7311, 0.2689]], atol=1e-4)


def test_literal_discount_example():
    q = fusion.attention_from_scores(Tensor([[2.0, 1.0]]), np.ones((1, 2)), np.array([[0.0, 1.0]]), "literal")
    np.testing.assert_allclose(q.data, [[0.2689, 0.7311]], atol=1e-4)


def test_literal_discount_can_raise_a_negative_score_word():
    # a noise word with a negative score gains mass when discounted (the reason log mode exists)
    raw = Tensor([[-2.0, 1.0]])
    full = fusion.attention_from_scores(raw, np.ones((1, 2)), np.array([[1.0, 1.0]]), "literal").data
    half = fusion.attention_from_scores(raw, np.ones((1, 2)), np.array([[0.5, 1.0]]), "literal").data
    assert half[0, 0] > full[0, 0]


def test_unknown_discount_mode():
    with pytest.raises(ValueError):
        fusion.attention_from_scores(Tensor([[1.0]]), np.ones((1, 1)), np.ones((1, 1)), "sqrt")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.data())
def test_log_mode_halving_halves_relative_weight(scores, draw):
    J = len(scores)
    j = draw.draw(st.integers(0, J - 1))
    D = np.array(draw.draw(st.lists(st.floats(0.05, 1.0), min_size=J, max_size=J)))
    raw = Tensor(np.array([scores]))
    q1 = fusion.attention_from_scores(raw, np.ones((1, J)), D[None], "log").data[0]
    D2 = D.copy()
    D2[j] /= 2
    q2 = fusion.attention_from_scores(raw, np.ones((1, J)), D2[None], "log").data[0]
    k = (j + 1) % J
    assert q2[j] / q2[k] == pytest.approx(0.5 * q1[j] / q1[k], rel=1e-5)
    assert q2[j] <= q1[j] + 1e-7


def test_read_external_needs_a_slot():
    P = {"read_Wq": Tensor(np.zeros((4, 3))), "read_v": Tensor(np.zeros((3, 1)))}
    with pytest.raises(ValueError):
        fusion.read_external(P, Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))),
                             Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2)))


def test_external_context_one_hot_and_convexity(rng):
    emb = Tensor(rng.normal(size=(1, 3, 5)))
    c = fusion.external_context(Tensor([[0.0, 1.0, 0.0]]), emb)
    np.testing.assert_allclose(c.data[0], emb.data[0, 1])
    q = rng.dirichlet(np.ones(3))[None]
    c = fusion.external_context(Tensor(q), emb).data[0]
    assert np.linalg.norm(c) <= np.linalg.norm(emb.data[0], axis=1).max() + 1e-12


def test_external_context_identical_embeddings(rng):
    e = rng.normal(size=5)
    emb = Tensor(np.tile(e, (1, 4, 1)))
    np.testing.assert_allclose(fusion.external_context(Tensor(np.full((1, 4), 0.25)), emb).data[0], e)


def test_gate_zero_weights_is_half():
    P = {"gate_W1": Tensor(np.zeros((6, 3))), "gate_b1": Tensor(np.zeros(3)),
         "gate_W2": Tensor(np.zeros((3, 1))), "gate_b2": Tensor(np.zeros(1))}
    z = Tensor(np.ones((2, 2)))
    assert (fusion.fusion_gate(P, z, z, z).data == 0.5).all()


def test_gate_in_open_interval(rng):
    P = {"gate_W1": Tensor(rng.normal(size=(6, 3)) * 5), "gate_b1": Tensor(rng.normal(size=3)),
         "gate_W2": Tensor(rng.normal(size=(3, 1)) * 5), "gate_b2": Tensor(rng.normal(size=1))}
    x = Tensor(rng.normal(size=(20, 2)))
    b = fusion.fusion_gate(P, x, x, x).data
    assert ((b > 0) & (b < 1)).all()


def test_fuse_worked_example():
    # slot 0 is <null>, slot 1 holds token 0
    out = fusion.fuse(Tensor([[0.5, 0.5]]), Tensor([[0.2, 0.8]]), Tensor([[0.5]]),
                      np.array([[4, 0]]), np.ones((1, 2)), has_null=True)
    np.testing.assert_allclose(out.data, [[0.70, 0.30]], atol=1e-12)


def test_fuse_closed_gate_is_base(rng):
    base = rng.dirichlet(np.ones(6))[None]
    out = fusion.fuse(Tensor(base), Tensor([[0.3, 0.7]]), Tensor([[0.0]]), np.array([[4, 2]]),
                      np.ones((1, 2)), True)
    np.testing.assert_allclose(out.data, base)


def test_fuse_pure_sink_is_base(rng):
    base = rng.dirichlet(np.ones(6))[None]
    out = fusion.fuse(Tensor(base), Tensor([[1.0, 0.0]]), Tensor([[0.9]]), np.array([[4, 2]]),
                      np.ones((1, 2)), True)
    np.testing.assert_allclose(out.data, base)


def test_fuse_without_null_is_two_term_interpolation(rng):
    base = rng.dirichlet(np.ones(5))
    q = np.array([0.6, 0.4])
    out = fusion.fuse(Tensor(base[None]), Tensor(q[None]), Tensor([[0.3]]), np.array([[1, 3]]),
                      np.ones((1, 2)), False).data[0]
    expect = 0.7 * base + 0.3 * np.array([0, 0.6, 0, 0.4, 0])
    np.testing.assert_allclose(out, expect)


def test_fuse_rejects_unnormalized_inputs():
    with pytest.raises(ValueError):
        fusion.fuse(Tensor([[0.5, 0.6]]), Tensor([[1.0]]), Tensor([[0.5]]), np.array([[0]]),
                    np.ones((1, 1)), False)


def _brute_force(base, q, beta, ids, has_null):
    """Mixture of two distributions, renormalized by hand."""
    V = len(base)
    ext = np.zeros(V)
    for j, (w, m) in enumerate(zip(ids, q)):
        if has_null and j == 0:
            continue
        ext[w] += m
    mixed = (1 - beta) * base + beta * ext
    if has_null:
        mixed += beta * q[0] * base  # the sink hands its share back to the base distribution
    return mixed


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.5, 1.0, None]), st.booleans())
def test_fused_distribution_normalizes(seed, q_null, has_null):
    rng = np.random.default_rng(seed)
    V, J = int(rng.integers(2, 12)), int(rng.integers(1, 6))
    base = rng.dirichlet(np.ones(V))
    q = rng.dirichlet(np.ones(J + 1)) if has_null else rng.dirichlet(np.ones(J))
    if has_null and q_null is not None:
        rest = rng.dirichlet(np.ones(J)) * (1 - q_null)
        q = np.concatenate([[q_null], rest])
    ids = rng.integers(0, V, size=len(q))  # repeats allowed
    beta = float(rng.uniform())
    out = fusion.fuse(Tensor(base[None]), Tensor(q[None]), Tensor([[beta]]), ids[None],
                      np.ones((1, len(q))), has_null).data[0]
    assert abs(out.sum() - 1.0) < 1e-6 and (out >= 0).all()
    np.testing.assert_allclose(out, _brute_force(base, q, beta, ids, has_null), atol=1e-12)


def test_fused_target_prob_matches_table(rng):
    B, V, J = 3, 7, 4
    base = rng.dirichlet(np.ones(V), size=B)
    q = rng.dirichlet(np.ones(J), size=B)
    beta = rng.uniform(size=(B, 1))
    ids = np.array([[4, 1, 1, 5], [4, 2, 3, 6], [4, 0, 6, 6]])
    y = np.array([1, 5, 6])
    full = fusion.fuse(Tensor(base), Tensor(q), Tensor(beta), ids, np.ones((B, J)), True).data
    match = (ids == y[:, None]).astype(float)
    match[:, 0] = 0
    got = fusion.fused_target_prob(Tensor(base[np.arange(B), y]), Tensor(q), Tensor(beta), match, True).data
    np.testing.assert_allclose(got, full[np.arange(B), y])


def test_gradients_flow_through_q_beta_and_D(rng):
    params = {"raw": rng.normal(size=(1, 3)), "D": rng.uniform(0.2, 0.9, size=(1, 3)),
              "beta": np.array([[0.2]]), "logits": rng.normal(size=(1, 5))}

    def loss(P):
        q = fusion.attention_from_scores(P["raw"], np.ones((1, 3)), P["D"])
        out = fusion.fuse(nx.softmax(P["logits"]), q, nx.sigmoid(P["beta"]), np.array([[4, 1, 3]]),
                          np.ones((1, 3)), True, check=False)
        return -nx.log(nx.gather(out, np.array([1]))).sum()

    assert nx.finite_difference_check(loss, params, sample_count=50) < 1e-6
    g = nx.backward(loss({k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}))
    assert all(np.abs(g[k]).max() > 0 for k in ("raw", "D", "beta"))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from readfuse import numerics as nx
from readfuse.numerics import Tensor


def leaf(x, name="x"):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, name=name)


def test_softmax_symmetric_pair():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_sigmoid_midpoint():
    assert nx.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)


def test_identity_matmul():
    v = np.array([1.5, -2.0, 3.25], dtype=np.float32)
    np.testing.assert_array_equal((Tensor(np.eye(3, dtype=np.float32)) @ Tensor(v)).data, v)


def test_sigmoid_gradient_at_zero():
    x = leaf([0.0])
    g = nx.backward(nx.sigmoid(x).sum())
    assert g["x"][0] == pytest.approx(0.25)


def test_linear_gradient_is_coefficient():
    c = np.array([2.0, -1.0, 0.5])
    x = leaf([1.0, 2.0, 3.0])
    np.testing.assert_allclose(nx.backward((x * c).sum())["x"], c)


def test_cross_entropy_gradient():
    z = leaf([0.3, -1.2, 2.0, 0.1], "z")
    k = 2
    loss = -nx.log(nx.softmax(z))[k]
    g = nx.backward(loss)["z"]
    p = np.exp(z.data - z.data.max())
    p /= p.sum()
    np.testing.assert_allclose(g, p - np.eye(4)[k], atol=1e-12)


def test_unused_parameters_absent_from_gradient_map():
    x, y = leaf([1.0], "x"), leaf([2.0], "y")
    g = nx.backward((x * 3.0).sum())
    assert set(g) == {"x"}


def test_backward_rejects_non_scalar():
    with pytest.raises(nx.ShapeError):
        nx.backward(leaf([1.0, 2.0]) * 2.0)


def test_shape_mismatch_names_the_op():
    with pytest.raises(nx.ShapeError) as exc:
        leaf(np.ones((2, 3))) @ leaf(np.ones((2, 3)))
    assert "matmul" in str(exc.value)


def test_non_finite_intermediate_is_reported():
    with pytest.raises(nx.NonFiniteError):
        nx.exp(Tensor([1000.0]))


def test_log_of_nonpositive_is_an_error():
    with pytest.raises(nx.GraphError):
        nx.log(Tensor([0.0]))


def test_evaluate_is_deterministic(rng):
    W = rng.normal(size=(4, 3)).astype(np.float32)
    x = rng.normal(size=(2, 4)).astype(np.float32)
    fn = lambda W, x: {"y": nx.tanh(x @ W).sum()}
    a = nx.evaluate(fn, {"W": W, "x": x})["y"].data
    b = nx.evaluate(fn, {"W": W, "x": x})["y"].data
    assert a.tobytes() == b.tobytes()


def test_masked_softmax_gives_zero_mass():
    p = nx.softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[1, 0, 1]])).data
    assert p[0, 1] == 0.0
    assert p.sum() == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_softmax_rows_normalize(values):
    p = nx.softmax(Tensor(np.array(values, dtype=np.float32))).data
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) < 1e-6


def test_gradient_check_square():
    err = nx.finite_difference_check(lambda P: (P["x"] * P["x"]).sum(), {"x": np.array([3.0])},
                                     epsilon=1e-3, sample_count=5)
    assert err < 1e-6


def test_gradient_check_constant_loss():
    err = nx.finite_difference_check(lambda P: (P["x"] * 0.0).sum() + 1.0, {"x": np.ones(4)},
                                     sample_count=10)
    assert err == 0.0


def test_gradient_check_detects_a_wrong_gradient():
    def bad_square(P):
        x = P["x"]
        # forward x^2 but backward 3x
        return nx._node("bad", x.data ** 2, (x,), lambda g: (3.0 * g * x.data,)).sum()
    assert nx.finite_difference_check(bad_square, {"x": np.array([3.0])}, sample_count=3) > 0.1


def test_network_ops_gradient_check(rng):
    params = {"W": rng.normal(size=(5, 4)), "b": rng.normal(size=(4,)), "E": rng.normal(size=(6, 5))}
    ids = np.array([[0, 3, 5], [2, 2, 1]])

    def loss(P):
        x = nx.embedding(P["E"], ids)                       # (2, 3, 5)
        h = nx.tanh(x @ P["W"] + P["b"])                    # (2, 3, 4)
        a = nx.softmax(h.sum(axis=-1), mask=np.array([[1, 1, 0], [1, 1, 1]]))
        pooled = nx.concat([nx.sigmoid(h.mean(axis=1)), a], axis=-1)
        return -nx.log(nx.gather(nx.softmax(pooled), np.array([1, 4]))).sum()

    assert nx.finite_difference_check(loss, params, sample_count=60) < 1e-6


def test_adadelta_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    before = p["w"].copy()
    nx.adadelta_step(p, {"w": np.zeros(2, dtype=np.float32)}, nx.AdadeltaState())
    np.testing.assert_array_equal(p["w"], before)


def test_adadelta_defaults():
    st_ = nx.AdadeltaState()
    assert (st_.rho, st_.eps) == (0.95, 1e-6)


def test_adadelta_second_update_grows():
    p = {"w": np.array([0.0])}
    state = nx.AdadeltaState()
    g = {"w": np.array([1.0])}
    nx.adadelta_step(p, g, state)
    first = abs(p["w"][0])
    nx.adadelta_step(p, g, state)
    assert abs(p["w"][0]) - first >= first


def test_adadelta_decreases_quadratic_bowl():
    p = {"w": np.array([3.0, -2.0])}
    state = nx.AdadeltaState()
    losses = []
    for _ in range(300):
        losses.append(float((p["w"] ** 2).sum()))
        nx.adadelta_step(p, {"w": 2 * p["w"]}, state)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adadelta_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.adadelta_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nx.AdadeltaState())


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = nx.clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.sqrt(g["a"] ** 2 + g["b"] ** 2)[0] == pytest.approx(1.0)


def test_init_uniform_range(rng):
    w = nx.init_uniform((50, 40), rng)
    assert w.dtype == np.float32
    assert np.abs(w).max() <= 0.08

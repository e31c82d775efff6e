import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from endx import numeric as nx
from endx.numeric import (
    NonFiniteError,
    OptimizerConfig,
    ParameterStore,
    Tape,
    Tensor,
    gradient_of,
    optimizer_step,
    schedule_value,
)
from oracles import central_difference, loop_layer_norm, loop_matmul, loop_softmax, relative_error


def grad_check(build, shapes, seed=0, tol=1e-5):
    """Compare tape gradients of ``build(*tensors)`` with central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]

    def value():
        return float(build(*[Tensor(a) for a in arrays]).data)

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        loss = build(*leaves)
    grads = gradient_of(loss, {str(i): t for i, t in enumerate(leaves)})
    numeric = central_difference(value, arrays)
    for i, num in enumerate(numeric):
        assert relative_error(grads[str(i)], num) < tol, i


# ---------------------------------------------------------------- softmax


def test_softmax_symmetric():
    out = nx.softmax_rows(Tensor([[0.0, 0.0]]))
    np.testing.assert_array_equal(out.data, [[0.5, 0.5]])


def test_softmax_known_values():
    out = nx.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
    np.testing.assert_allclose(out, loop_softmax([1.0, 2.0, 3.0]), atol=1e-12)
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_mask_exact_zero():
    out = nx.softmax_rows(Tensor([[1.0, 5.0, 2.0]]), mask=[[True, False, True]]).data[0]
    assert out[1] == 0.0
    np.testing.assert_allclose(out, loop_softmax([1.0, 5.0, 2.0], [1, 0, 1]), atol=1e-12)


def test_softmax_all_masked_row():
    with pytest.raises(ValueError, match="empty softmax support"):
        nx.softmax_rows(Tensor([[1.0, 2.0], [3.0, 4.0]]), mask=[[True, True], [False, False]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_and_shift(m, c):
    out = nx.softmax_rows(Tensor(m)).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    shifted = nx.softmax_rows(Tensor(m + c)).data
    np.testing.assert_allclose(out, shifted, atol=1e-10)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_is_zero():
    d = 6
    out = nx.layer_norm(Tensor(np.full((1, d), 3.7)), Tensor(np.ones(d)), Tensor(np.zeros(d)))
    np.testing.assert_allclose(out.data, np.zeros((1, d)), atol=1e-9)


def test_layer_norm_pair():
    out = nx.layer_norm(Tensor([[1.0, -1.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).data[0]
    expected = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out, [expected, -expected], atol=1e-12)
    assert abs(out[0]) < 1.0


def test_layer_norm_zero_gain_gives_bias():
    rng = np.random.default_rng(1)
    bias = rng.normal(size=4)
    out = nx.layer_norm(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)), Tensor(bias))
    np.testing.assert_allclose(out.data, np.tile(bias, (3, 1)))


def test_layer_norm_moments_and_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 8)) * 3 + 1
    gain, bias = rng.normal(size=8), rng.normal(size=8)
    plain = nx.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(plain.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(plain.var(axis=1), 1.0, atol=1e-5)
    out = nx.layer_norm(Tensor(x), Tensor(gain), Tensor(bias)).data
    for r in range(5):
        np.testing.assert_allclose(out[r], loop_layer_norm(list(x[r]), gain, bias), atol=1e-12)


def test_layer_norm_rejects_bad_gain():
    with pytest.raises(ValueError):
        nx.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(3)))


# ---------------------------------------------------------------- feed forward


def test_feed_forward_zero_weights():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4)))
    z = Tensor(np.zeros((4, 16)))
    out = nx.feed_forward(x, z, Tensor(np.zeros(16)), Tensor(np.zeros((16, 4))), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


@pytest.mark.parametrize("x,expected", [(2.0, 2.0), (-2.0, 0.0)])
def test_feed_forward_relu_gate(x, expected):
    one = Tensor([[1.0]])
    out = nx.feed_forward(Tensor([[x]]), one, Tensor([0.0]), one, Tensor([0.0]))
    assert out.data[0, 0] == expected


def test_feed_forward_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4))
    w1, b1 = rng.normal(size=(4, 16)), rng.normal(size=16)
    w2, b2 = rng.normal(size=(16, 4)), rng.normal(size=4)
    out = nx.feed_forward(Tensor(x), Tensor(w1), Tensor(b1), Tensor(w2), Tensor(b2)).data
    hidden = loop_matmul(x.tolist(), w1.tolist())
    hidden = [[max(0.0, v + b1[j]) for j, v in enumerate(row)] for row in hidden]
    expected = loop_matmul(hidden, w2.tolist())
    expected = [[v + b2[j] for j, v in enumerate(row)] for row in expected]
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_feed_forward_shape_mismatch():
    with pytest.raises(ValueError):
        nx.feed_forward(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 16))), Tensor(np.zeros(16)),
                        Tensor(np.ones((16, 4))), Tensor(np.zeros(4)))


# ---------------------------------------------------------------- gradients


def test_gradient_of_sum_is_ones():
    store = ParameterStore()
    p = store.add("p", np.arange(5.0))
    with Tape():
        loss = nx.sum(p)
    np.testing.assert_array_equal(gradient_of(loss, store)["p"], np.ones(5))


def test_gradient_of_dot_is_twice_p():
    store = ParameterStore()
    p = store.add("p", [1.0, -2.0, 0.5])
    with Tape():
        loss = nx.sum(p * p)
    np.testing.assert_allclose(gradient_of(loss, store)["p"], 2 * p.data)


def test_unreachable_parameter_gets_zero():
    store = ParameterStore()
    p = store.add("p", [1.0, 2.0])
    store.add("unused", np.ones((2, 2)))
    with Tape():
        loss = nx.sum(p)
    grads = gradient_of(loss, store)
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_non_scalar_loss_rejected():
    store = ParameterStore()
    p = store.add("p", [1.0, 2.0])
    with Tape():
        out = p * 2.0
    with pytest.raises(ValueError, match="scalar"):
        gradient_of(out, store)


def test_tape_visits_each_node_once_in_reverse_order():
    store = ParameterStore()
    p = store.add("p", [0.3, -0.2])
    with Tape() as tape:
        h = nx.tanh(p)
        loss = nx.sum(h * h + h)
    gradient_of(loss, store)
    assert tape.last_visits == sorted(tape.last_visits, reverse=True)
    assert len(set(tape.last_visits)) == len(tape.last_visits) == len(tape)


def test_no_recording_outside_tape():
    store = ParameterStore()
    p = store.add("p", [1.0])
    out = p * 3.0
    assert not out.requires_grad


def test_non_finite_names_the_op():
    with pytest.raises(NonFiniteError, match="log"), np.errstate(divide="ignore"):
        nx.log(Tensor([0.0]))


WEIGHTS = np.array([[0.5, -1.0, 2.0, 0.1]])


TAKE_IDS = np.array([[0, 2, 2], [1, 0, 3]])

# (name, loss builder, input shapes) for every differentiable primitive
PRIMITIVE_CASES = [
    ("add", lambda a, b: nx.sum((a + b) * WEIGHTS[:, :3]), [(2, 3), (1, 3)]),
    ("sub", lambda a, b: nx.sum((a - b) * (a - b)), [(2, 3), (3,)]),
    ("mul", lambda a, b: nx.sum(a * b), [(2, 3), (2, 3)]),
    ("div", lambda a, b: nx.sum(a / (nx.exp(b) + 1.0)), [(2, 3), (2, 3)]),
    ("matmul", lambda a, b: nx.sum(nx.tanh(a @ b)), [(3, 4), (4, 2)]),
    ("batched_matmul", lambda a, b: nx.sum(nx.tanh(a @ b)), [(2, 3, 4), (2, 4, 5)]),
    ("broadcast_matmul", lambda a, b: nx.sum(nx.tanh(a @ b)), [(2, 3, 4), (4, 5)]),
    ("tanh", lambda a: nx.sum(nx.tanh(a) * WEIGHTS), [(3, 4)]),
    ("sigmoid", lambda a: nx.sum(nx.sigmoid(a) * WEIGHTS), [(3, 4)]),
    ("exp", lambda a: nx.sum(nx.exp(a) * WEIGHTS), [(3, 4)]),
    ("log", lambda a: nx.sum(nx.log(a * a + 1.0) * WEIGHTS), [(3, 4)]),
    ("transpose", lambda a: nx.sum(nx.transpose(a, (2, 0, 1)) * np.arange(24.0).reshape(4, 2, 3)),
     [(2, 3, 4)]),
    ("swapaxes", lambda a: nx.sum(nx.tanh(nx.swapaxes(a, 0, 1)) * WEIGHTS[:, :2]), [(2, 3)]),
    ("reshape", lambda a: nx.sum(nx.tanh(nx.reshape(a, (3, 4))) * WEIGHTS), [(2, 6)]),
    ("getitem", lambda a: nx.sum(nx.tanh(a[:, 1, :]) * 2.0), [(2, 3, 4)]),
    ("stack", lambda a, b: nx.sum(nx.tanh(nx.stack([a, b], axis=1))), [(2, 3), (2, 3)]),
    ("diagonal", lambda a: nx.sum(nx.tanh(nx.diagonal(a))), [(3, 3)]),
    ("mean", lambda a: nx.sum(nx.tanh(nx.mean(a, axis=1))), [(3, 4)]),
    ("softmax", lambda a: nx.sum(nx.softmax_rows(a) * WEIGHTS), [(3, 4)]),
    ("masked_softmax", lambda a: nx.sum(nx.softmax_rows(a, mask=[[1, 0, 1, 1]]) * WEIGHTS),
     [(3, 4)]),
    ("log_softmax", lambda a: nx.sum(nx.log_softmax_rows(a) * WEIGHTS), [(3, 4)]),
    ("layer_norm", lambda a, g, b: nx.sum(nx.tanh(nx.layer_norm(a, g, b))), [(3, 4), (4,), (4,)]),
    ("kl_terms", lambda p, q: nx.kl_terms(nx.softmax_rows(p), nx.softmax_rows(q)),
     [(3, 4), (3, 4)]),
    ("neg", lambda a: nx.sum(nx.tanh(-a) * WEIGHTS), [(3, 4)]),
    ("relu", lambda a: nx.sum(nx.relu(a) * WEIGHTS), [(3, 4)]),
    ("sum_axis", lambda a: nx.sum(nx.tanh(nx.sum(a, axis=0))), [(3, 4)]),
    ("take_rows", lambda t: nx.sum(nx.tanh(nx.take_rows(t, TAKE_IDS)) * 1.5), [(4, 3)]),
    ("feed_forward", lambda x, w1, b1, w2, b2: nx.sum(nx.tanh(nx.feed_forward(x, w1, b1, w2, b2))),
     [(3, 2), (2, 8), (8,), (8, 2), (2,)]),
]


@pytest.mark.parametrize("name,build,shapes", PRIMITIVE_CASES)
def test_primitive_gradients(name, build, shapes):
    grad_check(build, shapes)


# ---------------------------------------------------------------- optimizer


def test_zero_gradient_no_decay_is_identity():
    store = ParameterStore()
    store.add("w", [[1.0, -2.0], [3.0, 0.5]])
    before = store.snapshot()
    cfg = OptimizerConfig(lr=0.1, weight_decay=0.0)
    for step in range(3):
        optimizer_step(store, {"w": np.zeros((2, 2))}, cfg, step)
    np.testing.assert_array_equal(store["w"].data, before["w"])


def test_first_adam_step_moves_by_lr():
    store = ParameterStore()
    store.add("w", [0.0])
    optimizer_step(store, {"w": np.array([1.0])}, OptimizerConfig(lr=0.1, weight_decay=0.0), 0)
    np.testing.assert_allclose(store["w"].data, [-0.1 / (1 + 1e-8)], rtol=1e-12)


def test_decoupled_decay_only():
    store = ParameterStore()
    store.add("w", [2.0])
    cfg = OptimizerConfig(lr=0.1, weight_decay=0.01)
    for step in range(5):
        optimizer_step(store, {"w": np.array([0.0])}, cfg, step)
    np.testing.assert_allclose(store["w"].data, [2.0 * (1 - 0.001) ** 5], rtol=1e-12)


def test_optimizer_rejects_unknown_grad():
    store = ParameterStore()
    store.add("w", [1.0])
    with pytest.raises(KeyError):
        optimizer_step(store, {"x": np.array([1.0])}, OptimizerConfig(), 0)


def test_optimizer_state_mirrors_shapes():
    store = ParameterStore()
    rng = np.random.default_rng(0)
    store.glorot("a", (3, 5), rng)
    store.zeros("b", (5,))
    for name, t in store.items():
        assert store.state[name].m.shape == t.shape == store.state[name].v.shape


def test_parameter_shapes_immutable():
    store = ParameterStore()
    store.add("w", np.ones((2, 2)))
    with pytest.raises(ValueError):
        store.assign("w", np.ones(3))
    with pytest.raises(KeyError):
        store.add("w", np.ones(1))


@pytest.mark.parametrize("bad", [dict(lr=0), dict(beta1=1.0), dict(beta2=0.0), dict(eps=0),
                                 dict(weight_decay=-1), dict(schedule="cosine")])
def test_optimizer_config_validation(bad):
    with pytest.raises(ValueError):
        OptimizerConfig(**bad)


def test_schedule_values():
    assert schedule_value("constant", 7, 10, 0.3) == 0.3
    assert schedule_value("linear-decay", 0, 100, 2e-5) == 2e-5
    assert schedule_value("linear-decay", 100, 100, 2e-5) == 0.0
    assert schedule_value("linear-decay", 25, 100, 2e-5) == pytest.approx(1.5e-5, abs=1e-20)
    with pytest.raises(ValueError):
        schedule_value("linear-decay", 0, 0, 1.0)


def test_precision_modes():
    with nx.precision("float32"):
        store = ParameterStore()
        p = store.add("p", [1.0])
        assert p.dtype == np.float32
        assert (p * 2.0).dtype == np.float32
    assert nx.get_dtype() == np.float64


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6))
    a = nx.softmax_rows(nx.tanh(Tensor(x) @ Tensor(x.T))).data
    b = nx.softmax_rows(nx.tanh(Tensor(x) @ Tensor(x.T))).data
    assert a.tobytes() == b.tobytes()

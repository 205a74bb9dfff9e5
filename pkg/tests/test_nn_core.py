import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfheal.nn_core import (
    LstmCellParams,
    LstmState,
    NumericError,
    SgdConfig,
    ShapeError,
    activate,
    dense_backward,
    dense_forward,
    grad_check,
    lstm_backward,
    lstm_forward,
    lstm_step,
    pack,
    sgd_step,
    sgd_update,
    unpack,
)


def ref_sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def ref_lstm(W_x, W_h, b, xs):
    """Textbook LSTM written gate by gate, independent of the library."""
    H = b.shape[0] // 4
    h, c = np.zeros(H), np.zeros(H)
    for x in xs:
        z = W_x @ x + W_h @ h + b
        i = ref_sigmoid(z[:H])
        f = ref_sigmoid(z[H : 2 * H])
        g = np.tanh(z[2 * H : 3 * H])
        o = ref_sigmoid(z[3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
    return h, c


# dense ---------------------------------------------------------------------


def test_dense_zero_sigmoid_is_half():
    out = dense_forward(np.zeros((3, 4)), np.zeros(3), np.array([5.0, -2, 1, 9]), "sigmoid")
    assert np.array_equal(out, np.full(3, 0.5))


def test_dense_identity_matrix():
    out = dense_forward(np.eye(2), np.zeros(2), np.array([1.0, 2.0]), "identity")
    assert np.array_equal(out, [1.0, 2.0])


def test_dense_matches_hand_dot_products():
    rng = np.random.default_rng(0)
    W, b, x = rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=2)
    want = [W[r, 0] * x[0] + W[r, 1] * x[1] + b[r] for r in range(3)]
    assert np.max(np.abs(dense_forward(W, b, x) - want)) <= 1e-12


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        dense_forward(np.zeros((3, 4)), np.zeros(3), np.zeros(5))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_sigmoid_strictly_inside_unit_interval(vals):
    out = activate(np.array(vals) * 0.5, "sigmoid")
    assert np.all(out > 0) and np.all(out < 1)


@pytest.mark.parametrize("act", ["identity", "sigmoid", "tanh", "relu"])
def test_dense_backward_grad_check(act):
    rng = np.random.default_rng(3)
    W0, b0 = rng.normal(size=(4, 3)), rng.normal(size=4)
    x = rng.normal(size=(6, 3)) + 0.05
    r = rng.normal(size=(6, 4))
    shapes = {"W": W0, "b": b0}

    def loss(theta):
        p = unpack(theta, shapes)
        out = dense_forward(p["W"], p["b"], x, act)
        dW, db, _ = dense_backward(p["W"], x, out, r, act)
        return float(np.sum(out * r)), pack({"W": dW, "b": db})

    assert grad_check(loss, pack(shapes)) <= 1e-6


# lstm ----------------------------------------------------------------------


def test_lstm_zero_params_give_zero_state():
    p = LstmCellParams.zeros(5, 7)
    s = lstm_step(p, LstmState.zeros(7), np.array([3.0, -1, 2, 8, 0.5]))
    assert np.array_equal(s.h, np.zeros(7)) and np.array_equal(s.c, np.zeros(7))


def test_lstm_step_deterministic():
    rng = np.random.default_rng(1)
    p = LstmCellParams.init(rng, 5, 6)
    x = rng.normal(size=5)
    a = lstm_step(p, LstmState.zeros(6), x)
    b = lstm_step(p, LstmState.zeros(6), x)
    assert a.h.tobytes() == b.h.tobytes() and a.c.tobytes() == b.c.tobytes()


def test_lstm_forward_matches_reference_cell():
    rng = np.random.default_rng(2)
    p = LstmCellParams.init(rng, 5, 6)
    xs = rng.normal(size=(9, 5))
    h_ref, _ = ref_lstm(p.W_x, p.W_h, p.b_h, xs)
    h, _ = lstm_forward(p, xs)
    assert np.max(np.abs(h - h_ref)) <= 1e-12


def test_lstm_batched_equals_single():
    rng = np.random.default_rng(4)
    p = LstmCellParams.init(rng, 3, 4)
    xs = rng.normal(size=(5, 7, 3))
    hb, _ = lstm_forward(p, xs)
    for i in range(5):
        assert np.max(np.abs(hb[i] - lstm_forward(p, xs[i])[0])) <= 1e-14


def test_lstm_shape_errors():
    with pytest.raises(ShapeError):
        LstmCellParams(np.zeros((8, 3)), np.zeros((8, 3)), np.zeros(8))
    p = LstmCellParams.zeros(3, 2)
    with pytest.raises(ShapeError):
        lstm_forward(p, np.zeros((4, 5)))


@pytest.mark.parametrize("seed", range(10))
def test_lstm_bptt_grad_check(seed):
    rng = np.random.default_rng(seed)
    p = LstmCellParams.init(rng, 3, 4)
    xs = rng.normal(size=(6, 3))
    r = rng.normal(size=4)
    like = p.as_dict()

    def loss(theta):
        q = LstmCellParams(**unpack(theta, like))
        h, cache = lstm_forward(q, xs)
        grads, _ = lstm_backward(q, cache, r)
        return float(h @ r), pack(grads)

    assert grad_check(loss, pack(like)) <= 1e-4


def test_lstm_input_gradient():
    rng = np.random.default_rng(11)
    p = LstmCellParams.init(rng, 3, 4)
    xs0 = rng.normal(size=(2, 5, 3))
    r = rng.normal(size=(2, 4))

    def loss(theta):
        xs = theta.reshape(xs0.shape)
        h, cache = lstm_forward(p, xs)
        _, dxs = lstm_backward(p, cache, r)
        return float(np.sum(h * r)), dxs.ravel()

    assert grad_check(loss, xs0.ravel()) <= 1e-4


# sgd -----------------------------------------------------------------------


def test_sgd_step_arithmetic():
    assert sgd_step(np.array(1.0), np.array(0.5), SgdConfig(eta=0.1)) == pytest.approx(0.95, abs=1e-15)


def test_sgd_zero_grad_is_fixed_point():
    theta = np.array([1.5, -2.0])
    assert np.array_equal(sgd_step(theta, np.zeros(2), SgdConfig()), theta)


def test_sgd_clipping_rescales_to_unit_norm():
    g = np.array([6.0, 8.0])  # norm 10
    out = sgd_step(np.zeros(2), g, SgdConfig(eta=1.0, clip_norm=1.0))
    assert np.allclose(out, -g / 10, atol=1e-15)


def test_sgd_clip_disabled_with_zero():
    g = np.array([60.0, 80.0])
    assert np.allclose(sgd_step(np.zeros(2), g, SgdConfig(eta=1.0, clip_norm=0.0)), -g)


def test_sgd_update_clips_by_group_norm():
    out = sgd_update({"a": np.zeros(1), "b": np.zeros(1)}, {"a": np.array([3.0]), "b": np.array([4.0])}, SgdConfig(eta=1.0, clip_norm=1.0))
    assert np.allclose([out["a"][0], out["b"][0]], [-0.6, -0.8], atol=1e-15)


def test_sgd_nonfinite_gradient():
    with pytest.raises(NumericError):
        sgd_step(np.zeros(2), np.array([np.nan, 1.0]), SgdConfig())


def test_sgd_config_rejects_bad_eta():
    with pytest.raises(ValueError):
        SgdConfig(eta=0.0)


def test_sgd_contracts_on_quadratic_bowl():
    theta, prev = np.array(3.0), np.inf
    cfg = SgdConfig(eta=0.1, clip_norm=0.0)
    for _ in range(200):
        theta = sgd_step(theta, 2 * theta, cfg)
        assert abs(theta) < prev
        prev = abs(theta)
    assert abs(theta) < 1e-6


@settings(max_examples=50)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(1e-4, 1.0))
def test_sgd_step_property(theta, grad, eta):
    out = sgd_step(np.array(theta), np.array(grad), SgdConfig(eta=eta, clip_norm=0.0))
    assert out == pytest.approx(theta - eta * grad, rel=1e-12, abs=1e-12)


# grad_check ----------------------------------------------------------------


def test_grad_check_polynomial():
    assert grad_check(lambda th: (float(th[0] ** 2), 2 * th), np.array([3.0])) <= 1e-8


def test_grad_check_constant():
    assert grad_check(lambda th: (4.0, np.zeros_like(th)), np.array([1.0, 2.0])) == 0.0


def test_grad_check_detects_wrong_gradient():
    assert grad_check(lambda th: (float(th @ th), 3 * th), np.array([1.0, -2.0])) > 0.1


def test_grad_check_rejects_nonfinite_and_bad_eps():
    with pytest.raises(NumericError):
        grad_check(lambda th: (np.inf, th), np.array([1.0]))
    with pytest.raises(ValueError):
        grad_check(lambda th: (0.0, th), np.array([1.0]), eps=1e-2)


def test_pack_unpack_roundtrip():
    like = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([7.0])}
    back = unpack(pack(like), like)
    assert all(np.array_equal(back[k], like[k]) for k in like)

import numpy as np
import pytest

import _experiments as E
from selfheal.cluster_sim import SimConfig, generate_dataset
from selfheal.features import FeatureWindow, make_windows
from selfheal.nn_core import ShapeError, grad_check, pack, unpack
from selfheal.predictor import PredictorModel, dnn_loss, dnn_loss_grad, mse, predict_batch, predict_failure


def window(seed=0, n=6, d=4):
    rng = np.random.default_rng(seed)
    return FeatureWindow(rng.random((n, 5)), rng.normal(size=d))


def test_zero_model_outputs_half():
    assert predict_failure(PredictorModel.zeros(5, 3, 4, 2), window()) == 0.5


def test_prediction_deterministic_and_inside_unit_interval():
    m = PredictorModel.init(np.random.default_rng(1), 5, 3, 4, 2)
    a, b = predict_failure(m, window(2)), predict_failure(m, window(2))
    assert a == b and 0.0 < a < 1.0


def test_shape_mismatch():
    m = PredictorModel.init(np.random.default_rng(1), 5, 3, 4, 2)
    with pytest.raises(ShapeError):
        predict_failure(m, window(d=5))


def test_mse_examples():
    assert mse([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert mse([1.0], [0.0]) == 1.0
    with pytest.raises(ValueError):
        mse([], [])


def test_dnn_loss_matches_hand_sum():
    rng = np.random.default_rng(3)
    m = PredictorModel.init(rng, 5, 4, 3, 5)
    X, Ev = rng.random((7, 6, 5)), rng.normal(size=(7, 3))
    y = rng.integers(2, size=7).astype(float)
    p = predict_batch(m, X, Ev)
    want = sum((y[i] - p[i]) ** 2 for i in range(7)) / 7
    assert abs(dnn_loss(m, X, Ev, y) - want) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_dnn_grad_check(seed):
    rng = np.random.default_rng(seed)
    m = PredictorModel.init(rng, 5, 3, 4, 4)
    X, Ev = rng.random((3, 5, 5)), rng.normal(size=(3, 4))
    y = rng.integers(2, size=3).astype(float)

    def loss(theta):
        q = m.with_params(unpack(theta, m.params))
        val, g = dnn_loss_grad(q, X, Ev, y)
        return val, pack(g)

    assert grad_check(loss, pack(m.params)) <= 1e-4


def test_future_fault_matches_brute_force_scan():
    data = generate_dataset(SimConfig(nodes=2, ticks=150, fault_rate=0.05), 8)
    truth = {(lb.node_id, lb.t): lb.fault for lb in data.labels}
    k = 5
    for w in make_windows(data.samples, 16, data.logs, data.labels, k=k):
        scan = False
        for t in range(w.t + 1, w.t + k + 1):
            if truth.get((w.node, t)) is not None:
                scan = True
        assert w.future_fault is scan
        assert w.label is truth[(w.node, w.t)]


@pytest.mark.parametrize("seed", range(3))
def test_learns_precursor_pattern(seed):
    pos, neg = E.train_precursor(seed)
    assert pos.mean() > 0.8
    assert neg.mean() < 0.2


def test_with_params_keeps_threshold():
    m = PredictorModel.zeros(5, 2, 2, 2)
    m2 = PredictorModel(m.lstm, m.head, threshold=0.7).with_params(m.params)
    assert m2.threshold == 0.7

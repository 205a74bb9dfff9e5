"""Failure prediction: an LSTM over the metric window plus the log vector,
followed by a small dense head with a sigmoid output estimating the
probability that some fault is active within the next ``k`` ticks.

Trained with mean squared error on the 0/1 target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import (
    LstmCellParams,
    ShapeError,
    dense_backward,
    dense_forward,
    init_uniform,
    lstm_backward,
    lstm_forward,
)


@dataclass(frozen=True)
class PredictorModel:
    lstm: LstmCellParams
    head: dict  # W0, b0 (tanh) -> W1, b1 (sigmoid, 1 unit)
    threshold: float = 0.5

    @classmethod
    def init(cls, rng, input_dim: int = 5, hidden: int = 32, text_dim: int = 32, head_hidden: int = 16) -> "PredictorModel":
        lstm = LstmCellParams.init(rng, input_dim, hidden)
        fan = hidden + text_dim
        head = {
            "W0": init_uniform(rng, (head_hidden, fan), fan),
            "b0": init_uniform(rng, (head_hidden,), fan),
            "W1": init_uniform(rng, (1, head_hidden), head_hidden),
            "b1": init_uniform(rng, (1,), head_hidden),
        }
        return cls(lstm, head)

    @classmethod
    def zeros(cls, input_dim: int = 5, hidden: int = 32, text_dim: int = 32, head_hidden: int = 16) -> "PredictorModel":
        head = {
            "W0": np.zeros((head_hidden, hidden + text_dim)),
            "b0": np.zeros(head_hidden),
            "W1": np.zeros((1, head_hidden)),
            "b1": np.zeros(1),
        }
        return cls(LstmCellParams.zeros(input_dim, hidden), head)

    @property
    def params(self) -> dict[str, np.ndarray]:
        p = {f"lstm.{k}": v for k, v in self.lstm.as_dict().items()}
        p.update({f"head.{k}": v for k, v in self.head.items()})
        return p

    def with_params(self, params) -> "PredictorModel":
        lstm = LstmCellParams(params["lstm.W_x"], params["lstm.W_h"], params["lstm.b_h"])
        head = {k[5:]: v for k, v in params.items() if k.startswith("head.")}
        return PredictorModel(lstm, head, self.threshold)


def _forward(model: PredictorModel, X, E):
    X = np.asarray(X, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if X.ndim != 3 or X.shape[-1] != model.lstm.input_dim:
        raise ShapeError(f"window batch {X.shape} does not match predictor input dim {model.lstm.input_dim}")
    fan = model.head["W0"].shape[1]
    if model.lstm.hidden + E.shape[-1] != fan:
        raise ShapeError(f"head expects {fan} inputs, got {model.lstm.hidden} + {E.shape[-1]}")
    h, cache = lstm_forward(model.lstm, X)
    feats = np.concatenate([h, E], axis=1)
    a0 = dense_forward(model.head["W0"], model.head["b0"], feats, "tanh")
    p = dense_forward(model.head["W1"], model.head["b1"], a0, "sigmoid")
    return p[:, 0], (cache, feats, a0, p)


def predict_batch(model: PredictorModel, X, E) -> np.ndarray:
    return _forward(model, X, E)[0]


def predict_failure(model: PredictorModel, window) -> float:
    return float(predict_batch(model, window.x_seq[None], window.e_text[None])[0])


def mse(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("empty batch")
    if y.shape != y_hat.shape:
        raise ShapeError(f"{y.shape} targets vs {y_hat.shape} predictions")
    return float(np.mean((y - y_hat) ** 2))


def dnn_loss_grad(model: PredictorModel, X, E, y):
    """MSE between targets and predicted probabilities, with gradients for
    every predictor parameter (keys as in ``model.params``)."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("empty batch")
    p, (cache, feats, a0, out) = _forward(model, X, E)
    n = y.size
    loss = float(np.mean((y - p) ** 2))
    dp = (2.0 / n) * (p - y)[:, None]
    g = {}
    g["head.W1"], g["head.b1"], da0 = dense_backward(model.head["W1"], a0, out, dp, "sigmoid")
    g["head.W0"], g["head.b0"], dfeats = dense_backward(model.head["W0"], feats, a0, da0, "tanh")
    lg, _ = lstm_backward(model.lstm, cache, dfeats[:, : model.lstm.hidden])
    g.update({f"lstm.{k}": v for k, v in lg.items()})
    return loss, {k: g[k] for k in model.params}


def dnn_loss(model: PredictorModel, X, E, y) -> float:
    return dnn_loss_grad(model, X, E, y)[0]

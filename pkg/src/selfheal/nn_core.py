"""Dense and LSTM kernels with hand-written backward passes, SGD, and a
central-difference gradient checker.

Tensors are plain float64 numpy arrays. Every layer function accepts either a
single vector ``(in,)`` or a batch ``(batch, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

ACTIVATIONS = ("identity", "sigmoid", "tanh", "relu")


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def sigmoid(z):
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(z, dtype=np.float64))


def activate(z, activation: str):
    if activation == "identity":
        return z
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "tanh":
        return np.tanh(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {activation!r}")


def activation_grad(out, activation: str):
    """Derivative of the activation expressed through its output."""
    if activation == "identity":
        return np.ones_like(out)
    if activation == "sigmoid":
        return out * (1.0 - out)
    if activation == "tanh":
        return 1.0 - out * out
    if activation == "relu":
        return (out > 0).astype(np.float64)
    raise ValueError(f"unknown activation {activation!r}")


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _check_dense(W, b, x):
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise ShapeError(f"weight {W.shape} and bias {b.shape} disagree")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} != layer input dim {W.shape[1]}")


def dense_forward(W, b, x, activation: str = "identity") -> np.ndarray:
    W, b, x = (np.asarray(a, dtype=np.float64) for a in (W, b, x))
    _check_dense(W, b, x)
    return activate(x @ W.T + b, activation)


def dense_backward(W, x, out, grad_out, activation: str = "identity"):
    """Return ``(dW, db, dx)`` for ``out = activation(x @ W.T + b)``.

    Batched inputs have their parameter gradients summed over the batch.
    """
    dz = grad_out * activation_grad(out, activation)
    if x.ndim == 1:
        dW = np.outer(dz, x)
        db = dz.copy()
    else:
        dW = dz.T @ x
        db = dz.sum(axis=0)
    dx = dz @ W
    return dW, db, dx


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LstmCellParams:
    """Gate rows are stacked in the order (input, forget, cell, output)."""

    W_x: np.ndarray
    W_h: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        four_h = self.b_h.shape[0]
        if four_h % 4 or self.W_x.shape[0] != four_h or self.W_h.shape != (four_h, four_h // 4):
            raise ShapeError(
                f"inconsistent LSTM shapes W_x={self.W_x.shape} W_h={self.W_h.shape} b_h={self.b_h.shape}"
            )

    @property
    def hidden(self) -> int:
        return self.b_h.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.W_x.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden: int) -> "LstmCellParams":
        fan_in = input_dim + hidden
        return cls(
            W_x=init_uniform(rng, (4 * hidden, input_dim), fan_in),
            W_h=init_uniform(rng, (4 * hidden, hidden), fan_in),
            b_h=init_uniform(rng, (4 * hidden,), fan_in),
        )

    @classmethod
    def zeros(cls, input_dim: int, hidden: int) -> "LstmCellParams":
        return cls(
            np.zeros((4 * hidden, input_dim)), np.zeros((4 * hidden, hidden)), np.zeros(4 * hidden)
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"W_x": self.W_x, "W_h": self.W_h, "b_h": self.b_h}


@dataclass(frozen=True)
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape), np.zeros(shape))


def _gate_scale(hidden: int) -> np.ndarray:
    s = np.full(4 * hidden, 0.5)
    s[2 * hidden : 3 * hidden] = 1.0
    return s


def _lstm_gates(params: LstmCellParams, h_prev, x_t):
    z = x_t @ params.W_x.T + h_prev @ params.W_h.T + params.b_h
    H = params.hidden
    # sigmoid(z) = 0.5 + 0.5 tanh(z/2): one tanh call covers all four gates
    a = np.tanh(z * _gate_scale(H))
    i = 0.5 + 0.5 * a[..., :H]
    f = 0.5 + 0.5 * a[..., H : 2 * H]
    g = a[..., 2 * H : 3 * H]
    o = 0.5 + 0.5 * a[..., 3 * H :]
    return i, f, g, o


def lstm_step(params: LstmCellParams, state: LstmState, x_t) -> LstmState:
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != params.input_dim:
        raise ShapeError(f"x_t dim {x_t.shape[-1]} != LSTM input dim {params.input_dim}")
    if state.h.shape != state.c.shape or state.h.shape[-1] != params.hidden:
        raise ShapeError(f"state dims {state.h.shape}/{state.c.shape} != hidden {params.hidden}")
    i, f, g, o = _lstm_gates(params, state.h, x_t)
    c = f * state.c + i * g
    return LstmState(h=o * np.tanh(c), c=c)


def lstm_forward(params: LstmCellParams, xs):
    """Run the cell over ``xs`` of shape ``(n, in)`` or ``(batch, n, in)``
    from a zero state. Returns ``(h_n, cache)``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim not in (2, 3) or xs.shape[-1] != params.input_dim:
        raise ShapeError(f"sequence shape {xs.shape} incompatible with input dim {params.input_dim}")
    single = xs.ndim == 2
    if single:
        xs = xs[None]
    B, n, _ = xs.shape
    H = params.hidden
    scale = _gate_scale(H)
    zx = xs @ params.W_x.T + params.b_h
    W_hT = params.W_h.T
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, n, H))  # h_{t-1} for each step
    cs = np.empty((B, n, H))  # c_{t-1}
    acts = np.empty((B, n, 4 * H))
    tcs = np.empty((B, n, H))
    for t in range(n):
        hs[:, t] = h
        cs[:, t] = c
        a = np.tanh((zx[:, t] + h @ W_hT) * scale)
        a[:, :H] = 0.5 + 0.5 * a[:, :H]
        a[:, H : 2 * H] = 0.5 + 0.5 * a[:, H : 2 * H]
        a[:, 3 * H :] = 0.5 + 0.5 * a[:, 3 * H :]
        acts[:, t] = a
        c = a[:, H : 2 * H] * c + a[:, :H] * a[:, 2 * H : 3 * H]
        tc = np.tanh(c)
        tcs[:, t] = tc
        h = a[:, 3 * H :] * tc
    cache = (single, xs, hs, cs, acts, tcs)
    return (h[0] if single else h), cache


def lstm_backward(params: LstmCellParams, cache, dh_n):
    """Backpropagation through time from a gradient on the final hidden
    state. Returns ``(grads, dxs)`` with ``grads`` keyed like ``as_dict``."""
    single, xs, hs, cs, acts, tcs = cache
    B, n, m = xs.shape
    H = params.hidden
    dh = np.array(dh_n, dtype=np.float64).reshape(B, H)
    dc = np.zeros((B, H))
    dz = np.empty((B, n, 4 * H))
    W_h = params.W_h
    for t in range(n - 1, -1, -1):
        a = acts[:, t]
        i, f, g, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        tc = tcs[:, t]
        dc = dc + dh * o * (1.0 - tc * tc)
        d = dz[:, t]
        d[:, :H] = dc * g * i * (1.0 - i)
        d[:, H : 2 * H] = dc * cs[:, t] * f * (1.0 - f)
        d[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        d[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dh = d @ W_h
        dc = dc * f
    flat = dz.reshape(B * n, 4 * H)
    grads = {
        "W_x": flat.T @ xs.reshape(B * n, m),
        "W_h": flat.T @ hs.reshape(B * n, H),
        "b_h": flat.sum(axis=0),
    }
    dxs = dz @ params.W_x
    return grads, (dxs[0] if single else dxs)


# --------------------------------------------------------------------------
# Optimisation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    eta: float = 0.01
    clip_norm: float = 5.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.clip_norm < 0:
            raise ValueError(f"clip_norm must be nonnegative, got {self.clip_norm}")


def clip_scale(grads, clip_norm: float) -> float:
    """Factor that rescales ``grads`` to global L2 norm ``clip_norm``."""
    total = 0.0
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        total += float(np.sum(np.square(g)))
    norm = np.sqrt(total)
    if clip_norm > 0 and norm > clip_norm:
        return clip_norm / norm
    return 1.0


def sgd_step(theta, grad, cfg: SgdConfig) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape:
        raise ShapeError(f"theta {theta.shape} and grad {grad.shape} differ")
    scale = clip_scale([grad], cfg.clip_norm)
    return theta - cfg.eta * scale * grad


def sgd_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], cfg: SgdConfig):
    """Apply one SGD step to a named parameter group, clipping by the norm
    of the whole group. Returns a new dict."""
    scale = clip_scale([grads[k] for k in params], cfg.clip_norm)
    return {k: params[k] - cfg.eta * scale * grads[k] for k in params}


def grad_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta,
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Largest element-wise relative error between the analytic gradient
    returned by ``loss_fn`` and a central difference.

    ``loss_fn(theta)`` must return ``(loss, grad)``. The relative error of each
    entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps entries whose
    true gradient is ~0 from dividing roundoff by roundoff.
    """
    if not 1e-8 < eps < 1e-3:
        raise ValueError(f"eps must lie in (1e-8, 1e-3), got {eps}")
    theta = np.array(theta, dtype=np.float64)
    value, analytic = loss_fn(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise NumericError("loss or gradient is not finite")
    if analytic.shape != theta.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != theta shape {theta.shape}")
    numeric = np.empty_like(theta)
    flat = theta.reshape(-1)
    num_flat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = loss_fn(theta.copy())[0]
        flat[k] = orig - eps
        down = loss_fn(theta.copy())[0]
        flat[k] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("loss is not finite under perturbation")
        num_flat[k] = (up - down) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if theta.size else 0.0


def pack(params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Flatten a named parameter dict into one vector (insertion order)."""
    return np.concatenate([np.ravel(v) for v in params.values()]) if params else np.zeros(0)


def unpack(vec: np.ndarray, like: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for k, v in like.items():
        size = int(np.size(v))
        out[k] = np.asarray(vec[pos : pos + size], dtype=np.float64).reshape(np.shape(v))
        pos += size
    if pos != len(vec):
        raise ShapeError(f"vector length {len(vec)} != parameter count {pos}")
    return out

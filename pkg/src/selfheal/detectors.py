"""Fault classification and anomaly scoring.

* linear one-vs-rest SVM trained through its hinge-loss form,
* a dense autoencoder scored by reconstruction error,
* a Gaussian VAE scored by its negative ELBO,
* a fusion rule turning the two anomaly scores into one alarm flag.

Class index 0 of the SVM means "no fault"; index ``c + 1`` is ``FaultClass(c)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .cluster_sim import FaultClass
from .features import encode_batch
from .nn_core import (
    LstmCellParams,
    NumericError,
    ShapeError,
    dense_backward,
    dense_forward,
    init_uniform,
)

N_CLASSES = len(FaultClass) + 1


class CalibrationError(RuntimeError):
    pass


def class_index(fault: FaultClass | None) -> int:
    return 0 if fault is None else int(fault) + 1


def class_of(index: int) -> FaultClass | None:
    return None if index == 0 else FaultClass(index - 1)


def class_name(index: int) -> str:
    return "none" if index == 0 else FaultClass(index - 1).name


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _check_finite(x) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input")


# --------------------------------------------------------------------------
# SVM
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SvmModel:
    W: np.ndarray  # (classes, dim)
    b: np.ndarray  # (classes,)
    C: float = 1.0

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")

    @classmethod
    def zeros(cls, dim: int, n_classes: int = N_CLASSES, C: float = 1.0) -> "SvmModel":
        return cls(np.zeros((n_classes, dim)), np.zeros(n_classes), C)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def with_params(self, params) -> "SvmModel":
        return replace(self, W=params["W"], b=params["b"])


def hinge_loss(w, b: float, X, y, C: float = 1.0):
    """Binary soft-margin objective ``0.5|w|^2 + C sum max(0, 1 - y(w.x + b))``
    with ``y`` in {-1, +1}. Returns ``(loss, dw, db, dX)`` (subgradients)."""
    w = np.asarray(w, dtype=np.float64)
    X = _as_batch(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    margins = y * (X @ w + b)
    active = margins < 1.0
    loss = 0.5 * float(w @ w) + C * float(np.sum(np.maximum(0.0, 1.0 - margins)))
    coef = np.where(active, -C * y, 0.0)
    dw = w + coef @ X
    db = float(coef.sum())
    dX = np.outer(coef, w)
    return loss, dw, db, dX


def _ovr_targets(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    Y = -np.ones((labels.size, n_classes))
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def svm_loss_grad(model: SvmModel, X, labels):
    """One-vs-rest sum of binary hinge objectives. Returns
    ``(loss, {"W", "b"} grads, dX)``."""
    X = _as_batch(X)
    if X.shape[1] != model.W.shape[1]:
        raise ShapeError(f"feature dim {X.shape[1]} != SVM dim {model.W.shape[1]}")
    Y = _ovr_targets(labels, model.W.shape[0])
    margins = Y * (X @ model.W.T + model.b)
    loss = 0.5 * float(np.sum(model.W * model.W)) + model.C * float(np.sum(np.maximum(0.0, 1.0 - margins)))
    coef = np.where(margins < 1.0, -model.C * Y, 0.0)  # (B, K)
    grads = {"W": model.W + coef.T @ X, "b": coef.sum(axis=0)}
    return loss, grads, coef @ model.W


def svm_loss(model: SvmModel, X, labels) -> float:
    return svm_loss_grad(model, X, labels)[0]


def svm_scores(model: SvmModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.W.shape[1]:
        raise ShapeError(f"feature dim {X.shape[-1]} != SVM dim {model.W.shape[1]}")
    return X @ model.W.T + model.b


def svm_classify(model: SvmModel, x) -> tuple[int, np.ndarray]:
    """Winning class index (lowest index on ties) and the per-class scores."""
    scores = svm_scores(model, x)
    return int(np.argmax(scores)), scores


def fit_svm(model: SvmModel, X, labels, epochs: int = 200, eta: float = 0.01, seed: int = 0, batch: int = 8) -> SvmModel:
    """Plain minibatch subgradient descent on a fixed feature matrix."""
    rng = np.random.default_rng(seed)
    X = _as_batch(X)
    labels = np.asarray(labels)
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for s in range(0, len(X), batch):
            idx = order[s : s + batch]
            _, g, _ = svm_loss_grad(model, X[idx], labels[idx])
            model = model.with_params({k: v - eta * g[k] for k, v in model.params.items()})
    return model


# --------------------------------------------------------------------------
# Autoencoder
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AeModel:
    """Dense autoencoder; ``params`` holds ``W0, b0, W1, b1, ...``."""

    params: dict
    activations: tuple[str, ...]
    lam: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")

    @classmethod
    def init(cls, rng, dim: int, hidden=(16, 8, 16), lam: float = 1e-4) -> "AeModel":
        sizes = (dim, *hidden, dim)
        params = {}
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"W{i}"] = init_uniform(rng, (fo, fi), fi)
            params[f"b{i}"] = init_uniform(rng, (fo,), fi)
        acts = ("tanh",) * len(hidden) + ("identity",)
        return cls(params, acts, lam)

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    @property
    def input_dim(self) -> int:
        return self.params["W0"].shape[1]

    def with_params(self, params) -> "AeModel":
        return replace(self, params=dict(params))


def _ae_forward(model: AeModel, X):
    acts = [X]
    for i, act in enumerate(model.activations):
        acts.append(dense_forward(model.params[f"W{i}"], model.params[f"b{i}"], acts[-1], act))
    return acts


def ae_reconstruct(model: AeModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return _ae_forward(model, x)[-1]


def ae_score(model: AeModel, x):
    """Squared reconstruction error; a scalar for one sample, else per row."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    if x.shape[-1] != model.input_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != autoencoder dim {model.input_dim}")
    r = x - ae_reconstruct(model, x)
    return np.sum(r * r, axis=-1)


def weight_penalty(model: AeModel) -> float:
    return float(sum(np.sum(model.params[f"W{i}"] ** 2) for i in range(model.n_layers)))


def ae_loss_grad(model: AeModel, X):
    """Batch-mean reconstruction error plus ``lam * sum |W|^2``.
    Returns ``(loss, grads, dX)``."""
    X = _as_batch(X)
    _check_finite(X)
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"input dim {X.shape[1]} != autoencoder dim {model.input_dim}")
    B = X.shape[0]
    acts = _ae_forward(model, X)
    resid = acts[-1] - X
    loss = float(np.sum(resid * resid)) / B + model.lam * weight_penalty(model)
    grad_out = 2.0 * resid / B
    grads = {}
    for i in reversed(range(model.n_layers)):
        W = model.params[f"W{i}"]
        dW, db, grad_out = dense_backward(W, acts[i], acts[i + 1], grad_out, model.activations[i])
        grads[f"W{i}"] = dW + 2.0 * model.lam * W
        grads[f"b{i}"] = db
    dX = grad_out - 2.0 * resid / B
    return loss, {k: grads[k] for k in model.params}, dX


def ae_loss(model: AeModel, x) -> float:
    return ae_loss_grad(model, x)[0]


# --------------------------------------------------------------------------
# Variational autoencoder
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VaeModel:
    """Encoder ``enc`` (tanh) feeding linear ``mu`` and ``logvar`` heads;
    decoder ``dec`` (tanh) then linear ``out``."""

    params: dict

    @classmethod
    def init(cls, rng, dim: int, latent: int = 8, hidden: int = 16) -> "VaeModel":
        if latent < 1:
            raise ValueError("latent dim must be >= 1")
        shapes = {
            "enc": (hidden, dim),
            "mu": (latent, hidden),
            "logvar": (latent, hidden),
            "dec": (hidden, latent),
            "out": (dim, hidden),
        }
        params = {}
        for name, (fo, fi) in shapes.items():
            params[f"W_{name}"] = init_uniform(rng, (fo, fi), fi)
            params[f"b_{name}"] = init_uniform(rng, (fo,), fi)
        return cls(params)

    @property
    def latent(self) -> int:
        return self.params["W_mu"].shape[0]

    @property
    def input_dim(self) -> int:
        return self.params["W_enc"].shape[1]

    def with_params(self, params) -> "VaeModel":
        return replace(self, params=dict(params))


def kl_standard_normal(mu, logvar):
    """Closed-form KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    # exp(v) - 1 - v >= 0 exactly; clamp the rounding error near v = 0
    var_term = np.maximum(np.expm1(logvar) - logvar, 0.0)
    return 0.5 * np.sum(mu * mu + var_term, axis=-1)


def _vae_forward(model: VaeModel, X, noise):
    p = model.params
    h = dense_forward(p["W_enc"], p["b_enc"], X, "tanh")
    mu = dense_forward(p["W_mu"], p["b_mu"], h)
    logvar = dense_forward(p["W_logvar"], p["b_logvar"], h)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * noise
    d = dense_forward(p["W_dec"], p["b_dec"], z, "tanh")
    x_hat = dense_forward(p["W_out"], p["b_out"], d)
    return h, mu, logvar, sigma, z, d, x_hat


def _check_vae_inputs(model, X, noise):
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"input dim {X.shape[1]} != VAE dim {model.input_dim}")
    if noise.shape[-1] != model.latent:
        raise ShapeError(f"noise dim {noise.shape[-1]} != latent dim {model.latent}")
    _check_finite(X)
    _check_finite(noise)


def vae_loss_grad(model: VaeModel, X, noise):
    """Batch-mean negative ELBO with one reparameterised sample per row,
    ``0.5 |x - x_hat|^2 + KL``. ``noise`` is ``(latent,)`` or ``(B, latent)``.
    Returns ``(loss, grads, dX)``."""
    X = _as_batch(X)
    noise = np.asarray(noise, dtype=np.float64)
    _check_vae_inputs(model, X, noise)
    B = X.shape[0]
    p = model.params
    h, mu, logvar, sigma, z, d, x_hat = _vae_forward(model, X, noise)
    resid = x_hat - X
    kl = kl_standard_normal(mu, logvar)
    loss = float(0.5 * np.sum(resid * resid) + np.sum(kl)) / B
    if not np.isfinite(loss):
        raise NumericError("non-finite VAE loss")

    g = {}
    g["W_out"], g["b_out"], dd = dense_backward(p["W_out"], d, x_hat, resid / B)
    g["W_dec"], g["b_dec"], dz = dense_backward(p["W_dec"], z, d, dd, "tanh")
    dmu = dz + mu / B
    dlogvar = dz * noise * 0.5 * sigma + 0.5 * (np.exp(logvar) - 1.0) / B
    g["W_mu"], g["b_mu"], dh_mu = dense_backward(p["W_mu"], h, mu, dmu)
    g["W_logvar"], g["b_logvar"], dh_lv = dense_backward(p["W_logvar"], h, logvar, dlogvar)
    g["W_enc"], g["b_enc"], dX = dense_backward(p["W_enc"], X, h, dh_mu + dh_lv, "tanh")
    dX = dX - resid / B
    return loss, {k: g[k] for k in p}, dX


def vae_loss(model: VaeModel, x, noise) -> float:
    return vae_loss_grad(model, x, noise)[0]


def vae_score(model: VaeModel, x):
    """Negative ELBO at the posterior mean (noise fixed at zero)."""
    x = np.asarray(x, dtype=np.float64)
    X = _as_batch(x)
    _check_vae_inputs(model, X, np.zeros(model.latent))
    _, mu, logvar, _, _, _, x_hat = _vae_forward(model, X, np.zeros(model.latent))
    r = x_hat - X
    s = 0.5 * np.sum(r * r, axis=1) + kl_standard_normal(mu, logvar)
    return s[0] if x.ndim == 1 else s


# --------------------------------------------------------------------------
# Fusion
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FusionConfig:
    """Raw scores ``r`` are calibrated as ``r / (r + s)`` where ``s`` is the
    quantile-``q`` raw score on healthy training windows, so the typical
    healthy window lands near 0.5 and gross anomalies approach 1."""

    w_ae: float = 0.5
    w_vae: float = 0.5
    threshold: float = 0.5
    q: float = 0.5
    scale_ae: float | None = None
    scale_vae: float | None = None

    def __post_init__(self):
        if self.w_ae < 0 or self.w_vae < 0 or self.w_ae + self.w_vae <= 0:
            raise ValueError("fusion weights must be nonnegative and not both zero")
        total = self.w_ae + self.w_vae
        object.__setattr__(self, "w_ae", self.w_ae / total)
        object.__setattr__(self, "w_vae", self.w_vae / total)
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if not 0.0 < self.q < 1.0:
            raise ValueError("calibration quantile must lie in (0, 1)")

    @property
    def calibrated(self) -> bool:
        return self.scale_ae is not None and self.scale_vae is not None


def calibrate_score(raw, scale: float):
    raw = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    return np.clip(raw / (raw + scale), 0.0, 1.0)


def calibrate(
    cfg: FusionConfig, ae_train, vae_train, ae_heldout=None, vae_heldout=None, threshold_quantile: float = 0.99
) -> FusionConfig:
    """Fix the per-detector scales on healthy training scores and the alarm
    threshold at ``threshold_quantile`` of fused healthy held-out scores."""
    ae_train = np.asarray(ae_train, dtype=np.float64)
    vae_train = np.asarray(vae_train, dtype=np.float64)
    if ae_train.size == 0 or vae_train.size == 0:
        raise CalibrationError("no healthy scores to calibrate on")
    tiny = np.finfo(np.float64).tiny
    cfg = replace(
        cfg,
        scale_ae=max(float(np.quantile(ae_train, cfg.q)), tiny),
        scale_vae=max(float(np.quantile(vae_train, cfg.q)), tiny),
    )
    if ae_heldout is None:
        ae_heldout, vae_heldout = ae_train, vae_train
    fused, _ = fuse_and_detect(cfg, ae_heldout, vae_heldout)
    tau = float(np.quantile(np.atleast_1d(fused), threshold_quantile))
    return replace(cfg, threshold=min(max(tau, 0.0), 1.0))


def fuse_and_detect(cfg: FusionConfig, ae_score, vae_score):
    if not cfg.calibrated:
        raise CalibrationError("fusion has not been calibrated")
    fused = cfg.w_ae * calibrate_score(ae_score, cfg.scale_ae) + cfg.w_vae * calibrate_score(vae_score, cfg.scale_vae)
    fused = np.clip(fused, 0.0, 1.0)
    flag = fused > cfg.threshold
    if np.ndim(fused) == 0:
        return float(fused), bool(flag)
    return fused, flag


# --------------------------------------------------------------------------
# Full stack
# --------------------------------------------------------------------------


class Scores(NamedTuple):
    svm_class: np.ndarray
    ae: np.ndarray
    vae: np.ndarray
    fused: np.ndarray
    flag: np.ndarray


@dataclass(frozen=True)
class DetectorStack:
    encoder: LstmCellParams
    svm: SvmModel
    ae: AeModel
    vae: VaeModel
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def features(self, X, E) -> np.ndarray:
        return encode_batch(self.encoder, X, E)[0]

    def raw_scores(self, X, E):
        F = self.features(X, E)
        return svm_scores(self.svm, F), ae_score(self.ae, F), vae_score(self.vae, F)

    def score(self, X, E) -> Scores:
        svm_s, ae_s, vae_s = self.raw_scores(X, E)
        fused, flag = fuse_and_detect(self.fusion, ae_s, vae_s)
        return Scores(np.argmax(svm_s, axis=1), ae_s, vae_s, np.atleast_1d(fused), np.atleast_1d(flag))

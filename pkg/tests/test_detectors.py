import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import _experiments as E
from selfheal.detectors import (
    AeModel,
    CalibrationError,
    FusionConfig,
    SvmModel,
    VaeModel,
    ae_loss,
    ae_loss_grad,
    ae_score,
    calibrate,
    fit_svm,
    fuse_and_detect,
    hinge_loss,
    kl_standard_normal,
    svm_classify,
    svm_loss,
    svm_loss_grad,
    vae_loss,
    vae_loss_grad,
)
from selfheal.nn_core import NumericError, ShapeError, grad_check, pack, unpack

# svm -----------------------------------------------------------------------


def test_hinge_zero_model_one_sample():
    loss, *_ = hinge_loss(np.zeros(2), 0.0, np.array([[3.0, 1.0]]), [1], C=1.0)
    assert loss == 1.0


def test_hinge_large_margin_only_regulariser():
    loss, *_ = hinge_loss(np.array([2.0, 0.0]), 0.0, np.array([[1.0, 0.0]]), [1], C=1.0)
    assert loss == 2.0


def test_svm_loss_matches_per_sample_sum():
    rng = np.random.default_rng(0)
    model = SvmModel(rng.normal(size=(6, 4)), rng.normal(size=6), C=0.7)
    X, y = rng.normal(size=(10, 4)), rng.integers(6, size=10)
    want = 0.5 * np.sum(model.W**2)
    for x, c in zip(X, y):
        for k in range(6):
            t = 1.0 if k == c else -1.0
            want += 0.7 * max(0.0, 1.0 - t * (model.W[k] @ x + model.b[k]))
    assert abs(svm_loss(model, X, y) - want) <= 1e-12


def test_svm_empty_batch_and_bad_labels():
    m = SvmModel.zeros(3)
    with pytest.raises(ValueError):
        svm_loss(m, np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        svm_loss(m, np.zeros((1, 3)), [9])


@pytest.mark.parametrize("seed", range(10))
def test_svm_grad_check(seed):
    rng = np.random.default_rng(seed)
    model = SvmModel(rng.normal(size=(6, 5)), rng.normal(size=6), C=1.0)
    X, y = rng.normal(size=(8, 5)), rng.integers(6, size=8)

    def loss(theta):
        m = model.with_params(unpack(theta, model.params))
        val, g, _ = svm_loss_grad(m, X, y)
        return val, pack(g)

    # hinge kinks have measure zero; random points are almost surely smooth
    assert grad_check(loss, pack(model.params)) <= 1e-4


def test_svm_zero_model_tie_breaks_to_zero():
    idx, scores = svm_classify(SvmModel.zeros(4), np.ones(4))
    assert idx == 0 and np.all(scores == 0)


def test_svm_shape_error():
    with pytest.raises(ShapeError):
        svm_classify(SvmModel.zeros(4), np.ones(3))


def test_svm_separable_toy_set():
    rng = np.random.default_rng(1)
    X = np.concatenate([rng.normal(size=(10, 2)) + [3, 3], rng.normal(size=(10, 2)) - [3, 3]])
    y = np.array([1] * 10 + [2] * 10)
    model = fit_svm(SvmModel.zeros(2, n_classes=3), X, y, epochs=100, eta=0.01)
    assert all(svm_classify(model, x)[0] == c for x, c in zip(X, y))


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_svm_argmax_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    m = SvmModel(rng.normal(size=(6, 3)), rng.normal(size=6))
    x = rng.normal(size=3)
    scaled = SvmModel(m.W * k, m.b * k)
    assert svm_classify(m, x)[0] == svm_classify(scaled, x)[0]


# autoencoder ---------------------------------------------------------------


def zero_ae(dim=2, lam=0.0):
    m = AeModel.init(np.random.default_rng(0), dim, lam=lam)
    return m.with_params({k: np.zeros_like(v) for k, v in m.params.items()})


def test_ae_loss_unit_error():
    assert ae_loss(zero_ae(), np.array([1.0, 0.0])) == 1.0


def test_ae_perfect_reconstruction_zero_loss():
    # identity output layer on zero input reconstructs exactly
    assert ae_loss(zero_ae(3), np.zeros(3)) == 0.0


def test_ae_loss_includes_weight_penalty():
    rng = np.random.default_rng(2)
    m = AeModel.init(rng, 4, lam=0.1)
    x = rng.normal(size=4)
    pen = sum(np.sum(m.params[f"W{i}"] ** 2) for i in range(4))
    assert ae_loss(m, x) == pytest.approx(ae_score(m, x) + 0.1 * pen, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_ae_grad_check(seed):
    rng = np.random.default_rng(seed)
    model = AeModel.init(rng, 5, lam=0.01)
    X = rng.normal(size=(1, 5)) if seed == 0 else rng.normal(size=(4, 5))

    def loss(theta):
        m = model.with_params(unpack(theta, model.params))
        val, g, _ = ae_loss_grad(m, X)
        return val, pack(g)

    assert grad_check(loss, pack(model.params)) <= 1e-4


def test_ae_nonfinite_input():
    with pytest.raises(NumericError):
        ae_score(zero_ae(), np.array([np.nan, 0.0]))


@pytest.mark.parametrize("seed", range(5))
def test_ae_spike_separation(seed):
    median, spikes = E.ae_spike_check(seed)
    assert np.all(spikes > median)


# vae -----------------------------------------------------------------------


def test_kl_prior_match_is_zero():
    assert kl_standard_normal(np.zeros(3), np.zeros(3)) == 0.0


def test_kl_unit_mean():
    assert kl_standard_normal(np.array([1.0]), np.array([0.0])) == 0.5


def test_kl_tiny_logvar_not_negative():
    assert kl_standard_normal(np.zeros(1), np.array([2.2250738585072014e-308])) == 0.0
    assert kl_standard_normal(np.zeros(2), np.array([1e-9, -1e-9])) >= 0.0


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=6))
def test_kl_nonnegative(pairs):
    mu, lv = np.array(pairs).T
    assert kl_standard_normal(mu, lv) >= 0.0


@pytest.mark.parametrize("seed", range(10))
def test_vae_grad_check(seed):
    rng = np.random.default_rng(seed)
    model = VaeModel.init(rng, 5, latent=3, hidden=6)
    X = rng.normal(size=(3, 5))
    noise = rng.normal(size=(3, 3))

    def loss(theta):
        m = model.with_params(unpack(theta, model.params))
        val, g, _ = vae_loss_grad(m, X, noise)
        return val, pack(g)

    assert grad_check(loss, pack(model.params)) <= 1e-4


def test_vae_input_gradient():
    rng = np.random.default_rng(3)
    model = VaeModel.init(rng, 4, latent=2, hidden=5)
    X0, noise = rng.normal(size=(2, 4)), rng.normal(size=(2, 2))

    def loss(theta):
        val, _, dX = vae_loss_grad(model, theta.reshape(X0.shape), noise)
        return val, dX.ravel()

    assert grad_check(loss, X0.ravel()) <= 1e-4


def test_vae_loss_nonnegative_and_noise_shape():
    rng = np.random.default_rng(0)
    m = VaeModel.init(rng, 4, latent=2)
    assert vae_loss(m, rng.normal(size=4), rng.normal(size=2)) >= 0
    with pytest.raises(ShapeError):
        vae_loss(m, rng.normal(size=4), rng.normal(size=3))


@pytest.mark.parametrize("seed", range(5))
def test_vae_toy_elbo_decreases(seed):
    curve, _ = E.vae_toy_curve(seed)
    sm = E.smooth(curve)
    assert sm[-1] < sm[0]


# fusion --------------------------------------------------------------------


def unit_cfg(tau=0.5):
    # scale 1: raw r maps to r / (r + 1)
    return FusionConfig(threshold=tau, scale_ae=1.0, scale_vae=1.0)


def test_fusion_arithmetic():
    # raw 0.25 -> 0.2, raw 1.5 -> 0.6
    fused, flag = fuse_and_detect(unit_cfg(), 0.25, 1.5)
    assert fused == pytest.approx(0.4, abs=1e-15) and flag is False


def test_fusion_zero_scores():
    assert fuse_and_detect(unit_cfg(), 0.0, 0.0) == (0.0, False)


def test_fusion_requires_calibration():
    with pytest.raises(CalibrationError):
        fuse_and_detect(FusionConfig(), 0.1, 0.1)


def test_fusion_weights_normalized():
    cfg = FusionConfig(w_ae=3.0, w_vae=1.0)
    assert (cfg.w_ae, cfg.w_vae) == (0.75, 0.25)


@settings(max_examples=100)
@given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1e3))
def test_fusion_monotone(a, b, extra):
    cfg = unit_cfg()
    f0, g0 = fuse_and_detect(cfg, a, b)
    f1, g1 = fuse_and_detect(cfg, a + extra, b)
    f2, g2 = fuse_and_detect(cfg, a, b + extra)
    assert f1 >= f0 and f2 >= f0 and 0.0 <= f0 <= 1.0
    assert g1 >= g0 and g2 >= g0


def test_calibrate_threshold_quantile():
    rng = np.random.default_rng(0)
    ae, vae = rng.random(1000), rng.random(1000)
    cfg = calibrate(FusionConfig(), ae, vae, threshold_quantile=0.99)
    fused, flag = fuse_and_detect(cfg, ae, vae)
    assert cfg.scale_ae == pytest.approx(np.median(ae))
    assert abs(flag.mean() - 0.01) <= 0.002
    with pytest.raises(CalibrationError):
        calibrate(FusionConfig(), [], [])

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfheal.cluster_sim import (
    FaultClass,
    Label,
    SimConfig,
    TEMPLATES,
    TelemetrySample,
    generate_dataset,
    make_record,
)
from selfheal.features import (
    DegenerateRangeError,
    FeatureWindow,
    OrderError,
    embed_text,
    encode_backward,
    encode_batch,
    encode_sequence,
    make_windows,
    normalize_apply,
    normalize_fit,
    stack_windows,
)
from selfheal.nn_core import LstmCellParams, LstmState, ShapeError, grad_check, lstm_step, pack, unpack


def series(T, node=0, m=5):
    return [TelemetrySample(t, node, np.full(m, t / 10.0)) for t in range(T)]


# normalizer ----------------------------------------------------------------


def test_normalize_midpoint_and_clip():
    norm = normalize_fit(np.array([[0.0], [10.0]]))
    assert normalize_apply(norm, np.array([5.0]))[0] == 0.5
    assert normalize_apply(norm, np.array([20.0]))[0] == 1.0
    assert normalize_apply(norm, np.array([0.0]))[0] == 0.0


def test_normalize_degenerate_column():
    with pytest.raises(DegenerateRangeError):
        normalize_fit(np.array([[1.0, 0.0], [1.0, 2.0]]))
    with pytest.raises(DegenerateRangeError):
        normalize_fit(np.array([[1.0, 2.0]]))


def test_normalize_training_data_in_unit_interval():
    data = generate_dataset(SimConfig(nodes=2, ticks=200, fault_rate=0.05), 1)
    norm = normalize_fit(data.samples)
    rows = np.array([normalize_apply(norm, s).metrics for s in data.samples])
    assert rows.min() == 0.0 and rows.max() == 1.0


# windows -------------------------------------------------------------------


@pytest.mark.parametrize("T,count", [(16, 1), (18, 3), (10, 0)])
def test_window_counts(T, count):
    assert len(make_windows(series(T), 16)) == count


def test_window_offsets_cover_ticks():
    ws = make_windows(series(20), 16)
    for o, w in enumerate(ws):
        assert w.t == o + 15
        assert np.array_equal(w.x_seq[:, 0], np.arange(o, o + 16) / 10.0)


def test_unsorted_stream_rejected():
    s = series(20)
    s[3], s[4] = s[4], s[3]
    with pytest.raises(OrderError):
        make_windows(s, 16)


def test_window_labels_and_future_fault():
    samples = series(30)
    labels = [Label(t, 0, FaultClass.DiskFailure if t >= 22 else None) for t in range(30)]
    ws = {w.t: w for w in make_windows(samples, 16, labels=labels, k=5)}
    assert ws[16].label is None and ws[16].future_fault is False  # (16, 21] all healthy
    assert ws[17].label is None and ws[17].future_fault is True  # 22 in (17, 22]
    assert ws[22].label is FaultClass.DiskFailure


def test_stride():
    assert len(make_windows(series(40), 16, stride=4)) == 7


# text embedding --------------------------------------------------------------


def test_empty_embedding_is_zero():
    assert np.array_equal(embed_text([], 32), np.zeros(32))


def test_embedding_deterministic_and_unit_norm():
    recs = [make_record(0, 0, 5), make_record(0, 0, 1)]
    a, b = embed_text(recs), embed_text(list(recs))
    assert a.tobytes() == b.tobytes()
    assert abs(np.linalg.norm(a) - 1.0) <= 1e-12


@settings(max_examples=30)
@given(st.lists(st.integers(0, len(TEMPLATES) - 1), min_size=1, max_size=10), st.randoms())
def test_embedding_permutation_invariant(tids, rnd):
    recs = [make_record(0, 0, t) for t in tids]
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert np.allclose(embed_text(recs), embed_text(shuffled), atol=1e-12, rtol=0)


def test_template_pairs_have_low_cosine():
    vecs = [embed_text([make_record(0, 0, i)], 32) for i in range(len(TEMPLATES))]
    for i, j in itertools.combinations(range(len(vecs)), 2):
        assert abs(vecs[i] @ vecs[j]) < 0.5, (i, j)


def test_severity_weighting():
    # same tokens, ERROR weight 4 vs INFO weight 1: direction identical after L2
    rec = make_record(0, 0, 5)
    info = rec.__class__(0, 0, "INFO", 5, rec.tokens)
    mix = embed_text([rec, make_record(0, 0, 0)])
    mix_info = embed_text([info, make_record(0, 0, 0)])
    assert not np.allclose(mix, mix_info)
    assert np.allclose(embed_text([rec]), embed_text([info]))


# encoding ------------------------------------------------------------------


def window(n=4, m=5, d=6, seed=0):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=d)
    return FeatureWindow(rng.random((n, m)), e / np.linalg.norm(e))


def test_zero_encoder_passes_text_through():
    w = window()
    out = encode_sequence(LstmCellParams.zeros(5, 3), w)
    assert np.array_equal(out, np.concatenate([np.zeros(3), w.e_text]))


def test_single_step_window():
    rng = np.random.default_rng(5)
    p = LstmCellParams.init(rng, 5, 4)
    w = window(n=1)
    want = lstm_step(p, LstmState.zeros(4), w.x_seq[0]).h
    assert np.max(np.abs(encode_sequence(p, w)[:4] - want)) <= 1e-15


def test_output_dim_and_shape_error():
    p = LstmCellParams.init(np.random.default_rng(0), 5, 7)
    assert encode_sequence(p, window(d=9)).shape == (16,)
    with pytest.raises(ShapeError):
        encode_sequence(p, window(m=4))


@pytest.mark.parametrize("seed", range(3))
def test_downstream_gradient_through_encoder(seed):
    rng = np.random.default_rng(seed)
    p = LstmCellParams.init(rng, 5, 4)
    ws = [window(n=5, seed=seed * 10 + i) for i in range(3)]
    X, E = stack_windows(ws)
    r = rng.normal(size=(3, 10))
    like = p.as_dict()

    def loss(theta):
        q = LstmCellParams(**unpack(theta, like))
        f, cache = encode_batch(q, X, E)
        return 0.5 * float(np.sum((f - r) ** 2)), pack(encode_backward(q, cache, f - r))

    assert grad_check(loss, pack(like)) <= 1e-4

"""Model inputs from raw telemetry and logs.

Metric streams are min-max normalised and cut into sliding windows; the log
lines that fall inside each window are turned into a fixed-size vector by
signed feature hashing; an LSTM summarises the metric window and its final
hidden state is concatenated with the text vector.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .cluster_sim import FaultClass, Label, LogRecord, TelemetrySample
from .nn_core import LstmCellParams, ShapeError, lstm_backward, lstm_forward

SEVERITY_WEIGHT = {"INFO": 1.0, "WARN": 2.0, "ERROR": 4.0}


class DegenerateRangeError(ValueError):
    pass


class OrderError(ValueError):
    pass


@dataclass(frozen=True)
class Normalizer:
    lo: np.ndarray
    hi: np.ndarray

    def apply(self, x) -> np.ndarray:
        return np.clip((np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo), 0.0, 1.0)


def normalize_fit(samples) -> Normalizer:
    """Fit per-metric ranges. ``samples`` is a sequence of TelemetrySample or
    a 2-D array of metric rows."""
    rows = np.array([s.metrics if isinstance(s, TelemetrySample) else s for s in samples], dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    if rows.shape[0] < 2:
        raise DegenerateRangeError("need at least two samples to fit a range")
    lo, hi = rows.min(axis=0), rows.max(axis=0)
    if np.any(hi <= lo):
        bad = np.flatnonzero(hi <= lo).tolist()
        raise DegenerateRangeError(f"constant metric column(s) {bad}")
    return Normalizer(lo, hi)


def normalize_apply(norm: Normalizer, sample):
    if isinstance(sample, TelemetrySample):
        return TelemetrySample(sample.t, sample.node_id, norm.apply(sample.metrics))
    return norm.apply(sample)


# --------------------------------------------------------------------------
# Text embedding
# --------------------------------------------------------------------------


@lru_cache(maxsize=65536)
def _token_slot(token: str, dim: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    h = int.from_bytes(digest, "little")
    return h % dim, (1.0 if (h >> 63) & 1 else -1.0)


@lru_cache(maxsize=4096)
def _record_vector(tokens: tuple[str, ...], dim: int) -> np.ndarray:
    v = np.zeros(dim)
    for tok in tokens:
        slot, sign = _token_slot(tok, dim)
        v[slot] += sign
    v.setflags(write=False)
    return v


def embed_counts(records: Iterable[LogRecord], dim: int = 32) -> np.ndarray:
    """Unnormalised severity-weighted hashed token counts."""
    v = np.zeros(dim)
    for r in records:
        v += SEVERITY_WEIGHT[r.severity] * _record_vector(tuple(r.tokens), dim)
    return v


def embed_text(records: Iterable[LogRecord], dim: int = 32) -> np.ndarray:
    v = embed_counts(records, dim)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


# --------------------------------------------------------------------------
# Windows
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureWindow:
    x_seq: np.ndarray  # (n, m)
    e_text: np.ndarray  # (d_text,)
    label: FaultClass | None = None
    future_fault: bool | None = None
    t: int = 0  # last tick covered
    node: int = 0


def make_windows(
    samples: Sequence[TelemetrySample],
    n: int = 16,
    logs: Sequence[LogRecord] = (),
    labels: Sequence[Label] | None = None,
    k: int = 5,
    embed_dim: int = 32,
    normalizer: Normalizer | None = None,
    stride: int = 1,
) -> list[FeatureWindow]:
    """Sliding windows of ``n`` consecutive ticks per node.

    A node with ``T`` samples yields ``max(0, T - n + 1)`` windows (stride 1).
    With ``labels`` given, ``label`` is the fault active at the last tick and
    ``future_fault`` is whether any fault is active in ``(t, t + k]``.
    """
    if n < 1 or stride < 1:
        raise ValueError("window length and stride must be positive")
    per_node: dict[int, list[TelemetrySample]] = defaultdict(list)
    for s in samples:
        series = per_node[s.node_id]
        if series and s.t <= series[-1].t:
            raise OrderError(f"node {s.node_id}: tick {s.t} follows tick {series[-1].t}")
        series.append(s)

    logs_at: dict[tuple[int, int], list[LogRecord]] = defaultdict(list)
    for r in logs:
        logs_at[(r.node_id, r.t)].append(r)
    fault_at: dict[tuple[int, int], FaultClass | None] = {}
    if labels is not None:
        for lb in labels:
            fault_at[(lb.node_id, lb.t)] = lb.fault

    windows = []
    for node in sorted(per_node):
        series = per_node[node]
        ticks = [s.t for s in series]
        mat = np.array([s.metrics for s in series], dtype=np.float64)
        if normalizer is not None:
            mat = normalizer.apply(mat)
        tick_counts = [embed_counts(logs_at.get((node, t), ()), embed_dim) for t in ticks]
        for o in range(0, len(series) - n + 1, stride):
            last = ticks[o + n - 1]
            counts = np.sum(tick_counts[o : o + n], axis=0)
            norm = np.linalg.norm(counts)
            label = future = None
            if labels is not None:
                label = fault_at.get((node, last))
                future = any(fault_at.get((node, last + j)) is not None for j in range(1, k + 1))
            windows.append(
                FeatureWindow(
                    x_seq=mat[o : o + n],
                    e_text=counts / norm if norm > 0 else counts,
                    label=label,
                    future_fault=future,
                    t=last,
                    node=node,
                )
            )
    return windows


def stack_windows(windows: Sequence[FeatureWindow]):
    """``(X, E)`` arrays of shape ``(B, n, m)`` and ``(B, d_text)``."""
    return np.stack([w.x_seq for w in windows]), np.stack([w.e_text for w in windows])


# --------------------------------------------------------------------------
# Sequence encoding
# --------------------------------------------------------------------------


def encode_batch(encoder: LstmCellParams, X, E):
    """Encode ``X`` ``(B, n, m)`` with text vectors ``E`` ``(B, d)`` into
    ``(B, hidden + d)``. Returns ``(features, cache)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[-1] != encoder.input_dim:
        raise ShapeError(f"window batch {X.shape} does not match encoder input dim {encoder.input_dim}")
    h, cache = lstm_forward(encoder, X)
    return np.concatenate([h, E], axis=1), cache


def encode_backward(encoder: LstmCellParams, cache, d_features) -> dict[str, np.ndarray]:
    """Encoder parameter gradients from a gradient on ``encode_batch``'s
    output (the text half has no parameters)."""
    grads, _ = lstm_backward(encoder, cache, d_features[:, : encoder.hidden])
    return grads


def encode_sequence(encoder: LstmCellParams, window: FeatureWindow) -> np.ndarray:
    x = np.asarray(window.x_seq, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != encoder.input_dim:
        raise ShapeError(f"window shape {x.shape} does not match encoder input dim {encoder.input_dim}")
    h, _ = lstm_forward(encoder, x)
    return np.concatenate([h, window.e_text])

"""Joint training of the detector, predictor and healer, plus the binary
checkpoint format.

Per epoch: one pass of minibatch SGD over the SVM (+ sequence encoder), the
autoencoder, the VAE and the failure predictor; recalibration of the alarm
fusion; then a block of Q-learning episodes driven by the current detectors.
The Q table has no gradient, so its TD loss is reported in the total but
does not enter any SGD step.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .cluster_sim import Dataset, SimConfig, Simulation
from .detectors import (
    AeModel,
    DetectorStack,
    FusionConfig,
    SvmModel,
    VaeModel,
    ae_loss_grad,
    ae_score,
    calibrate,
    class_index,
    svm_loss_grad,
    vae_loss_grad,
    vae_score,
)
from .features import FeatureWindow, Normalizer, encode_backward, encode_batch, make_windows, normalize_fit, stack_windows
from .healer import DetectorObserver, QTable, train_q
from .nn_core import LstmCellParams, SgdConfig, sgd_update
from .predictor import PredictorModel, dnn_loss_grad

LOSS_NAMES = ("l_svm", "l_ae", "l_vae", "l_dnn", "l_rl")


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class ContractError(ValueError):
    pass


def total_loss(components: Sequence[float], weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0, 1.0)) -> float:
    if len(components) != len(weights):
        raise ContractError("components and weights differ in length")
    total = 0.0
    for c, w in zip(components, weights):
        if not np.isfinite(c) or c < 0:
            raise ContractError(f"loss component {c} is negative or not finite")
        if w < 0:
            raise ContractError(f"loss weight {w} is negative")
        total += w * c
    return total


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    C: float = 1.0
    lam: float = 1e-4
    weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    seed: int = 42
    split: tuple = (0.70, 0.15, 0.15)
    clip_norm: float = 5.0
    window: int = 16
    embed_dim: int = 32
    hidden: int = 32
    latent: int = 8
    horizon: int = 5
    threshold_quantile: float = 0.99
    rl_alpha: float = 0.2
    rl_gamma: float = 0.9
    rl_eps_start: float = 0.3
    rl_eps_end: float = 0.01
    rl_episodes: int = 500
    rl_ticks: int = 200
    rl_nodes: int = 4
    rl_fault_rate: float = 0.02

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if any(w < 0 for w in self.weights) or len(self.weights) != 5:
            raise ValueError("need five nonnegative loss weights")
        if abs(sum(self.split) - 1.0) > 1e-9 or any(f < 0 for f in self.split):
            raise ValueError("split fractions must be nonnegative and sum to 1")

    def fingerprint(self) -> int:
        return zlib.crc32(repr(sorted(asdict(self).items())).encode())


@dataclass
class ModelBundle:
    normalizer: Normalizer
    encoder: LstmCellParams
    svm: SvmModel
    ae: AeModel
    vae: VaeModel
    fusion: FusionConfig
    predictor: PredictorModel
    qtable: QTable
    window: int = 16
    embed_dim: int = 32
    horizon: int = 5
    seed: int = 0
    fingerprint: int = 0

    @property
    def detectors(self) -> DetectorStack:
        return DetectorStack(self.encoder, self.svm, self.ae, self.vae, self.fusion)

    def observer(self) -> DetectorObserver:
        return DetectorObserver(self.detectors, self.normalizer, self.window, self.embed_dim)


class Splits(NamedTuple):
    train: list[FeatureWindow]
    val: list[FeatureWindow]
    test: list[FeatureWindow]


def split_bounds(last_tick: int, split=(0.70, 0.15, 0.15)) -> tuple[float, float]:
    """Tick cut points; a window belongs to the split holding its last tick."""
    span = last_tick + 1
    return split[0] * span, (split[0] + split[1]) * span


def split_of(t: int, bounds) -> int:
    return 0 if t < bounds[0] else (1 if t < bounds[1] else 2)


def prepare_data(data: Dataset, cfg: TrainConfig) -> tuple[Normalizer, Splits]:
    """Fit the normaliser on training-range samples and cut windows."""
    if not data.samples:
        raise ValueError("empty dataset")
    bounds = split_bounds(max(s.t for s in data.samples), cfg.split)
    norm = normalize_fit([s for s in data.samples if s.t < bounds[0]])
    windows = make_windows(
        data.samples, cfg.window, data.logs, data.labels, k=cfg.horizon, embed_dim=cfg.embed_dim, normalizer=norm
    )
    parts: list[list[FeatureWindow]] = [[], [], []]
    for w in windows:
        parts[split_of(w.t, bounds)].append(w)
    return norm, Splits(*parts)


def init_bundle(cfg: TrainConfig, normalizer: Normalizer, m: int = 5) -> ModelBundle:
    ss = np.random.SeedSequence(cfg.seed).spawn(4)
    rngs = [np.random.default_rng(s) for s in ss]
    feat_dim = cfg.hidden + cfg.embed_dim
    return ModelBundle(
        normalizer=normalizer,
        encoder=LstmCellParams.init(rngs[0], m, cfg.hidden),
        svm=SvmModel.zeros(feat_dim, C=cfg.C),
        ae=AeModel.init(rngs[1], feat_dim, lam=cfg.lam),
        vae=VaeModel.init(rngs[2], feat_dim, latent=cfg.latent),
        fusion=FusionConfig(),
        predictor=PredictorModel.init(rngs[3], m, cfg.hidden, cfg.embed_dim),
        qtable=QTable(alpha=cfg.rl_alpha, gamma=cfg.rl_gamma, epsilon=cfg.rl_eps_start),
        window=cfg.window,
        embed_dim=cfg.embed_dim,
        horizon=cfg.horizon,
        seed=cfg.seed,
        fingerprint=cfg.fingerprint(),
    )


def _arrays(windows: Sequence[FeatureWindow]):
    X, E = stack_windows(windows)
    labels = np.array([class_index(w.label) for w in windows])
    y = np.array([1.0 if w.future_fault else 0.0 for w in windows])
    return X, E, labels, y


def recalibrate(bundle: ModelBundle, train: Sequence[FeatureWindow], val: Sequence[FeatureWindow], quantile: float) -> FusionConfig:
    def healthy_scores(windows):
        ws = [w for w in windows if w.label is None]
        if not ws:
            return np.zeros(0), np.zeros(0)
        F = encode_batch(bundle.encoder, *stack_windows(ws))[0]
        return ae_score(bundle.ae, F), vae_score(bundle.vae, F)

    ae_tr, vae_tr = healthy_scores(train)
    ae_va, vae_va = healthy_scores(val)
    if ae_va.size == 0:
        ae_va, vae_va = ae_tr, vae_tr
    return calibrate(bundle.fusion, ae_tr, vae_tr, ae_va, vae_va, threshold_quantile=quantile)


def rl_sim_factory(cfg: TrainConfig, base_seed: int):
    sim_cfg = SimConfig(nodes=cfg.rl_nodes, ticks=cfg.rl_ticks, fault_rate=cfg.rl_fault_rate)

    def make(i: int) -> Simulation:
        return Simulation(sim_cfg, int(np.random.SeedSequence([base_seed, i]).generate_state(1)[0]))

    return make


def episodes_in_epoch(epoch: int, epochs: int, total: int) -> int:
    return (epoch + 1) * total // epochs - epoch * total // epochs


def train(cfg: TrainConfig, splits: Splits, normalizer: Normalizer, progress=None):
    """Returns ``(bundle, curve)`` where ``curve`` holds one dict per epoch
    with the five component losses and ``l_total``."""
    if not splits.train:
        raise ValueError("empty training split")
    bundle = init_bundle(cfg, normalizer, splits.train[0].x_seq.shape[1])
    sgd = SgdConfig(cfg.eta, cfg.clip_norm)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    X, E, labels, y = _arrays(splits.train)
    healthy = labels == 0
    make_sim = rl_sim_factory(cfg, cfg.seed)
    curve = []
    done_eps = 0
    for epoch in range(cfg.epochs):
        sums = np.zeros(4)
        counts = np.zeros(4)
        order = rng.permutation(len(X))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            F, cache = encode_batch(bundle.encoder, X[idx], E[idx])

            l_svm, g_svm, dF = svm_loss_grad(bundle.svm, F, labels[idx])
            g_enc = encode_backward(bundle.encoder, cache, dF)
            group = {f"enc.{k}": v for k, v in bundle.encoder.as_dict().items()}
            group.update({f"svm.{k}": v for k, v in bundle.svm.params.items()})
            grads = {f"enc.{k}": v for k, v in g_enc.items()}
            grads.update({f"svm.{k}": v for k, v in g_svm.items()})
            new = sgd_update(group, grads, sgd)
            bundle.encoder = LstmCellParams(new["enc.W_x"], new["enc.W_h"], new["enc.b_h"])
            bundle.svm = bundle.svm.with_params({"W": new["svm.W"], "b": new["svm.b"]})
            sums[0] += l_svm
            counts[0] += 1

            # anomaly models learn normal behaviour only; encoder output is
            # treated as a constant input here
            Fh = F[healthy[idx]]
            if len(Fh):
                l_ae, g_ae, _ = ae_loss_grad(bundle.ae, Fh)
                bundle.ae = bundle.ae.with_params(sgd_update(bundle.ae.params, g_ae, sgd))
                noise = rng.standard_normal((len(Fh), bundle.vae.latent))
                l_vae, g_vae, _ = vae_loss_grad(bundle.vae, Fh, noise)
                bundle.vae = bundle.vae.with_params(sgd_update(bundle.vae.params, g_vae, sgd))
                sums[1:3] += (l_ae, l_vae)
                counts[1:3] += 1

            l_dnn, g_dnn = dnn_loss_grad(bundle.predictor, X[idx], E[idx], y[idx])
            bundle.predictor = bundle.predictor.with_params(sgd_update(bundle.predictor.params, g_dnn, sgd))
            sums[3] += l_dnn
            counts[3] += 1

        comps = [float(v) for v in sums / np.maximum(counts, 1)]
        if not np.all(np.isfinite(comps)):
            raise TrainingError(epoch, "non-finite loss")
        bundle.fusion = recalibrate(bundle, splits.train, splits.val, cfg.threshold_quantile)

        n_eps = episodes_in_epoch(epoch, cfg.epochs, cfg.rl_episodes)
        l_rl = 0.0
        if n_eps:
            results = train_q(
                bundle.qtable,
                make_sim,
                n_eps,
                cfg.rl_eps_start,
                cfg.rl_eps_end,
                observer=bundle.observer(),
                seed=cfg.seed,
                first_episode=done_eps,
                total_episodes=cfg.rl_episodes,
                lockstep=n_eps,
            )
            done_eps += n_eps
            l_rl = float(np.mean([r.td_loss for r in results]))
        comps.append(l_rl)
        l_total = total_loss(comps, cfg.weights)
        if not np.isfinite(l_total):
            raise TrainingError(epoch, "non-finite total loss")
        row = {"epoch": epoch, **dict(zip(LOSS_NAMES, comps)), "l_total": l_total}
        curve.append(row)
        if progress is not None:
            progress(row)
    return bundle, curve


def write_loss_curve(curve, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch," + ",".join(LOSS_NAMES) + ",l_total\n")
        for row in curve:
            fh.write(f"{row['epoch']}," + ",".join(repr(float(row[k])) for k in (*LOSS_NAMES, "l_total")) + "\n")


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

MAGIC = b"FDSH"
VERSION = 1


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    body = bytearray(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    return MAGIC + bytes([VERSION]) + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(MAGIC) + 1 + 4 + 4:
        raise FormatError("file too short")
    if blob[:4] != MAGIC:
        raise FormatError("bad magic bytes")
    if blob[4] != VERSION:
        raise VersionError(f"unsupported checkpoint version {blob[4]}")
    body, (crc,) = blob[5:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checksum mismatch")
    out = {}
    try:
        (count,) = struct.unpack_from("<I", body, 0)
        pos = 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(body):
                raise FormatError(f"tensor {name!r} runs past end of file")
            out[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt tensor table: {exc}") from exc
    if pos != len(body):
        raise FormatError("trailing bytes after tensor table")
    return out


def bundle_tensors(b: ModelBundle) -> dict[str, np.ndarray]:
    f = b.fusion
    t = {
        "norm.lo": b.normalizer.lo,
        "norm.hi": b.normalizer.hi,
        **{f"enc.{k}": v for k, v in b.encoder.as_dict().items()},
        "svm.W": b.svm.W,
        "svm.b": b.svm.b,
        "svm.C": np.array([b.svm.C]),
        **{f"ae.{k}": v for k, v in b.ae.params.items()},
        "ae.lam": np.array([b.ae.lam]),
        **{f"vae.{k}": v for k, v in b.vae.params.items()},
        "fusion": np.array(
            [f.w_ae, f.w_vae, f.threshold, f.q, np.nan if f.scale_ae is None else f.scale_ae, np.nan if f.scale_vae is None else f.scale_vae]
        ),
        **{f"pred.{k}": v for k, v in b.predictor.params.items()},
        "pred.threshold": np.array([b.predictor.threshold]),
        "q.values": b.qtable.values,
        "q.hyper": np.array([b.qtable.alpha, b.qtable.gamma, b.qtable.epsilon]),
        "meta.features": np.array([b.window, b.embed_dim, b.horizon], dtype=np.float64),
        "meta.seed": np.array([b.seed & 0xFFFFFFFF, (b.seed >> 32) & 0xFFFFFFFF], dtype=np.float64),
        "meta.fingerprint": np.array([b.fingerprint], dtype=np.float64),
    }
    return t


def bundle_from_tensors(t: dict[str, np.ndarray]) -> ModelBundle:
    try:
        ae_params = {k[3:]: v for k, v in t.items() if k.startswith("ae.") and k != "ae.lam"}
        n_ae = len(ae_params) // 2
        fus = t["fusion"]
        lo, hi = (int(v) for v in t["meta.seed"])
        win, emb, hor = (int(v) for v in t["meta.features"])
        qh = t["q.hyper"]
        return ModelBundle(
            normalizer=Normalizer(t["norm.lo"], t["norm.hi"]),
            encoder=LstmCellParams(t["enc.W_x"], t["enc.W_h"], t["enc.b_h"]),
            svm=SvmModel(t["svm.W"], t["svm.b"], float(t["svm.C"][0])),
            ae=AeModel(ae_params, ("tanh",) * (n_ae - 1) + ("identity",), float(t["ae.lam"][0])),
            vae=VaeModel({k[4:]: v for k, v in t.items() if k.startswith("vae.")}),
            fusion=FusionConfig(
                float(fus[0]),
                float(fus[1]),
                float(fus[2]),
                float(fus[3]),
                None if np.isnan(fus[4]) else float(fus[4]),
                None if np.isnan(fus[5]) else float(fus[5]),
            ),
            predictor=replace(
                PredictorModel.zeros().with_params({k[5:]: v for k, v in t.items() if k.startswith("pred.") and k != "pred.threshold"}),
                threshold=float(t["pred.threshold"][0]),
            ),
            qtable=QTable(t["q.values"], float(qh[0]), float(qh[1]), float(qh[2])),
            window=win,
            embed_dim=emb,
            horizon=hor,
            seed=lo | (hi << 32),
            fingerprint=int(t["meta.fingerprint"][0]),
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise FormatError(f"checkpoint is missing or has malformed tensors: {exc}") from exc


def save_checkpoint(bundle: ModelBundle, path) -> None:
    Path(path).write_bytes(encode_tensors(bundle_tensors(bundle)))


def load_checkpoint(path) -> ModelBundle:
    return bundle_from_tensors(decode_tensors(Path(path).read_bytes()))


def checkpoint_roundtrip(bundle: ModelBundle, path) -> ModelBundle:
    save_checkpoint(bundle, path)
    return load_checkpoint(path)

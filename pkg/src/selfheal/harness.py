"""Experiment pipeline: generate data, train, score, heal, evaluate.

Every stage reads and writes plain files so each reported number can be
recomputed from the artifacts alone. ``run_experiment`` chains them.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cluster_sim import (
    Event,
    FaultClass,
    ParseError,
    SimConfig,
    Simulation,
    Status,
    generate_dataset,
    load_dataset,
    recovery_time,
    save_dataset,
)
from .detectors import class_name
from .features import make_windows, stack_windows
from .healer import noop_policy, run_episodes
from .predictor import predict_batch
from .trainer import (
    TrainConfig,
    load_checkpoint,
    prepare_data,
    save_checkpoint,
    split_bounds,
    split_of,
    train,
    write_loss_curve,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class JoinError(ValueError):
    pass


class SampleSizeError(ValueError):
    pass


# --------------------------------------------------------------------------
# Config
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    sim_nodes: int = 4
    sim_ticks: int = 1500
    sim_fault_rate: float = 0.02
    sim_seed: int = 42
    feat_window: int = 16
    feat_embed_dim: int = 32
    model_hidden: int = 32
    model_latent: int = 8
    predict_horizon: int = 5
    train_eta: float = 0.01
    train_epochs: int = 30
    train_batch: int = 32
    train_C: float = 1.0
    train_lambda: float = 1e-4
    rl_alpha: float = 0.2
    rl_gamma: float = 0.9
    rl_epsilon_start: float = 0.3
    rl_epsilon_end: float = 0.01
    rl_episodes: int = 500
    rl_horizon: int = 200
    detect_threshold_quantile: float = 0.99
    eval_seeds: int = 20
    eval_storm_rate: float = 0.05

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            eta=self.train_eta,
            epochs=self.train_epochs,
            batch_size=self.train_batch,
            C=self.train_C,
            lam=self.train_lambda,
            seed=self.sim_seed,
            window=self.feat_window,
            embed_dim=self.feat_embed_dim,
            hidden=self.model_hidden,
            latent=self.model_latent,
            horizon=self.predict_horizon,
            threshold_quantile=self.detect_threshold_quantile,
            rl_alpha=self.rl_alpha,
            rl_gamma=self.rl_gamma,
            rl_eps_start=self.rl_epsilon_start,
            rl_eps_end=self.rl_epsilon_end,
            rl_episodes=self.rl_episodes,
            rl_ticks=self.rl_horizon,
            rl_nodes=self.sim_nodes,
            rl_fault_rate=self.sim_fault_rate,
        )

    def sim_config(self) -> SimConfig:
        return SimConfig(nodes=self.sim_nodes, ticks=self.sim_ticks, fault_rate=self.sim_fault_rate)

    def eval_sim_config(self) -> SimConfig:
        return SimConfig(nodes=self.sim_nodes, ticks=self.rl_horizon, fault_rate=self.eval_storm_rate)


def _key_to_field(key: str) -> str:
    return key.replace(".", "_")


CONFIG_KEYS = tuple(f.name.replace("_", ".", 1) for f in fields(ExperimentConfig))


def parse_config(text: str) -> ExperimentConfig:
    """``key = value`` lines, ``#`` comments. Unknown or repeated keys and
    unparsable values raise ConfigError."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        name = _key_to_field(key)
        if name not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if name in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[name] = int(value) if types[name] in (int, "int") else float(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.sim_config()
        cfg.eval_sim_config()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.feat_window < 1 or cfg.feat_embed_dim < 1 or cfg.model_hidden < 1 or cfg.model_latent < 1:
        raise ConfigError("dimensions must be positive")
    if cfg.train_eta <= 0 or cfg.train_C <= 0 or cfg.train_lambda < 0:
        raise ConfigError("need eta > 0, C > 0, lambda >= 0")
    if not (0 < cfg.rl_alpha <= 1 and 0 <= cfg.rl_gamma < 1):
        raise ConfigError("need alpha in (0, 1] and gamma in [0, 1)")
    if not (0 <= cfg.rl_epsilon_end <= 1 and 0 <= cfg.rl_epsilon_start <= 1):
        raise ConfigError("epsilon values must lie in [0, 1]")
    if cfg.rl_episodes < 0 or cfg.rl_horizon < 1 or cfg.eval_seeds < 2:
        raise ConfigError("need rl.episodes >= 0, rl.horizon >= 1, eval.seeds >= 2")
    if not 0 < cfg.detect_threshold_quantile < 1:
        raise ConfigError("detect.threshold_quantile must lie in (0, 1)")


def load_config(path) -> ExperimentConfig:
    """Read a config file; the literal name ``default`` (when no such file
    exists) gives the built-in defaults."""
    p = Path(path)
    if str(path) == "default" and not p.exists():
        return ExperimentConfig()
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name.replace('_', '.', 1)} = {getattr(cfg, f.name)}\n" for f in fields(cfg))


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def accuracy(pred: Mapping, truth: Mapping) -> float:
    """Fraction of keys whose predicted label equals the true one. Both
    mappings must cover exactly the same ``(t, node)`` keys."""
    if pred.keys() != truth.keys():
        missing = set(truth) ^ set(pred)
        raise JoinError(f"{len(missing)} keys present on one side only")
    if not truth:
        raise JoinError("no records to compare")
    return sum(pred[k] == truth[k] for k in truth) / len(truth)


def run_stability(statuses: Sequence[Sequence[int]]) -> float:
    """Fraction of ticks in which no node is Failed."""
    if not len(statuses):
        return 1.0
    return float(np.mean([all(s != Status.Failed for s in tick) for tick in statuses]))


def distribution(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q1, q3 = np.quantile(v, [0.25, 0.75])
    return {"mean": float(v.mean()), "min": float(v.min()), "max": float(v.max()), "iqr": float(q3 - q1)}


def stability_score(runs: Sequence[Sequence[Sequence[int]]]) -> dict:
    """Per-run stability plus its distribution; needs at least two runs."""
    if len(runs) < 2:
        raise SampleSizeError("stability needs at least two runs")
    per_run = [run_stability(r) for r in runs]
    return {"per_run": per_run, **distribution(per_run)}


@dataclass
class MetricsReport:
    accuracy: float
    mean_recovery_ticks: float
    stability_score: float
    recovery: dict
    stability: dict
    baseline_recovery: dict
    baseline_stability: dict
    downtime_reduction: float

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_recovery_ticks": self.mean_recovery_ticks,
            "stability_score": self.stability_score,
            "downtime_reduction": self.downtime_reduction,
            "recovery": self.recovery,
            "stability": self.stability,
            "baseline": {"recovery": self.baseline_recovery, "stability": self.baseline_stability},
        }


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

SCORE_HEADER = ["t", "node", "svm_class", "ae_score", "vae_score", "fused", "flag"]
PRED_HEADER = ["t", "node", "p_fail", "predicted"]
SUMMARY_HEADER = ["episode", "cum_reward", "td_loss", "mean_recovery_ticks"]


def gen_stage(cfg: ExperimentConfig, out_dir) -> None:
    save_dataset(generate_dataset(cfg.sim_config(), cfg.sim_seed), out_dir)


def train_stage(cfg: ExperimentConfig, data_dir, model_out, progress=None) -> list[dict]:
    tcfg = cfg.train_config()
    norm, splits = prepare_data(load_dataset(data_dir), tcfg)
    bundle, curve = train(tcfg, splits, norm, progress=progress)
    model_out = Path(model_out)
    model_out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(bundle, model_out)
    write_loss_curve(curve, model_out.parent / "loss_curve.csv")
    return curve


def _fmt(x: float) -> str:
    return repr(float(x))


def detect_stage(model_path, data_dir, out_csv) -> None:
    """Score every window; writes ``out_csv`` and ``predictions.csv`` beside it."""
    bundle = load_checkpoint(model_path)
    data = load_dataset(data_dir)
    windows = make_windows(
        data.samples, bundle.window, data.logs, None, embed_dim=bundle.embed_dim, normalizer=bundle.normalizer
    )
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    score_rows, pred_rows = [], []
    for s in range(0, len(windows), 1024):
        chunk = windows[s : s + 1024]
        X, E = stack_windows(chunk)
        sc = bundle.detectors.score(X, E)
        p = predict_batch(bundle.predictor, X, E)
        for j, w in enumerate(chunk):
            score_rows.append(
                [w.t, w.node, class_name(int(sc.svm_class[j])), _fmt(sc.ae[j]), _fmt(sc.vae[j]), _fmt(sc.fused[j]), int(sc.flag[j])]
            )
            pred_rows.append([w.t, w.node, _fmt(p[j]), int(p[j] > bundle.predictor.threshold)])
    _write_csv(out_csv, SCORE_HEADER, score_rows)
    _write_csv(out_csv.parent / "predictions.csv", PRED_HEADER, pred_rows)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def eval_seeds(cfg: ExperimentConfig) -> list[int]:
    return [int(np.random.SeedSequence([cfg.sim_seed, 7, i]).generate_state(1)[0]) for i in range(cfg.eval_seeds)]


def _sibling(path: Path, tag: str, suffix: str) -> Path:
    return path.with_name(f"{path.stem}{tag}{suffix}")


def heal_stage(cfg: ExperimentConfig, model_path, out_csv) -> None:
    """Paired evaluation under the fault-storm rate: the trained greedy
    healer and a NoOp baseline on the same seeds. For each policy ``P``
    (``""`` for the healer, ``".noop"``) writes ``<stem>P.csv`` (summary),
    ``<stem>P.jsonl`` (per-tick log) and ``<stem>P.events.jsonl``."""
    bundle = load_checkpoint(model_path)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    seeds = eval_seeds(cfg)
    sim_cfg = cfg.eval_sim_config()
    for tag, kwargs in (("", {"table": bundle.qtable, "learn": False}), (".noop", {"policy": noop_policy})):
        sims = [Simulation(sim_cfg, s) for s in seeds]
        results = run_episodes(sims, bundle.observer(), **kwargs)
        rows = [[i, r.cum_reward, _fmt(r.td_loss), _fmt(r.mean_recovery_ticks)] for i, r in enumerate(results)]
        _write_csv(_sibling(out_csv, tag, ".csv"), SUMMARY_HEADER, rows)
        with open(_sibling(out_csv, tag, ".jsonl"), "w", encoding="utf-8") as fh:
            for r in results:
                for row in r.log:
                    fh.write(json.dumps(row, separators=(",", ":")) + "\n")
        with open(_sibling(out_csv, tag, ".events.jsonl"), "w", encoding="utf-8") as fh:
            for i, r in enumerate(results):
                for ev in r.events:
                    fh.write(json.dumps({"ep": i, "t": ev.t, "kind": ev.kind, "node": ev.node, "detail": ev.detail}, separators=(",", ":")) + "\n")


def _read_csv(path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc


def _read_jsonl(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc


def _episode_metrics(episodes_csv: Path, tag: str, horizon: int):
    events: dict[int, list[Event]] = {}
    for row in _read_jsonl(_sibling(episodes_csv, tag, ".events.jsonl")):
        events.setdefault(int(row["ep"]), []).append(Event(int(row["t"]), row["kind"], int(row["node"]), row["detail"]))
    statuses: dict[int, list] = {}
    for row in _read_jsonl(_sibling(episodes_csv, tag, ".jsonl")):
        statuses.setdefault(int(row["ep"]), []).append(row["statuses"])
    eps = sorted(statuses)
    rec = []
    for ep in eps:
        episodes = recovery_time(events.get(ep, []), horizon)
        rec.append(float(np.mean([e.ticks for e in episodes])) if episodes else 0.0)
    stab = stability_score([statuses[ep] for ep in eps])
    return {"per_run": rec, **distribution(rec)}, stab


def eval_stage(scores_csv, truth_dir, episodes_csv, out_json, horizon: int | None = None) -> MetricsReport:
    """Accuracy on the held-out (last 15% of ticks) windows, recovery and
    stability for healer vs NoOp from the episode artifacts."""
    truth = {(lb.t, lb.node_id): lb.fault for lb in load_dataset(truth_dir).labels}
    if not truth:
        raise ParseError("no ground-truth labels")
    bounds = split_bounds(max(t for t, _ in truth))
    pred, truth_test = {}, {}
    for row in _read_csv(scores_csv):
        key = (int(row["t"]), int(row["node"]))
        if split_of(key[0], bounds) != 2:
            continue
        if key not in truth:
            raise JoinError(f"score row {key} has no ground-truth label")
        pred[key] = row["svm_class"]
        truth_test[key] = "none" if truth[key] is None else FaultClass(truth[key]).name
    acc = accuracy(pred, truth_test)

    episodes_csv = Path(episodes_csv)
    if horizon is None:
        horizon = 1 + max(int(r["t"]) for r in _read_jsonl(_sibling(episodes_csv, "", ".jsonl")))
    rec, stab = _episode_metrics(episodes_csv, "", horizon)
    base_rec, base_stab = _episode_metrics(episodes_csv, ".noop", horizon)
    reduction = 1.0 - rec["mean"] / base_rec["mean"] if base_rec["mean"] > 0 else 0.0
    report = MetricsReport(
        accuracy=acc,
        mean_recovery_ticks=rec["mean"],
        stability_score=stab["mean"],
        recovery=rec,
        stability=stab,
        baseline_recovery=base_rec,
        baseline_stability=base_stab,
        downtime_reduction=reduction,
    )
    out_json = Path(out_json)
    out_json.parent.mkdir(parents=True, exist_ok=True)
    out_json.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


def run_experiment(cfg: ExperimentConfig, out_dir, progress=None) -> MetricsReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    data_dir = out / "data"
    model = out / "model.fdsh"
    gen_stage(cfg, data_dir)
    train_stage(cfg, data_dir, model, progress=progress)
    detect_stage(model, data_dir, out / "scores.csv")
    heal_stage(cfg, model, out / "episodes.csv")
    return eval_stage(out / "scores.csv", data_dir, out / "episodes.csv", out / "metrics.json", horizon=cfg.rl_horizon)


def complexity_sweep(cfg: ExperimentConfig, out_dir, hidden_values=(8, 16, 32, 64)) -> dict[int, float]:
    """Healer mean recovery ticks as the encoder width grows; one full
    pipeline per setting, reusing one generated dataset."""
    out = Path(out_dir)
    data_dir = out / "data"
    gen_stage(cfg, data_dir)
    result = {}
    for h in hidden_values:
        sub = cfg.__class__(**{**cfg.__dict__, "model_hidden": h})
        d = out / f"hidden_{h}"
        train_stage(sub, data_dir, d / "model.fdsh")
        detect_stage(d / "model.fdsh", data_dir, d / "scores.csv")
        heal_stage(sub, d / "model.fdsh", d / "episodes.csv")
        result[h] = eval_stage(d / "scores.csv", data_dir, d / "episodes.csv", d / "metrics.json", horizon=sub.rl_horizon).mean_recovery_ticks
    return result

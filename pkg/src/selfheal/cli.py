"""Command-line entry point. Exit codes: 0 ok, 1 config, 2 data,
3 training divergence, 4 evaluation."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .cluster_sim import ParseError
from .features import DegenerateRangeError, OrderError
from .nn_core import NumericError
from .trainer import ContractError, FormatError, TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGE, EXIT_EVAL = range(5)

DATA_ERRORS = (ParseError, DegenerateRangeError, OrderError, FormatError, FileNotFoundError)


class StageFailure(Exception):
    def __init__(self, stage: str, code: int, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage, self.code, self.cause = stage, code, cause


def _classify(stage: str, exc: BaseException) -> int:
    if isinstance(exc, harness.ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (TrainingError, NumericError)):
        return EXIT_DIVERGE
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    if isinstance(exc, (ContractError, OSError)):
        return EXIT_DATA
    if stage == "train":
        return EXIT_DIVERGE
    return EXIT_EVAL


def _stage(name, fn, *args, **kwargs):
    print(f"[{name}]", file=sys.stderr)
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code below
        raise StageFailure(name, _classify(name, exc), exc) from exc


def _progress(row):
    print(f"  epoch {row['epoch']}: L_total={row['l_total']:.4f}", file=sys.stderr)


def _cmd_gen(a):
    cfg = _stage("config", harness.load_config, a.config)
    _stage("gen", harness.gen_stage, cfg, a.out)


def _cmd_train(a):
    cfg = _stage("config", harness.load_config, a.config)
    _stage("train", harness.train_stage, cfg, a.data, a.model_out, progress=_progress)


def _cmd_detect(a):
    _stage("detect", harness.detect_stage, a.model, a.data, a.out)


def _cmd_heal(a):
    cfg = _stage("config", harness.load_config, a.config)
    _stage("heal", harness.heal_stage, cfg, a.model, a.out)


def _cmd_eval(a):
    report = _stage("eval", harness.eval_stage, a.scores, a.truth, a.episodes, a.out)
    _summary(report)


def _cmd_run(a):
    from pathlib import Path

    cfg = _stage("config", harness.load_config, a.config)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(harness.format_config(cfg), encoding="utf-8")
    data, model = out / "data", out / "model.fdsh"
    _stage("gen", harness.gen_stage, cfg, data)
    _stage("train", harness.train_stage, cfg, data, model, progress=_progress)
    _stage("detect", harness.detect_stage, model, data, out / "scores.csv")
    _stage("heal", harness.heal_stage, cfg, model, out / "episodes.csv")
    report = _stage(
        "eval", harness.eval_stage, out / "scores.csv", data, out / "episodes.csv", out / "metrics.json", horizon=cfg.rl_horizon
    )
    _summary(report)


def _summary(r):
    print(f"accuracy            {r.accuracy:.4f}")
    print(f"mean_recovery_ticks {r.mean_recovery_ticks:.2f} (noop {r.baseline_recovery['mean']:.2f})")
    print(f"stability_score     {r.stability_score:.4f} (noop {r.baseline_stability['mean']:.4f})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfheal", description="Self-healing cluster experiment runner")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_gen)

    s = sub.add_parser("train", help="train all models and write a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--model-out", required=True)
    s.set_defaults(fn=_cmd_train)

    s = sub.add_parser("detect", help="score every window of a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_detect)

    s = sub.add_parser("heal", help="paired healer vs NoOp fault-storm episodes")
    s.add_argument("--config", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_heal)

    s = sub.add_parser("eval", help="compute metrics.json from artifacts")
    s.add_argument("--scores", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--episodes", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("run", help="full pipeline gen, train, detect, heal, eval")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except StageFailure as f:
        print(f"error in stage {f.stage}: {type(f.cause).__name__}: {f.cause}", file=sys.stderr)
        return f.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

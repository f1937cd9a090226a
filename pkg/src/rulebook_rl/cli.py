"""Command-line entry point: ``rulebook-rl {train,evaluate,score,simulate}``.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime error
(unreadable or malformed inputs, infeasible scenarios, non-finite training).

Environment: ``RULEBOOK_RL_LOG_DIR`` overrides ``paths.log_dir`` and
``RULEBOOK_RL_WORKERS`` overrides ``train.workers``; ``--set`` flags override both.

Outputs (under ``paths.out_dir``):

* train: ``checkpoints/epoch_XXX.ckpt`` per epoch, ``final.ckpt``,
  ``train_log.csv`` (columns epoch, loss_total, loss_pc, loss_rb, rb1..rb4,
  wall_time_s) and ``config.yaml`` with the resolved configuration.
* evaluate: ``eval_report.csv``; the table is printed to stdout.
* simulate: ``<log_dir>/episode_<seed>.jsonl`` trajectory logs (format in
  ``trajectory_log``).
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import trajectory_log
from .config import ConfigError, RunConfig
from .controller import ctrl
from .evaluation import evaluate, evaluate_detector, eval_seeds
from .perception import (
    ArgmaxDetector,
    PolicyParams,
    SamplingDetector,
    blind_detector,
    ground_truth_detector,
    load_checkpoint,
    save_checkpoint,
)
from .rulebook import RULE_NAMES, score_states
from .simulator import run_episode, spawn
from .trainer import NonFiniteError, pretrain, train

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class RuntimeFailure(RuntimeError):
    pass


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def initial_params(cfg: RunConfig) -> PolicyParams:
    """Checkpoint if given, else a supervised warm start from ``model.pretrain_*``."""
    if cfg.paths.checkpoint_in:
        return _load(cfg.paths.checkpoint_in)
    m = cfg.model
    if m.init_scale > 0:
        p = PolicyParams.random(m.pretrain_seed, m.init_scale, hidden=m.hidden)
    else:
        p = PolicyParams.zeros(hidden=m.hidden)
    if m.pretrain_scenes and m.pretrain_steps:
        p = pretrain(p, cfg.scenario, m.pretrain_scenes, m.pretrain_steps, m.pretrain_lr,
                     m.pretrain_seed, cfg.noise, m.n_slots, vparams=cfg.vehicle)
    return p


def _load(path) -> PolicyParams:
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise RuntimeFailure(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise RuntimeFailure(str(exc)) from exc


def cmd_train(cfg: RunConfig, out=sys.stdout) -> int:
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / "config.yaml", cfg.dump())
    theta0 = initial_params(cfg)

    def report(e):
        print(f"epoch {e.epoch:3d}  loss {e.loss_total:.5f}  pc {e.loss_pc:.5f}  "
              f"rb {e.loss_rb:.5f}  violations {float(e.violations.sum()):.2f}", file=out)

    try:
        result = train(theta0, cfg.train, cfg.reward, cfg.scenario, cfg.vehicle, cfg.noise,
                       cfg.model.n_slots, checkpoint_dir=out_dir / "checkpoints",
                       log_path=out_dir / "train_log.csv", on_epoch=report)
    except NonFiniteError as exc:
        raise RuntimeFailure(str(exc)) from exc
    save_checkpoint(result.params, out_dir / "final.ckpt")
    print(f"wrote {len(result.log)} epochs to {out_dir}", file=out)
    return EXIT_OK


def _detector(cfg: RunConfig, kind: str):
    if kind == "ground_truth":
        return ground_truth_detector
    if kind == "blind":
        return blind_detector
    params = _load(cfg.paths.checkpoint_in) if cfg.paths.checkpoint_in else initial_params(cfg)
    return ArgmaxDetector(params) if kind == "argmax" else SamplingDetector(params)


def cmd_evaluate(cfg: RunConfig, detector: str | None = None, out=sys.stdout) -> int:
    e = cfg.evaluate
    seeds = eval_seeds(e.episodes, e.seed_base)
    common = dict(vparams=cfg.vehicle, scenario_cfg=cfg.scenario, noise=cfg.noise,
                  n_slots=cfg.model.n_slots, workers=cfg.train.workers,
                  threshold=cfg.reward.match_threshold)
    if detector is not None:
        report = evaluate_detector(_detector(cfg, detector), seeds, e.fog_levels,
                                   variant=detector, **common)
    else:
        if e.models:
            models = {name: _load(path) for name, path in e.models.items()}
        elif cfg.paths.checkpoint_in:
            models = {"model": _load(cfg.paths.checkpoint_in)}
        else:
            raise ConfigError("evaluate needs evaluate.models, paths.checkpoint_in "
                              "or --detector")
        report = evaluate(models, seeds, e.fog_levels, **common)
    _write_text(Path(cfg.paths.out_dir) / "eval_report.csv", report.csv_text())
    print(report.table(), file=out)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, out=sys.stdout) -> int:
    s = cfg.simulate
    det = _detector(cfg, s.detector)
    log_dir = cfg.log_dir
    log_dir.mkdir(parents=True, exist_ok=True)
    for i in range(s.episodes):
        sc_cfg = dataclasses.replace(cfg.scenario, seed=cfg.scenario.seed + i)
        try:
            scenario = spawn(sc_cfg, cfg.vehicle)
        except RuntimeError as exc:
            raise RuntimeFailure(str(exc)) from exc
        record = run_episode(scenario, det, ctrl, cfg.vehicle, cfg.noise,
                             n_slots=cfg.model.n_slots, fog=s.fog)
        path = log_dir / f"episode_{sc_cfg.seed}.jsonl"
        trajectory_log.write(path, record, cfg.vehicle, cfg.model.n_slots)
        print(f"{path}  " + _fmt_totals(record.totals), file=out)
    return EXIT_OK


def _fmt_totals(totals) -> str:
    return "  ".join(f"{n}={float(v)!r}" for n, v in zip(RULE_NAMES, totals))


def score_log(path) -> np.ndarray:
    log = trajectory_log.read(path)
    return score_states(log.states, log.params).sum(axis=0)


def cmd_score(paths: list[str], out=sys.stdout) -> int:
    for p in paths:
        try:
            totals = score_log(p)
        except OSError as exc:
            raise RuntimeFailure(f"cannot read {p}: {exc.strerror}") from exc
        except trajectory_log.LogFormatError as exc:
            raise RuntimeFailure(f"{p}: {exc}") from exc
        print(f"{p}  " + _fmt_totals(totals) + f"  total={float(totals.sum())!r}", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rulebook-rl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", nargs="?", help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config key")
        p.add_argument("--workers", type=int, help="rollout / evaluation processes")
        return p

    with_config(sub.add_parser("train", help="fine-tune the detector"))
    ev = with_config(sub.add_parser("evaluate", help="violation and accuracy tables"))
    ev.add_argument("--detector", choices=("ground_truth", "blind", "argmax"),
                    help="evaluate a built-in detector instead of checkpoints")
    with_config(sub.add_parser("simulate", help="roll out episodes and write logs"))
    sc = sub.add_parser("score", help="apply the rulebook to trajectory logs")
    sc.add_argument("logs", nargs="+")
    return parser


def main(argv=None, out=sys.stdout, err=sys.stderr) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        if args.command == "score":
            return cmd_score(args.logs, out)
        overrides = list(args.overrides)
        if args.workers is not None:
            overrides.append(f"train.workers={args.workers}")
        cfg = config_mod.load(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.detector, out)
        return cmd_simulate(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_CONFIG
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=err)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

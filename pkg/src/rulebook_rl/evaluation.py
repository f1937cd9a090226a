"""Violation and accuracy tables over detector variants and fog levels."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .controller import ctrl
from .domain import VehicleParams, prioritized_objects
from .perception import ArgmaxDetector, PolicyParams
from .rulebook import RULE_NAMES, score_realization
from .simulator import (
    NoiseModel,
    ScenarioConfig,
    TrajectoryRecord,
    run_episode,
    spawn,
    visible_objects,
)
from .trainer import match_all

FOG_LEVELS = (0.0, 20.0, 40.0, 60.0)
EVAL_SEED_BASE = 7_000_000_000


def eval_seeds(n: int, base: int = EVAL_SEED_BASE) -> list[int]:
    """Evaluation scenario seeds; far away from any training rollout seed."""
    return [base + i for i in range(n)]


@dataclass
class AccuracyCounts:
    prio_hit: int = 0
    prio_total: int = 0
    other_hit: int = 0
    other_total: int = 0

    def __iadd__(self, o: "AccuracyCounts"):
        self.prio_hit += o.prio_hit
        self.prio_total += o.prio_total
        self.other_hit += o.other_hit
        self.other_total += o.other_total
        return self

    @property
    def prioritized(self) -> float | None:
        return self.prio_hit / self.prio_total if self.prio_total else None

    @property
    def non_prioritized(self) -> float | None:
        return self.other_hit / self.other_total if self.other_total else None

    @property
    def overall(self) -> float | None:
        n = self.prio_total + self.other_total
        return (self.prio_hit + self.other_hit) / n if n else None


def accuracy_counts(records: Sequence[TrajectoryRecord], n_slots: int = 8,
                    threshold: float = 0.5) -> AccuracyCounts:
    """Per (step, object) detection hits, split by membership of the prioritized set.

    Only objects inside the sensor's field of view count; an object is a hit
    when some detection is matched to it (same class, IoU above threshold).
    """
    out = AccuracyCounts()
    for rec in records:
        for world, det in zip(rec.states, rec.detections):
            truth = visible_objects(world, n_slots)
            if not truth:
                continue
            matched = {id(m) for m in match_all(det.objects_by_slot, truth, threshold)
                       if m is not None}
            prio = {o.id for o in prioritized_objects(truth, world.ego)}
            for o in truth:
                hit = id(o) in matched
                if o.id in prio:
                    out.prio_total += 1
                    out.prio_hit += hit
                else:
                    out.other_total += 1
                    out.other_hit += hit
    return out


def prioritized_accuracy(records: Sequence[TrajectoryRecord], n_slots: int = 8,
                         threshold: float = 0.5) -> tuple[float | None, float | None]:
    c = accuracy_counts(records, n_slots, threshold)
    return c.prioritized, c.non_prioritized


@dataclass
class EvalCell:
    variant: str
    fog: float
    totals: np.ndarray
    accuracy: AccuracyCounts
    episodes: int

    @property
    def total(self) -> float:
        return float(self.totals.sum())


@dataclass
class EvalReport:
    cells: list[EvalCell] = field(default_factory=list)

    def cell(self, variant: str, fog: float) -> EvalCell:
        for c in self.cells:
            if c.variant == variant and c.fog == fog:
                return c
        raise KeyError((variant, fog))

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(c.variant for c in self.cells))

    @property
    def fogs(self) -> list[float]:
        return list(dict.fromkeys(c.fog for c in self.cells))

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "fog", *RULE_NAMES, "total",
                    "prioritized_acc", "non_prioritized_acc", "episodes"])
        for c in self.cells:
            w.writerow([c.variant, repr(c.fog), *(repr(float(x)) for x in c.totals),
                        repr(c.total), _fmt_opt(c.accuracy.prioritized),
                        _fmt_opt(c.accuracy.non_prioritized), c.episodes])
        return buf.getvalue()

    def table(self) -> str:
        lines = []
        for fog in self.fogs:
            lines.append(f"fog density {fog:g}")
            lines.append(f"  {'variant':<10}" + "".join(f"{n:>19}" for n in RULE_NAMES)
                         + f"{'total':>12}{'P-acc':>8}{'NP-acc':>8}")
            for v in self.variants:
                c = self.cell(v, fog)
                acc = c.accuracy
                lines.append(f"  {v:<10}" + "".join(f"{x:>19.2f}" for x in c.totals)
                             + f"{c.total:>12.2f}{_fmt_opt(acc.prioritized, 2):>8}"
                             + f"{_fmt_opt(acc.non_prioritized, 2):>8}")
        return "\n".join(lines)


def _fmt_opt(x: float | None, digits: int | None = None) -> str:
    if x is None:
        return "n/a"
    return f"{x:.{digits}f}" if digits is not None else repr(x)


@dataclass(frozen=True)
class _EvalJob:
    detector: Callable
    scenario_cfg: ScenarioConfig
    fog: float
    vparams: VehicleParams
    noise: NoiseModel
    n_slots: int


def _eval_one(job: _EvalJob) -> TrajectoryRecord:
    scenario = spawn(job.scenario_cfg, job.vparams)
    return run_episode(scenario, job.detector, ctrl, job.vparams, job.noise,
                       n_slots=job.n_slots, fog=job.fog)


def evaluate_detector(detector: Callable, seeds: Sequence[int], fog_levels=FOG_LEVELS,
                      vparams: VehicleParams | None = None,
                      scenario_cfg: ScenarioConfig | None = None,
                      noise: NoiseModel | None = None, n_slots: int = 8,
                      variant: str = "model", workers: int = 1,
                      threshold: float = 0.5) -> EvalReport:
    scenario_cfg = scenario_cfg or ScenarioConfig()
    vparams = vparams or VehicleParams(dt=scenario_cfg.dt)
    noise = noise or NoiseModel()
    report = EvalReport()
    for fog in fog_levels:
        jobs = [_EvalJob(detector, replace(scenario_cfg, seed=s), float(fog), vparams,
                         noise, n_slots) for s in seeds]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(_eval_one, jobs))
        else:
            records = [_eval_one(j) for j in jobs]
        totals = np.zeros(4)
        for rec in records:
            totals += score_realization(rec.states, vparams)
        report.cells.append(EvalCell(variant, float(fog), totals,
                                     accuracy_counts(records, n_slots, threshold),
                                     len(records)))
    return report


def evaluate(theta: PolicyParams | Mapping[str, PolicyParams], seeds: Sequence[int],
             fog_levels=FOG_LEVELS, vparams: VehicleParams | None = None,
             scenario_cfg: ScenarioConfig | None = None, noise: NoiseModel | None = None,
             n_slots: int = 8, workers: int = 1, threshold: float = 0.5) -> EvalReport:
    """Argmax-decoded closed-loop evaluation of one model or a named set of variants."""
    models = theta if isinstance(theta, Mapping) else {"model": theta}
    report = EvalReport()
    for name, params in models.items():
        part = evaluate_detector(ArgmaxDetector(params), seeds, fog_levels, vparams,
                                 scenario_cfg, noise, n_slots, name, workers, threshold)
        report.cells.extend(part.cells)
    return report

"""Policy-gradient fine-tuning of the detector against rulebook violations.

Each epoch samples ``max_traj`` closed-loop trajectories with the current
policy, turns every slot's tokens into reward-weighted training targets, sums
the per-trajectory gradients of ``(1/N) sum R log pi``, clips the global norm
and takes one ascent step.
"""
from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .controller import ctrl
from .domain import Kind, SceneObject, VehicleParams, WorldState
from .perception import (
    ABSENT,
    HEADS,
    PRESENT,
    DetectionSequence,
    PolicyParams,
    SamplingDetector,
    TokenBatch,
    build_batch,
    encode_object,
    featurize,
    head_distribution,
    save_checkpoint,
    slot_logprobs,
    weighted_logprob,
)
from .rulebook import suffix_totals
from .simulator import NoiseModel, ScenarioConfig, TrajectoryRecord, run_episode, spawn


@dataclass(frozen=True)
class RewardConfig:
    beta: float = 0.5
    w_percp: float = 1.0
    match_threshold: float = 0.5
    gamma: float = 1.0

    def __post_init__(self):
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if not 0 < self.match_threshold <= 1:
            raise ValueError("match_threshold must lie in (0, 1]")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.w_percp < 0:
            raise ValueError("w_percp must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    max_epoch: int = 20
    max_traj: int = 5
    horizon: int = 100
    lr: float = 0.5
    grad_clip: float = 1.0
    seed: int = 0
    workers: int = 1
    wall_time: bool = False     # record elapsed seconds; makes the CSV run-dependent

    def __post_init__(self):
        if self.max_epoch < 0:
            raise ValueError("max_epoch must be >= 0")
        if self.max_traj < 1 or self.horizon < 1:
            raise ValueError("max_traj and horizon must be >= 1")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


# ---------------------------------------------------------------- matching

def interval(obj: SceneObject) -> tuple[float, float]:
    return obj.position - obj.depth / 2, obj.position + obj.depth / 2


def iou_1d(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0


def match_detection(det: SceneObject, truth: Sequence[SceneObject],
                    threshold: float = 0.5) -> tuple[SceneObject | None, float]:
    """Best same-class, same-lane truth object by interval IoU, if above ``threshold``."""
    best, best_iou = None, 0.0
    for t in truth:
        if t.kind != det.kind or t.lane != det.lane:
            continue
        v = iou_1d(interval(det), interval(t))
        if v > best_iou:
            best, best_iou = t, v
    if best is None or best_iou < threshold:
        return None, best_iou
    return best, best_iou


def match_all(dets: Sequence[SceneObject | None], truth: Sequence[SceneObject],
              threshold: float = 0.5) -> list[SceneObject | None]:
    """Greedy one-to-one assignment by descending IoU; entry ``i`` is det ``i``'s match."""
    pairs = []
    for i, d in enumerate(dets):
        if d is None:
            continue
        for j, t in enumerate(truth):
            if t.kind == d.kind and t.lane == d.lane:
                v = iou_1d(interval(d), interval(t))
                if v >= threshold:
                    pairs.append((-v, i, j))
    pairs.sort()
    out: list[SceneObject | None] = [None] * len(dets)
    used = set()
    for _, i, j in pairs:
        if out[i] is None and j not in used:
            out[i] = truth[j]
            used.add(j)
    return out


# ---------------------------------------------------------------- reward assignment

@dataclass(frozen=True)
class TrainingTarget:
    step: int
    slot: int
    tokens: tuple[int, ...]
    r_pc: float
    r_rb: float
    reward: float
    substituted: bool
    correct: bool


def slot_truth(record: TrajectoryRecord, t: int) -> list[SceneObject | None]:
    """The ground-truth object that produced each sensor slot (``None`` for empty or clutter)."""
    by_id = {o.id: o for o in record.states[t].objects}
    return [by_id.get(r.source_id) if r is not None else None
            for r in record.frames[t].slots]


def counterfactual_control(record: TrajectoryRecord, t: int, slot: int,
                           params: VehicleParams) -> tuple[float, float]:
    """Controller output at ``t`` as recorded and with ``slot`` replaced by ground truth."""
    det = record.detections[t]
    truth = slot_truth(record, t)[slot]
    objs = list(det.objects_by_slot)
    objs[slot] = truth
    world = record.states[t]
    actual = ctrl(det.objects, det.probs, world.ego, params).accel
    swapped = ctrl([o for o in objs if o is not None], det.probs, world.ego, params).accel
    return actual, swapped


def attribute_violation(record: TrajectoryRecord, t: int, slot: int, params: VehicleParams,
                        gamma: float = 1.0, suffix: np.ndarray | None = None) -> np.ndarray:
    """Suffix violations charged to one slot's detection at step ``t``.

    The slot is charged only if substituting ground truth for it changes the
    controller output; the charge is then the whole (discounted) suffix score.
    """
    actual, swapped = counterfactual_control(record, t, slot, params)
    if actual == swapped:
        return np.zeros(record.violations.shape[1])
    if suffix is None:
        suffix = suffix_totals(record.violations, gamma)
    return suffix[t].copy()


def assign_rewards(record: TrajectoryRecord, cfg: RewardConfig,
                   params: VehicleParams) -> list[TrainingTarget]:
    suffix = suffix_totals(record.violations, cfg.gamma)
    out = []
    for t, det in enumerate(record.detections):
        world = record.states[t]
        truth_by_slot = slot_truth(record, t)
        matches = match_all(det.objects_by_slot, world.objects, cfg.match_threshold)
        for j, tokens in enumerate(det.tokens):
            src = truth_by_slot[j]
            if det.objects_by_slot[j] is None:
                correct = src is None
            else:
                correct = matches[j] is not None
            r_rb = 0.0
            if correct:
                toks, sub = tokens, False
            else:
                toks, sub = encode_object(src, world.ego), True
                r_rb = float(attribute_violation(record, t, j, params, cfg.gamma,
                                                 suffix).sum())
            r_pc = cfg.w_percp
            reward = cfg.beta * r_pc + (1 - cfg.beta) * r_rb
            out.append(TrainingTarget(t, j, tuple(toks), r_pc, r_rb, reward, sub, correct))
    return out


# ---------------------------------------------------------------- gradients

@dataclass
class TrajectoryGrad:
    grad: np.ndarray
    loss_total: float
    loss_pc: float
    loss_rb: float
    violations: np.ndarray
    n_tokens: int
    n_substituted: int


def _weighted(params: PolicyParams, record: TrajectoryRecord,
              targets: Sequence[TrainingTarget], weight: Callable[[TrainingTarget], float],
              with_grad: bool = True):
    feats, seqs, rews = [], [], []
    by_step: dict[int, list[TrainingTarget]] = {}
    for tg in targets:
        by_step.setdefault(tg.step, []).append(tg)
    for t, tgs in sorted(by_step.items()):
        f = featurize(record.frames[t], params.arch.vocab)
        for tg in tgs:
            feats.append(f[tg.slot])
            seqs.append(tg.tokens)
            rews.append([weight(tg)] * len(tg.tokens))
    if not feats:
        return 0.0, np.zeros_like(params.theta)
    batch = build_batch(np.array(feats), seqs, rews)
    return weighted_logprob(params, batch, with_grad)


def trajectory_gradient(params: PolicyParams, record: TrajectoryRecord, cfg: RewardConfig,
                        vparams: VehicleParams) -> TrajectoryGrad:
    """Gradient of ``(1/N) sum_t sum_j R_tj log pi(A_tj)`` with ``N`` the token count."""
    targets = assign_rewards(record, cfg, vparams)
    n = sum(len(tg.tokens) for tg in targets)
    total, grad = _weighted(params, record, targets, lambda tg: tg.reward)
    pc, _ = _weighted(params, record, targets, lambda tg: cfg.beta * tg.r_pc, False)
    rb, _ = _weighted(params, record, targets, lambda tg: (1 - cfg.beta) * tg.r_rb, False)
    scale = 1.0 / n if n else 0.0
    return TrajectoryGrad(grad * scale, -total * scale, -pc * scale, -rb * scale,
                          record.totals, n, sum(tg.substituted for tg in targets))


def clip_global_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    if norm > max_norm:
        return g * (max_norm / norm)
    return g


# ---------------------------------------------------------------- rollouts

@dataclass(frozen=True)
class RolloutJob:
    theta: np.ndarray
    params: PolicyParams
    scenario_cfg: ScenarioConfig
    reward_cfg: RewardConfig
    vparams: VehicleParams
    noise: NoiseModel
    n_slots: int


def rollout_seed(train_seed: int, epoch: int, index: int, max_traj: int) -> int:
    return train_seed * 1_000_003 + epoch * max_traj + index


def _rollout(job: RolloutJob) -> TrajectoryGrad:
    params = PolicyParams(job.params.arch, job.theta)
    scenario = spawn(job.scenario_cfg, job.vparams)
    record = run_episode(scenario, SamplingDetector(params), ctrl, job.vparams,
                         job.noise, n_slots=job.n_slots)
    return trajectory_gradient(params, record, job.reward_cfg, job.vparams)


def _map(jobs: list[RolloutJob], workers: int) -> list[TrajectoryGrad]:
    if workers <= 1 or len(jobs) <= 1:
        return [_rollout(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_rollout, jobs))


LOG_COLUMNS = ("epoch", "loss_total", "loss_pc", "loss_rb",
               "rb1", "rb2", "rb3", "rb4", "wall_time_s")


@dataclass
class EpochLog:
    epoch: int
    loss_total: float
    loss_pc: float
    loss_rb: float
    violations: np.ndarray
    grad_norm: float
    wall_time_s: float

    def row(self, wall_time: bool = True) -> list[str]:
        vals = [str(self.epoch)] + [repr(float(x)) for x in
                                    (self.loss_total, self.loss_pc, self.loss_rb,
                                     *self.violations)]
        vals.append(f"{self.wall_time_s:.3f}" if wall_time else "0")
        return vals


class NonFiniteError(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: PolicyParams
    log: list[EpochLog] = field(default_factory=list)

    def csv_text(self, wall_time: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for e in self.log:
            w.writerow(e.row(wall_time))
        return buf.getvalue()


def train(theta0: PolicyParams, train_cfg: TrainConfig, reward_cfg: RewardConfig,
          scenario_cfg: ScenarioConfig, vparams: VehicleParams | None = None,
          noise: NoiseModel | None = None, n_slots: int = 8,
          checkpoint_dir: str | Path | None = None,
          log_path: str | Path | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Fine-tune ``theta0``; returns the final parameters and one log row per epoch.

    Rollout ``k`` of epoch ``e`` uses scenario seed
    ``rollout_seed(train_cfg.seed, e, k)``, so results do not depend on the
    worker count. The log's ``rb*`` columns are violation totals summed over
    the epoch's rollouts; losses are negated reward-weighted log-likelihoods.
    ``wall_time_s`` is written as 0 unless ``train_cfg.wall_time`` is set.
    """
    vparams = vparams or VehicleParams(dt=scenario_cfg.dt)
    noise = noise or NoiseModel()
    params = theta0.copy()
    result = TrainResult(params)
    start = time.perf_counter()
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    for epoch in range(train_cfg.max_epoch):
        jobs = []
        for k in range(train_cfg.max_traj):
            cfg = replace(scenario_cfg, horizon=train_cfg.horizon,
                          seed=rollout_seed(train_cfg.seed, epoch, k, train_cfg.max_traj))
            jobs.append(RolloutJob(params.theta, params, cfg, reward_cfg, vparams,
                                   noise, n_slots))
        grads = _map(jobs, train_cfg.workers)
        g = np.zeros_like(params.theta)
        for tg in grads:
            g += tg.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"epoch {epoch}: non-finite gradient")
        g = clip_global_norm(g, train_cfg.grad_clip)
        entry = EpochLog(
            epoch=epoch,
            loss_total=sum(x.loss_total for x in grads),
            loss_pc=sum(x.loss_pc for x in grads),
            loss_rb=sum(x.loss_rb for x in grads),
            violations=sum((x.violations for x in grads), np.zeros(4)),
            grad_norm=float(np.linalg.norm(g)),
            wall_time_s=time.perf_counter() - start,
        )
        if not math.isfinite(entry.loss_total):
            raise NonFiniteError(f"epoch {epoch}: non-finite loss")
        if np.any(g):
            params = PolicyParams(params.arch, params.theta + train_cfg.lr * g)
        result.params = params
        result.log.append(entry)
        if checkpoint_dir is not None:
            save_checkpoint(params, Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt")
        if log_path is not None:
            _atomic_write(Path(log_path), result.csv_text(train_cfg.wall_time))
        if on_epoch is not None:
            on_epoch(entry)
    if log_path is not None and not result.log:
        _atomic_write(Path(log_path), result.csv_text(train_cfg.wall_time))
    return result


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# ---------------------------------------------------------------- supervised warm start

def supervised_gradient(params: PolicyParams, frames, worlds) -> tuple[float, np.ndarray, int]:
    """Mean ground-truth token log-likelihood over frames, and its gradient."""
    feats, seqs, rews = [], [], []
    for frame, world in zip(frames, worlds):
        by_id = {o.id: o for o in world.objects}
        f = featurize(frame, params.arch.vocab)
        for j, r in enumerate(frame.slots):
            src = by_id.get(r.source_id) if r is not None else None
            toks = encode_object(src, world.ego, params.arch.vocab)
            feats.append(f[j])
            seqs.append(toks)
            rews.append([1.0] * len(toks))
    n = sum(len(s) for s in seqs)
    ll, g = weighted_logprob(params, build_batch(np.array(feats), seqs, rews))
    return ll / n, g / n, n


def pretrain(params: PolicyParams, scenario_cfg: ScenarioConfig, n_scenes: int,
             steps: int, lr: float, seed: int, noise: NoiseModel | None = None,
             n_slots: int = 8, frames_per_scene: int = 20,
             vparams: VehicleParams | None = None) -> PolicyParams:
    """Warm start by teacher-forced maximum likelihood on ground-truth tokens.

    Frames come from ground-truth-controlled episodes drawn with seeds
    ``seed + i``; plain gradient ascent with a fixed step size.
    """
    from .perception import ground_truth_detector

    vparams = vparams or VehicleParams(dt=scenario_cfg.dt)
    noise = noise or NoiseModel()
    frames, worlds = [], []
    for i in range(n_scenes):
        cfg = replace(scenario_cfg, seed=seed + i, horizon=frames_per_scene)
        rec = run_episode(spawn(cfg, vparams), ground_truth_detector, ctrl, vparams,
                          noise, n_slots=n_slots)
        frames.extend(rec.frames)
        worlds.extend(rec.states)
    p = params.copy()
    for _ in range(steps):
        _, g, _ = supervised_gradient(p, frames, worlds)
        p = PolicyParams(p.arch, p.theta + lr * g)
    return p


# ---------------------------------------------------------------- enumerable micro-instance

@dataclass
class MicroInstance:
    """One sensor slot whose every token sequence can be enumerated and scored.

    With ``presence_only`` the policy is cut down to its first head and the
    outcomes are the two presence tokens.
    """

    features: np.ndarray                      # (1, F)
    sequences: list[tuple[int, ...]]
    rewards: np.ndarray                       # one reward per sequence
    presence_only: bool = False

    @property
    def best(self) -> tuple[int, ...]:
        return self.sequences[int(np.argmax(self.rewards))]

    def batch(self, index: np.ndarray, weights: np.ndarray) -> TokenBatch:
        """Token batch with one row per chosen sequence, every token weighted alike."""
        feats = np.repeat(self.features, len(index), axis=0)
        if self.presence_only:
            batch = build_batch(feats[:0], [], [])
            batch.feats = feats
            batch.rows["presence"] = (np.arange(len(index)), np.zeros((len(index), 3), int),
                                      np.array([self.sequences[i][0] for i in index], int),
                                      np.asarray(weights, dtype=float))
            return batch
        seqs = [self.sequences[i] for i in index]
        return build_batch(feats, seqs, [[w] * len(s) for s, w in zip(seqs, weights)])


def enumerate_sequences(vocab, presence_only: bool = False) -> list[tuple[int, ...]]:
    if presence_only:
        return [(PRESENT,), (ABSENT,)]
    seqs = [(ABSENT,)]
    for c in range(2):
        for d in range(vocab.n_dist):
            for s in range(vocab.n_speed):
                seqs.append((PRESENT, c, d, s))
    return seqs


def sequence_probs(params: PolicyParams, inst: MicroInstance) -> np.ndarray:
    n = len(inst.sequences)
    return np.exp(slot_logprobs(params, inst.batch(np.arange(n), np.zeros(n))))


def exact_objective(params: PolicyParams, inst: MicroInstance) -> float:
    """J = sum_a pi(a) R(a) by enumeration."""
    return float(sequence_probs(params, inst) @ inst.rewards)


def exact_gradient(params: PolicyParams, inst: MicroInstance) -> np.ndarray:
    """sum_a pi(a) R(a) grad log pi(a) by enumeration."""
    w = sequence_probs(params, inst) * inst.rewards
    return weighted_logprob(params, inst.batch(np.arange(len(w)), w))[1]


def sample_sequences(params: PolicyParams, inst: MicroInstance, n: int, rng) -> np.ndarray:
    """Indices into ``inst.sequences`` drawn from the policy."""
    p = sequence_probs(params, inst)
    return rng.choice(len(p), size=n, p=p / p.sum())


def mc_gradient(params: PolicyParams, inst: MicroInstance, n: int, rng):
    """Log-derivative estimate ``mean_i R(a_i) grad log pi(a_i)`` and its standard errors."""
    idx = sample_sequences(params, inst, n, rng)
    freq = np.bincount(idx, minlength=len(inst.sequences)) / n
    per = np.array([weighted_logprob(params, inst.batch(np.array([k]), [r]))[1]
                    for k, r in enumerate(inst.rewards)])
    mean = freq @ per
    var = freq @ (per - mean) ** 2 * n / (n - 1)
    return mean, np.sqrt(var / n)


def train_micro(params: PolicyParams, inst: MicroInstance, epochs: int, n_samples: int,
                lr: float, grad_clip: float, seed: int) -> tuple[PolicyParams, list[float]]:
    """Plain REINFORCE on the micro-instance; returns final parameters and exact J per epoch."""
    rng = np.random.default_rng(seed)
    p = params.copy()
    history = [exact_objective(p, inst)]
    for _ in range(epochs):
        idx = sample_sequences(p, inst, n_samples, rng)
        g = weighted_logprob(p, inst.batch(idx, inst.rewards[idx]))[1] / n_samples
        p = PolicyParams(p.arch, p.theta + lr * clip_global_norm(g, grad_clip))
        history.append(exact_objective(p, inst))
    return p, history


def greedy_sequence(params: PolicyParams, inst: MicroInstance) -> tuple[int, ...]:
    """Head-by-head argmax decoding of the micro-instance slot."""
    emitted: list[int] = []
    heads = HEADS[:1] if inst.presence_only else HEADS
    for head in heads:
        dist = head_distribution(params, inst.features[0], emitted, head)
        emitted.append(int(np.argmax(dist)))
        if emitted[0] == ABSENT:
            break
    return tuple(emitted)


def rulebook_micro_instance(seed: int, vocab, beta: float = 0.5, w_percp: float = 1.0,
                            horizon: int = 20, presence_only: bool = True,
                            ghost: bool | None = None,
                            vparams: VehicleParams | None = None) -> MicroInstance:
    """A lead vehicle seen in one slot; each sequence is scored by the system it drives.

    The decoded detection becomes a constant-velocity track that the
    controller follows for ``horizon`` steps while the true lead keeps its
    speed. The reward mixes exact-match perception credit with
    ``exp(-violations)`` of that closed loop. Scenes whose ground-truth
    rollout already violates a rule are redrawn. A ``ghost`` scene (drawn with
    probability 1/2 when not given) has a spurious reading and an empty road,
    so reporting nothing is correct there.
    """
    from .domain import EgoState
    from .perception import decode_object
    from .rulebook import score_state
    from .simulator import _make_object, sense, step

    vparams = vparams or VehicleParams()
    rng = np.random.default_rng([seed, 0x31C0])

    def rollout(world0, belief):
        w, total = world0, 0.0
        for k in range(horizon):
            track = [] if belief is None else \
                [replace(belief, position=belief.position + belief.speed * k * vparams.dt)]
            u = ctrl(track, None, w.ego, vparams)
            x = replace(w, ego=replace(w.ego, accel=u.accel))
            total += float(score_state(x, vparams).sum())
            w = step(x, u, vparams)
        return total

    if ghost is None:
        ghost = bool(rng.random() < 0.5)
    lo, hi = vocab.dist_range
    while True:
        ego = EgoState(0.0, float(rng.uniform(4.0, 12.0)))
        g = float(rng.uniform(lo + 0.2 * (hi - lo), lo + 0.8 * (hi - lo)))
        lead = _make_object(1, Kind.VEHICLE, 0, 0.0, float(rng.uniform(2.0, 8.0)))
        lead = replace(lead, position=ego.front + g + lead.depth / 2)
        seen = WorldState(0.0, ego, (lead,))
        world0 = WorldState(0.0, ego, ()) if ghost else seen
        if rollout(world0, None if ghost else lead) == 0.0:
            break
    quiet = NoiseModel(sigma_gap0=0.2, sigma_speed0=0.2, sigma_lane0=0.0,
                       sigma_class0=0.05, miss0=0.0)
    feats = featurize(sense(seen, quiet, rng, n_slots=1), vocab)
    gt = (ABSENT,) if ghost else encode_object(lead, ego, vocab)
    reported = encode_object(lead, ego, vocab)
    seqs = enumerate_sequences(vocab, presence_only)
    rewards = np.zeros(len(seqs))
    for i, s in enumerate(seqs):
        full = reported if presence_only and s[0] == PRESENT else s
        total = rollout(world0, decode_object(full, 0, ego, 0.0, vocab))
        rewards[i] = beta * w_percp * float(full == gt) + (1 - beta) * math.exp(-total)
    return MicroInstance(feats, seqs, rewards, presence_only)

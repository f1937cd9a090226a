"""Token-sequence detector: per slot, presence -> class -> distance -> speed.

Each head is a softmax over affine logits of the slot features (optionally passed
through one tanh hidden layer) concatenated with one-hot encodings of the tokens
already emitted in that slot. Parameters live in one flat float64 vector so that
gradients, clipping, finite differences and checkpoints all share one layout.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import EGO_LENGTH, EgoState, Kind, SceneObject
from .simulator import (
    PEDESTRIAN_DIMS,
    PEDESTRIAN_MAX_BRAKE,
    VEHICLE_DIMS,
    VEHICLE_MAX_BRAKE,
    SensorFrame,
)

PRESENT, ABSENT = 0, 1
HEADS = ("presence", "class", "distance", "speed")


@dataclass(frozen=True)
class Vocabulary:
    n_dist: int = 64
    dist_range: tuple[float, float] = (0.0, 128.0)
    n_speed: int = 16
    speed_range: tuple[float, float] = (-10.0, 30.0)

    @property
    def dist_edges(self) -> np.ndarray:
        return np.linspace(*self.dist_range, self.n_dist + 1)

    @property
    def speed_edges(self) -> np.ndarray:
        return np.linspace(*self.speed_range, self.n_speed + 1)

    @property
    def dist_width(self) -> float:
        return (self.dist_range[1] - self.dist_range[0]) / self.n_dist

    @property
    def speed_width(self) -> float:
        return (self.speed_range[1] - self.speed_range[0]) / self.n_speed

    def head_sizes(self) -> dict[str, int]:
        return {"presence": 2, "class": 2, "distance": self.n_dist, "speed": self.n_speed}

    def encode_distance(self, d: float) -> int:
        k = math.floor((d - self.dist_range[0]) / self.dist_width)
        return min(max(k, 0), self.n_dist - 1)

    def decode_distance(self, k: int) -> float:
        return self.dist_range[0] + (k + 0.5) * self.dist_width

    def encode_speed(self, v: float) -> int:
        k = math.floor((v - self.speed_range[0]) / self.speed_width)
        return min(max(k, 0), self.n_speed - 1)

    def decode_speed(self, k: int) -> float:
        return self.speed_range[0] + (k + 0.5) * self.speed_width

    def to_dict(self) -> dict:
        return {"n_dist": self.n_dist, "dist_range": list(self.dist_range),
                "n_speed": self.n_speed, "speed_range": list(self.speed_range),
                "class_tokens": [k.name for k in Kind],
                "presence_tokens": ["PRESENT", "ABSENT"]}


VOCAB = Vocabulary()

# ---------------------------------------------------------------- features

N_SCALAR = 7


def feature_dim(vocab: Vocabulary = VOCAB) -> int:
    return N_SCALAR + vocab.n_dist + vocab.n_speed


def _rbf(x: float, centers: np.ndarray, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((x - centers) / width) ** 2)


def featurize(frame: SensorFrame, vocab: Vocabulary = VOCAB) -> np.ndarray:
    """One row per slot.

    Columns: presence flag, normalized gap, normalized speed, lane offset,
    absolute lane offset, centered class evidence, normalized fog, then radial
    encodings of the gap and speed readings on the bucket midpoints. Empty
    slots are all zeros.
    """
    n = len(frame.slots)
    out = np.zeros((n, feature_dim(vocab)))
    d_mid = (vocab.dist_edges[:-1] + vocab.dist_edges[1:]) / 2
    s_mid = (vocab.speed_edges[:-1] + vocab.speed_edges[1:]) / 2
    for i, r in enumerate(frame.slots):
        if r is None:
            continue
        out[i, 0] = 1.0
        out[i, 1] = r.noisy_gap / 64.0 - 1.0
        out[i, 2] = (r.noisy_speed - 10.0) / 20.0
        out[i, 3] = r.noisy_lane_offset
        out[i, 4] = abs(r.noisy_lane_offset)
        out[i, 5] = r.class_evidence - 0.5
        out[i, 6] = frame.fog / 100.0
        out[i, N_SCALAR:N_SCALAR + vocab.n_dist] = _rbf(r.noisy_gap, d_mid, vocab.dist_width)
        out[i, N_SCALAR + vocab.n_dist:] = _rbf(r.noisy_speed, s_mid, vocab.speed_width)
    return out


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class Architecture:
    n_features: int
    hidden: int = 0
    vocab: Vocabulary = VOCAB

    @property
    def base_dim(self) -> int:
        return self.hidden if self.hidden else self.n_features

    def prev_dim(self, head: str) -> int:
        v = self.vocab
        return {"presence": 0, "class": 2, "distance": 4, "speed": 4 + v.n_dist}[head]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        if self.hidden:
            shapes += [("W_hidden", (self.n_features, self.hidden)), ("b_hidden", (self.hidden,))]
        for h, k in self.vocab.head_sizes().items():
            shapes += [(f"W_{h}", (self.base_dim + self.prev_dim(h), k)), (f"b_{h}", (k,))]
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())


@dataclass
class PolicyParams:
    """Flat parameter vector plus the architecture that gives it shape."""

    arch: Architecture
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got {self.theta.shape}")

    @classmethod
    def zeros(cls, hidden: int = 0, vocab: Vocabulary = VOCAB) -> "PolicyParams":
        arch = Architecture(feature_dim(vocab), hidden, vocab)
        return cls(arch, np.zeros(arch.n_params))

    @classmethod
    def random(cls, seed: int, scale: float = 0.1, hidden: int = 0,
               vocab: Vocabulary = VOCAB) -> "PolicyParams":
        p = cls.zeros(hidden, vocab)
        p.theta = np.random.default_rng(seed).normal(0.0, scale, p.arch.n_params)
        return p

    def views(self, theta: np.ndarray | None = None) -> dict[str, np.ndarray]:
        theta = self.theta if theta is None else theta
        out, i = {}, 0
        for name, shape in self.arch.layout():
            n = int(np.prod(shape))
            out[name] = theta[i:i + n].reshape(shape)
            i += n
        return out

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.arch, self.theta.copy())


# ---------------------------------------------------------------- forward pass

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _base(params: PolicyParams, feats: np.ndarray, views=None) -> np.ndarray:
    if not params.arch.hidden:
        return feats
    v = views or params.views()
    return np.tanh(feats @ v["W_hidden"] + v["b_hidden"])


def _prev_onehot(arch: Architecture, head: str, prev: np.ndarray) -> np.ndarray:
    """One-hot of already emitted tokens; ``prev`` has one column per earlier head."""
    n = prev.shape[0]
    out = np.zeros((n, arch.prev_dim(head)))
    sizes = [2, 2, arch.vocab.n_dist]
    off = 0
    for j in range(HEADS.index(head)):
        out[np.arange(n), off + prev[:, j]] = 1.0
        off += sizes[j]
    return out


def _head_input(arch: Architecture, head: str, base: np.ndarray, prev: np.ndarray) -> np.ndarray:
    if head == "presence":
        return base
    return np.hstack([base, _prev_onehot(arch, head, prev)])


def head_logits(params: PolicyParams, base: np.ndarray, prev: np.ndarray, head: str,
                views=None) -> np.ndarray:
    v = views or params.views()
    return _head_input(params.arch, head, base, prev) @ v[f"W_{head}"] + v[f"b_{head}"]


def head_distribution(params: PolicyParams, features: np.ndarray, emitted: Sequence[int],
                      head: str) -> np.ndarray:
    """Token distribution of ``head`` for one slot given the tokens emitted so far."""
    if len(emitted) != HEADS.index(head):
        raise ValueError(f"head {head!r} needs {HEADS.index(head)} prior tokens")
    if head != "presence" and emitted[0] != PRESENT:
        raise ValueError("only present slots emit further tokens")
    feats = np.atleast_2d(features)
    prev = np.array([list(emitted)], dtype=int).reshape(1, -1)
    base = _base(params, feats)
    return softmax(head_logits(params, base, prev, head))[0]


# ---------------------------------------------------------------- decoding

@dataclass(frozen=True)
class DetectionSequence:
    """Per-slot tokens with their probabilities and the decoded objects."""

    tokens: tuple[tuple[int, ...], ...]
    token_probs: tuple[tuple[float, ...], ...]
    objects_by_slot: tuple[SceneObject | None, ...]

    @property
    def objects(self) -> list[SceneObject]:
        return [o for o in self.objects_by_slot if o is not None]

    @property
    def probs(self) -> list[float]:
        """Probability of each slot's emitted token sequence."""
        return [float(np.prod(p)) for p in self.token_probs]

    @property
    def token_logprobs(self) -> tuple[tuple[float, ...], ...]:
        return tuple(tuple(math.log(p) for p in ps) for ps in self.token_probs)

    @property
    def logprob(self) -> float:
        return float(sum(sum(lp) for lp in self.token_logprobs))


DETECTION_ID_BASE = 10_000


def decode_object(tokens: Sequence[int], slot: int, ego: EgoState, lane_offset: float,
                  vocab: Vocabulary = VOCAB) -> SceneObject | None:
    if tokens[0] == ABSENT:
        return None
    kind = Kind(tokens[1])
    if kind == Kind.VEHICLE:
        (w, h, d), mb = VEHICLE_DIMS, VEHICLE_MAX_BRAKE
    else:
        (w, h, d), mb = PEDESTRIAN_DIMS, PEDESTRIAN_MAX_BRAKE
    g = vocab.decode_distance(tokens[2])
    return SceneObject(
        id=DETECTION_ID_BASE + slot, kind=kind, lane=ego.lane + int(round(lane_offset)),
        position=ego.position + EGO_LENGTH / 2 + g + d / 2,
        speed=vocab.decode_speed(tokens[3]), width=w, height=h, depth=d, max_brake=mb)


def encode_object(obj: SceneObject | None, ego: EgoState,
                  vocab: Vocabulary = VOCAB) -> tuple[int, ...]:
    """Ground-truth token sequence for a slot holding ``obj`` (or nothing)."""
    if obj is None:
        return (ABSENT,)
    g = obj.rear - (ego.position + EGO_LENGTH / 2)
    return (PRESENT, int(obj.kind), vocab.encode_distance(g), vocab.encode_speed(obj.speed))


def _decode_all(frame: SensorFrame, tokens, probs, ego: EgoState, vocab: Vocabulary):
    objs = []
    for j, toks in enumerate(tokens):
        r = frame.slots[j]
        offset = r.noisy_lane_offset if r is not None else 0.0
        objs.append(decode_object(toks, j, ego, offset, vocab))
    return DetectionSequence(tuple(tokens), tuple(probs), tuple(objs))


# ---------------------------------------------------------------- decoding strategies

def _decode(params: PolicyParams, frame: SensorFrame, ego: EgoState, rng=None,
            feats: np.ndarray | None = None) -> DetectionSequence:
    arch = params.arch
    views = params.views()
    if feats is None:
        feats = featurize(frame, arch.vocab)
    n = feats.shape[0]
    base = _base(params, feats, views)
    prev = np.zeros((n, 3), dtype=int)
    tokens = [[] for _ in range(n)]
    probs = [[] for _ in range(n)]
    active = np.arange(n)
    for h_i, head in enumerate(HEADS):
        if active.size == 0:
            break
        p = softmax(head_logits(params, base[active], prev[active], head, views))
        if rng is None:
            choice = p.argmax(axis=1)
        else:
            u = rng.random(active.size)
            cdf = np.cumsum(p, axis=1)
            choice = np.minimum((cdf < u[:, None]).sum(axis=1), p.shape[1] - 1)
        for row, slot in enumerate(active):
            tokens[slot].append(int(choice[row]))
            probs[slot].append(float(p[row, choice[row]]))
        if h_i < 3:
            prev[active, h_i] = choice
        if head == "presence":
            active = active[choice == PRESENT]
    return _decode_all(frame, [tuple(t) for t in tokens], [tuple(p) for p in probs],
                       ego, arch.vocab)


def sample(params: PolicyParams, frame: SensorFrame, rng, ego: EgoState | None = None
           ) -> DetectionSequence:
    """Draw every slot's tokens head by head from the policy."""
    return _decode(params, frame, ego or EgoState(0.0, 0.0), rng)


def argmax_detect(params: PolicyParams, frame: SensorFrame, ego: EgoState | None = None
                  ) -> DetectionSequence:
    """Greedy decoding; ties go to the lowest token index."""
    return _decode(params, frame, ego or EgoState(0.0, 0.0), None)


class SamplingDetector:
    def __init__(self, params: PolicyParams):
        self.params = params

    def __call__(self, frame, world, rng):
        return sample(self.params, frame, rng, world.ego)


class ArgmaxDetector:
    def __init__(self, params: PolicyParams):
        self.params = params

    def __call__(self, frame, world, rng=None):
        return argmax_detect(self.params, frame, world.ego)


def ground_truth_detector(frame, world, rng=None) -> DetectionSequence:
    """Perfect perception: the true objects with probability one."""
    objs = tuple(world.objects)
    return DetectionSequence(tuple(() for _ in objs), tuple(() for _ in objs), objs)


def blind_detector(frame, world, rng=None) -> DetectionSequence:
    n = len(frame.slots)
    return DetectionSequence(tuple((ABSENT,) for _ in range(n)),
                             tuple((1.0,) for _ in range(n)), (None,) * n)


# ---------------------------------------------------------------- log-likelihood and gradient

@dataclass
class TokenBatch:
    """Flattened (slot, head) rows: features, earlier tokens, target token, reward."""

    feats: np.ndarray            # (S, F) one row per slot
    rows: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=dict)    # head -> (slot index, prev tokens, target, reward)

    @property
    def n_tokens(self) -> int:
        return sum(len(r[0]) for r in self.rows.values())


def build_batch(feats: np.ndarray, sequences: Sequence[Sequence[int]],
                rewards: Sequence[Sequence[float]]) -> TokenBatch:
    if len(sequences) != feats.shape[0] or len(rewards) != len(sequences):
        raise ValueError("one token sequence and one reward sequence per slot required")
    cols = {h: ([], [], [], []) for h in HEADS}
    for s, (seq, rew) in enumerate(zip(sequences, rewards)):
        if len(seq) != len(rew):
            raise ValueError(f"slot {s}: {len(seq)} tokens but {len(rew)} rewards")
        if len(seq) not in (1, 4) or (len(seq) == 1) != (seq[0] == ABSENT):
            raise ValueError(f"slot {s}: malformed token sequence {tuple(seq)}")
        for j, (tok, r) in enumerate(zip(seq, rew)):
            c = cols[HEADS[j]]
            c[0].append(s)
            c[1].append(list(seq[:j]) + [0] * (3 - j))
            c[2].append(tok)
            c[3].append(r)
    rows = {}
    for h, (idx, prev, tgt, rew) in cols.items():
        rows[h] = (np.array(idx, dtype=int), np.array(prev, dtype=int).reshape(-1, 3),
                   np.array(tgt, dtype=int), np.array(rew, dtype=float))
    return TokenBatch(feats, rows)


def weighted_logprob(params: PolicyParams, batch: TokenBatch, with_grad: bool = True):
    """``sum_j R_j log pi(A_j)`` over every token in the batch, and its gradient."""
    arch = params.arch
    views = params.views()
    base = _base(params, batch.feats, views)
    grad = np.zeros_like(params.theta)
    gviews = params.views(grad)
    dbase = np.zeros_like(base)
    total = 0.0
    for head in HEADS:
        idx, prev, tgt, rew = batch.rows[head]
        if idx.size == 0:
            continue
        x = _head_input(arch, head, base[idx], prev)
        logits = x @ views[f"W_{head}"] + views[f"b_{head}"]
        logp = log_softmax(logits)
        picked = logp[np.arange(idx.size), tgt]
        total += float(rew @ picked)
        if not with_grad:
            continue
        g = -np.exp(logp) * rew[:, None]
        g[np.arange(idx.size), tgt] += rew
        gviews[f"W_{head}"][...] = x.T @ g
        gviews[f"b_{head}"][...] = g.sum(axis=0)
        if arch.hidden:
            np.add.at(dbase, idx, g @ views[f"W_{head}"][:arch.base_dim].T)
    if with_grad and arch.hidden:
        dpre = dbase * (1.0 - base ** 2)
        gviews["W_hidden"][...] = batch.feats.T @ dpre
        gviews["b_hidden"][...] = dpre.sum(axis=0)
    return total, grad


def slot_logprobs(params: PolicyParams, batch: TokenBatch) -> np.ndarray:
    """log pi of each slot's whole token sequence; rewards are ignored."""
    views = params.views()
    base = _base(params, batch.feats, views)
    out = np.zeros(batch.feats.shape[0])
    for head in HEADS:
        idx, prev, tgt, _ = batch.rows[head]
        if idx.size == 0:
            continue
        x = _head_input(params.arch, head, base[idx], prev)
        logp = log_softmax(x @ views[f"W_{head}"] + views[f"b_{head}"])
        np.add.at(out, idx, logp[np.arange(idx.size), tgt])
    return out


def logprob_and_grad(params: PolicyParams, frame: SensorFrame, tokens,
                     token_rewards: Sequence[Sequence[float]]):
    """Reward-weighted log-likelihood of one frame's tokens and its exact gradient."""
    seqs = tokens.tokens if isinstance(tokens, DetectionSequence) else tokens
    feats = featurize(frame, params.arch.vocab)
    return weighted_logprob(params, build_batch(feats, seqs, token_rewards))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = "rulebook-rl-policy"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: PolicyParams, path) -> None:
    """Write ``header-json \\n raw-little-endian-float64``; atomic via rename."""
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "vocabulary": params.arch.vocab.to_dict(),
        "n_features": params.arch.n_features,
        "hidden": params.arch.hidden,
        "n_params": params.arch.n_params,
        "dtype": "<f8",
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(params.theta.astype("<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path, vocab: Vocabulary = VOCAB) -> PolicyParams:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(head)
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if header.get("vocabulary") != vocab.to_dict():
        raise ValueError(f"{path}: vocabulary mismatch")
    arch = Architecture(int(header["n_features"]), int(header["hidden"]), vocab)
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if theta.size != header["n_params"] or theta.size != arch.n_params:
        raise ValueError(f"{path}: expected {arch.n_params} parameters, found {theta.size}")
    return PolicyParams(arch, theta)
